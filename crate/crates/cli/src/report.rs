//! Report generation over completed runs: metrics-CSV ingestion and the
//! kind-specific aggregations, with the fit kinds delegating to the
//! scaling-law module. Reports are versioned JSON and reference their input
//! runs by digest.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use tinylab_core::scaling::{
    fit_envelope, fit_nd_scaling, fit_optimal_batchsize, BatchCurve, MultiStart, RunPoint,
};

use crate::config::ExperimentSpec;
use crate::run::{spec_param_count, RunRecord, METRICS_HEADER};
use crate::HarnessError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    WsdVsCosine,
    LrStability,
    Batchsize,
    Scaling,
    Envelope,
}

impl FromStr for ReportKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "wsd-vs-cosine" => Ok(Self::WsdVsCosine),
            "lr-stability" => Ok(Self::LrStability),
            "batchsize" => Ok(Self::Batchsize),
            "scaling" => Ok(Self::Scaling),
            "envelope" => Ok(Self::Envelope),
            other => Err(HarnessError::Config(format!(
                "unknown report kind '{other}' (wsd-vs-cosine|lr-stability|batchsize|scaling|envelope)"
            ))),
        }
    }
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::WsdVsCosine => "wsd-vs-cosine",
            Self::LrStability => "lr-stability",
            Self::Batchsize => "batchsize",
            Self::Scaling => "scaling",
            Self::Envelope => "envelope",
        }
    }
}

/// One parsed metrics row. Probe columns parse the undefined-direction
/// sentinel to None.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub batch_tokens: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_loss_per_byte: Option<f64>,
    pub tokens_seen: u64,
    pub grad_norm: Option<f64>,
    pub grad_cosine: Option<f64>,
    pub curvature: Option<f64>,
}

fn parse_opt(field: &str) -> Option<f64> {
    if field.is_empty() {
        return None;
    }
    field.parse().ok()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Report(format!("{}: empty file", path.display())))?;
    let expected: Vec<&str> = METRICS_HEADER.split(',').collect();
    let got: Vec<&str> = header.split(',').collect();
    for col in &expected {
        if !got.contains(col) {
            return Err(HarnessError::Report(format!(
                "{}: missing column '{col}'",
                path.display()
            )));
        }
    }
    let idx = |name: &str| got.iter().position(|c| c == &name).unwrap();
    let (i_step, i_lr, i_bt, i_tl, i_el, i_epb, i_ts) = (
        idx("step"),
        idx("lr"),
        idx("batch_tokens"),
        idx("train_loss"),
        idx("eval_loss"),
        idx("eval_loss_per_byte"),
        idx("tokens_seen"),
    );
    let (i_gn, i_gc, i_k) = (idx("grad_norm"), idx("grad_cosine"), idx("curvature"));
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != got.len() {
            return Err(HarnessError::Report(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                lineno + 2,
                f.len(),
                got.len()
            )));
        }
        let num = |i: usize, col: &str| -> Result<f64, HarnessError> {
            f[i].parse().map_err(|_| {
                HarnessError::Report(format!(
                    "{}: row {}: column '{col}' is not numeric: '{}'",
                    path.display(),
                    lineno + 2,
                    f[i]
                ))
            })
        };
        rows.push(MetricsRow {
            step: num(i_step, "step")? as u64,
            lr: num(i_lr, "lr")?,
            batch_tokens: num(i_bt, "batch_tokens")? as u64,
            train_loss: num(i_tl, "train_loss")?,
            eval_loss: parse_opt(f[i_el]),
            eval_loss_per_byte: parse_opt(f[i_epb]),
            tokens_seen: num(i_ts, "tokens_seen")? as u64,
            grad_norm: parse_opt(f[i_gn]),
            grad_cosine: parse_opt(f[i_gc]),
            curvature: parse_opt(f[i_k]),
        });
    }
    Ok(rows)
}

pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub spec: ExperimentSpec,
    pub metrics: Vec<MetricsRow>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, HarnessError> {
    let record = RunRecord::load(dir)?;
    let spec = ExperimentSpec::from_toml(
        &std::fs::read_to_string(dir.join("spec.toml"))
            .map_err(|e| HarnessError::Report(format!("{}: {e}", dir.display())))?,
    )?;
    let metrics = read_metrics(&dir.join("metrics.csv"))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        record,
        spec,
        metrics,
    })
}

fn final_eval_loss(run: &LoadedRun) -> Result<f64, HarnessError> {
    run.record.final_eval_loss.ok_or_else(|| {
        HarnessError::Report(format!(
            "{}: run has no eval loss (configure [eval])",
            run.dir.display()
        ))
    })
}

pub fn make_report(kind: ReportKind, run_dirs: &[PathBuf]) -> Result<serde_json::Value, HarnessError> {
    if run_dirs.is_empty() {
        return Err(HarnessError::Report("no runs given".into()));
    }
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_, _>>()?;
    let inputs: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| json!({"run_dir": r.dir, "run_id": r.record.run_id}))
        .collect();
    let payload = match kind {
        ReportKind::WsdVsCosine => wsd_vs_cosine(&runs)?,
        ReportKind::LrStability => lr_stability(&runs)?,
        ReportKind::Batchsize => batchsize(&runs)?,
        ReportKind::Scaling => scaling(&runs)?,
        ReportKind::Envelope => envelope(&runs)?,
    };
    Ok(json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": kind.name(),
        "inputs": inputs,
        "payload": payload,
    }))
}

pub fn write_report(
    kind: ReportKind,
    run_dirs: &[PathBuf],
    out: &Path,
) -> Result<serde_json::Value, HarnessError> {
    let report = make_report(kind, run_dirs)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Report(e.to_string()))?;
    std::fs::write(out, text + "\n")?;
    Ok(report)
}

fn wsd_vs_cosine(runs: &[LoadedRun]) -> Result<serde_json::Value, HarnessError> {
    let mut entries = Vec::new();
    let mut wsd_final: Vec<f64> = Vec::new();
    let mut cosine_final: Vec<f64> = Vec::new();
    for r in runs {
        let final_eval = final_eval_loss(r)?;
        let kind = format!("{:?}", r.spec.schedule.kind).to_lowercase();
        match kind.as_str() {
            "wsd" => wsd_final.push(final_eval),
            "cosine" => cosine_final.push(final_eval),
            _ => {}
        }
        entries.push(json!({
            "run_id": r.record.run_id,
            "schedule_kind": kind,
            "seed": r.spec.seed,
            "final_eval_loss": final_eval,
            "final_train_loss": r.record.final_train_loss,
            "series": {
                "step": r.metrics.iter().map(|m| m.step).collect::<Vec<_>>(),
                "lr": r.metrics.iter().map(|m| m.lr).collect::<Vec<_>>(),
                "train_loss": r.metrics.iter().map(|m| m.train_loss).collect::<Vec<_>>(),
                "eval_loss": r.metrics.iter().map(|m| m.eval_loss).collect::<Vec<_>>(),
            },
        }));
    }
    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let delta = match (mean(&wsd_final), mean(&cosine_final)) {
        (Some(w), Some(c)) => Some(c - w),
        _ => None,
    };
    Ok(json!({
        "runs": entries,
        "mean_final_eval_loss_wsd": mean(&wsd_final),
        "mean_final_eval_loss_cosine": mean(&cosine_final),
        "cosine_minus_wsd": delta,
    }))
}

fn lr_stability(runs: &[LoadedRun]) -> Result<serde_json::Value, HarnessError> {
    let mut per_run = Vec::new();
    let mut etas: Vec<f64> = Vec::new();
    for r in runs {
        let eta = r.spec.schedule.eta;
        if !etas.iter().any(|&e| (e - eta).abs() < 1e-15) {
            etas.push(eta);
        }
        per_run.push((
            r.spec.model.d_m,
            r.spec.seed,
            eta,
            final_eval_loss(r)?,
        ));
    }
    etas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let grid_index = |eta: f64| -> usize {
        etas.iter()
            .position(|&e| (e - eta).abs() < 1e-15)
            .unwrap_or(usize::MAX)
    };

    // argmin loss per (width, seed)
    let mut keys: Vec<(usize, u64)> = per_run.iter().map(|&(w, s, _, _)| (w, s)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut argmin = Vec::new();
    for &(w, seed) in &keys {
        let best = per_run
            .iter()
            .filter(|&&(pw, ps, _, _)| pw == w && ps == seed)
            .min_by(|a, b| a.3.partial_cmp(&b.3).unwrap())
            .unwrap();
        argmin.push(json!({
            "d_m": w,
            "seed": seed,
            "best_eta": best.2,
            "grid_index": grid_index(best.2),
            "best_loss": best.3,
        }));
    }

    // Max argmin shift across widths, per seed.
    let mut seeds: Vec<u64> = keys.iter().map(|&(_, s)| s).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut shifts = Vec::new();
    for &seed in &seeds {
        let indices: Vec<usize> = argmin
            .iter()
            .filter(|a| a["seed"].as_u64() == Some(seed))
            .map(|a| a["grid_index"].as_u64().unwrap() as usize)
            .collect();
        let shift = match (indices.iter().max(), indices.iter().min()) {
            (Some(&hi), Some(&lo)) => hi - lo,
            _ => 0,
        };
        shifts.push(json!({"seed": seed, "max_grid_shift": shift}));
    }

    Ok(json!({
        "eta_grid": etas,
        "per_run": per_run
            .iter()
            .map(|&(w, s, e, l)| json!({"d_m": w, "seed": s, "eta": e, "final_eval_loss": l}))
            .collect::<Vec<_>>(),
        "argmin": argmin,
        "per_seed_shift": shifts,
    }))
}

fn batchsize(runs: &[LoadedRun]) -> Result<serde_json::Value, HarnessError> {
    let curves: Vec<BatchCurve> = runs
        .iter()
        .map(|r| BatchCurve {
            batch_size: r.spec.batch.to_ramp().tokens_at(1) as f64,
            points: r
                .metrics
                .iter()
                .map(|m| (m.tokens_seen as f64, m.train_loss))
                .collect(),
        })
        .collect();
    let fit = fit_optimal_batchsize(&curves)?;
    Ok(json!({
        "n_curves": curves.len(),
        "fit": fit,
    }))
}

fn scaling(runs: &[LoadedRun]) -> Result<serde_json::Value, HarnessError> {
    let points: Vec<RunPoint> = runs
        .iter()
        .map(|r| -> Result<RunPoint, HarnessError> {
            let loss = r.record.final_eval_loss_per_byte.ok_or_else(|| {
                HarnessError::Report(format!(
                    "{}: scaling fit wants bytes-normalized eval loss",
                    r.dir.display()
                ))
            })?;
            Ok(RunPoint {
                n_params: spec_param_count(&r.spec) as f64,
                tokens: r.record.tokens_seen as f64,
                loss,
                batch_size: r.spec.batch.to_ramp().tokens_at(1) as f64,
                tag: r.record.run_id.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    let fit = fit_nd_scaling(&points, &MultiStart::default_grid(&points))?;
    Ok(json!({
        "points": points,
        "fit": fit,
    }))
}

fn envelope(runs: &[LoadedRun]) -> Result<serde_json::Value, HarnessError> {
    let mut points: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| -> Result<(f64, f64), HarnessError> {
            let n = spec_param_count(&r.spec) as f64;
            let c = 6.0 * n * r.record.tokens_seen as f64;
            Ok((c, final_eval_loss(r)?))
        })
        .collect::<Result<_, _>>()?;
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let report = fit_envelope(&points)?;
    Ok(json!({
        "points": points,
        "fit": report,
    }))
}
