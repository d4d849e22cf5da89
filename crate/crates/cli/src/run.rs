//! Deterministic training runs: schedule-driven loop, stage-keyed data
//! mixtures, metrics CSV, dynamics probes, checkpoints, and decay fork-off.
//!
//! Everything a run emits is a pure function of (spec, seed): fixed-order
//! math in the graph, seeded samplers whose positions are serialized into
//! checkpoints, and shortest-round-trip float formatting in the CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tinylab_core::dynamics::{max_abs_weight_update, max_weight_update, ProbeRecorder, StepProbe};
use tinylab_core::model::{build_model, count_params, Model, ParamKind};
use tinylab_core::optim::{adam_step, AdamState};
use tinylab_core::scaling::bytes_normalized_loss;
use tinylab_core::schedule::ScheduleKind;
use tinylab_core::Graph;

use crate::checkpoint::{load_checkpoint, restore_model, save_checkpoint, CheckpointData};
use crate::config::{ExperimentSpec, SourceSpec, Stage};
use crate::corpus::{load_source, EvalSet, MixtureSampler, SamplerState, Tokenizer};
use crate::HarnessError;

pub const METRICS_HEADER: &str = "step,lr,batch_tokens,train_loss,eval_loss,eval_loss_per_byte,tokens_seen,grad_norm,grad_inner,grad_cosine,d1,d2,curvature,max_update_signed,max_update_abs";

/// Sentinel written when a probe fired but the update direction (or a
/// gradient) vanished.
pub const UNDEF_SENTINEL: &str = "undef";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub tokens_seen: u64,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_loss_per_byte: Option<f64>,
    /// Batch draws per stage per source.
    pub source_draws: Vec<Vec<u64>>,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(run_dir.join("run.json"))
            .map_err(|e| HarnessError::Report(format!("{}: {e}", run_dir.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Report(e.to_string()))
    }
}

pub struct ForkOptions {
    pub half_life: u64,
    pub end_step: u64,
    /// Decay-stage mixture override; None keeps the donor's.
    pub mixture: Option<Vec<SourceSpec>>,
}

struct Restored {
    model: Model,
    adam: AdamState,
    start_step: u64,
    tokens_seen: u64,
    sampler_states: Vec<Option<SamplerState>>,
    source_draws: Vec<Vec<u64>>,
}

/// Train from scratch.
pub fn run_experiment(spec: &ExperimentSpec, run_dir: &Path) -> Result<RunRecord, HarnessError> {
    run_loop(spec, run_dir, None)
}

/// Restore a checkpoint and continue the identical spec to completion.
pub fn resume_experiment(ckpt_dir: &Path, run_dir: &Path) -> Result<RunRecord, HarnessError> {
    let data = load_checkpoint(ckpt_dir)?;
    let spec = data.spec.clone();
    let restored = restored_from(&data, &spec)?;
    run_loop(&spec, run_dir, Some(restored))
}

/// Fork a stable-stage checkpoint into a fresh decay branch: one more
/// plateau step at eta, then exponential decay to `end_step`. The donor
/// run's artifacts are never touched.
pub fn fork_decay(
    ckpt_dir: &Path,
    fork: ForkOptions,
    run_dir: &Path,
) -> Result<RunRecord, HarnessError> {
    let data = load_checkpoint(ckpt_dir)?;
    let donor = &data.spec;
    if donor.schedule.kind != ScheduleKind::Wsd {
        return Err(HarnessError::Config(
            "fork-decay requires a WSD donor schedule".into(),
        ));
    }
    if data.step > donor.schedule.stable_end {
        return Err(HarnessError::Config(format!(
            "refusing to fork: checkpoint step {} is inside the donor decay phase (stable end {})",
            data.step, donor.schedule.stable_end
        )));
    }
    if data.step < donor.schedule.warmup {
        return Err(HarnessError::Config(format!(
            "refusing to fork: checkpoint step {} is inside warmup (ends {})",
            data.step, donor.schedule.warmup
        )));
    }
    if fork.end_step <= data.step + 1 {
        return Err(HarnessError::Config(format!(
            "fork end_step {} must exceed checkpoint step {} + 1",
            fork.end_step, data.step
        )));
    }

    let mut spec = donor.clone();
    spec.schedule.stable_end = data.step + 1;
    spec.schedule.total = fork.end_step;
    spec.schedule.half_life = Some(fork.half_life);
    spec.total_steps = fork.end_step;
    spec.checkpoint_steps = vec![];
    spec.sft = None;
    if let Some(mix) = fork.mixture {
        spec.corpus.decay = mix;
    }

    let restored = restored_from(&data, &spec)?;
    run_loop(&spec, run_dir, Some(restored))
}

/// Sampler states carry over only for stages whose source list is unchanged
/// relative to the donor spec.
fn restored_from(data: &CheckpointData, new_spec: &ExperimentSpec) -> Result<Restored, HarnessError> {
    let (model, adam) = restore_model(data, new_spec.optimizer.to_adam_config())?;
    let mut states: Vec<Option<SamplerState>> = vec![None, None, None];
    let mut draws = vec![vec![], vec![], vec![]];
    for stage in [Stage::Stable, Stage::Decay, Stage::Sft] {
        let i = stage.index();
        if data.spec.sources_for(stage) == new_spec.sources_for(stage) {
            if let Some(st) = data.samplers.get(i) {
                states[i] = Some(st.clone());
            }
            if let Some(d) = data.source_draws.get(i) {
                draws[i] = d.clone();
            }
        }
    }
    Ok(Restored {
        model,
        adam,
        start_step: data.step,
        tokens_seen: data.tokens_seen,
        sampler_states: states,
        source_draws: draws,
    })
}

struct MetricsRowOut {
    step: u64,
    lr: f64,
    batch_tokens: u64,
    train_loss: f32,
    eval: Option<(f64, f64)>,
    tokens_seen: u64,
    probe: Option<StepProbe>,
}

fn fmt_opt_probe(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => UNDEF_SENTINEL.to_string(),
    }
}

fn write_row(w: &mut impl Write, row: &MetricsRowOut) -> std::io::Result<()> {
    let (eval_loss, eval_pb) = match row.eval {
        Some((a, b)) => (format!("{a}"), format!("{b}")),
        None => (String::new(), String::new()),
    };
    let probe_cols = match &row.probe {
        Some(p) => {
            let global_signed = p
                .max_update
                .iter()
                .map(|&(_, s, _)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            let global_abs = p
                .max_update
                .iter()
                .map(|&(_, _, a)| a)
                .fold(0.0f64, f64::max);
            format!(
                "{},{},{},{},{},{},{},{}",
                p.grad_norm,
                fmt_opt_probe(p.grad_inner),
                fmt_opt_probe(p.grad_cosine),
                fmt_opt_probe(p.d1),
                fmt_opt_probe(p.d2),
                fmt_opt_probe(p.curvature),
                if p.max_update.is_empty() {
                    UNDEF_SENTINEL.to_string()
                } else {
                    format!("{global_signed}")
                },
                if p.max_update.is_empty() {
                    UNDEF_SENTINEL.to_string()
                } else {
                    format!("{global_abs}")
                },
            )
        }
        None => ",,,,,,,".to_string(),
    };
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        row.step, row.lr, row.batch_tokens, row.train_loss, eval_loss, eval_pb, row.tokens_seen, probe_cols
    )
}

/// Token-mean and bytes-normalized eval loss over a fixed eval set,
/// forward-only, in row batches of 32.
fn evaluate(model: &Model, eval: &EvalSet) -> Result<(f64, f64), HarnessError> {
    let seq = eval.chunk;
    let vocab = model.config.vocab;
    let mut total_nll = 0.0f64;
    let mut count = 0u64;
    let mut token_losses = Vec::new();
    let mut token_bytes = Vec::new();
    let mut r = 0;
    while r < eval.rows {
        let rows = (eval.rows - r).min(32);
        let tokens = &eval.tokens[r * seq..(r + rows) * seq];
        let mut g: Graph<f32> = Graph::new();
        let fg = model.graph_forward(&mut g, tokens, rows, seq, &model.param_values(), true)?;
        let logits = g.value(fg.logits);
        let ld = logits.data();
        for row in 0..rows {
            for pos in 0..seq - 1 {
                let off = (row * seq + pos) * vocab;
                let target = tokens[row * seq + pos + 1];
                let slice = &ld[off..off + vocab];
                let mut max = f64::NEG_INFINITY;
                for &v in slice {
                    max = max.max(v as f64);
                }
                let mut denom = 0.0f64;
                for &v in slice {
                    denom += ((v as f64) - max).exp();
                }
                let nll = max + denom.ln() - slice[target] as f64;
                total_nll += nll;
                count += 1;
                token_losses.push(nll);
                token_bytes.push(eval.byte_lens[(r + row) * seq + pos + 1] as u64);
            }
        }
        r += rows;
    }
    let mean = total_nll / count as f64;
    let per_byte = bytes_normalized_loss(&token_losses, &token_bytes)?;
    Ok((mean, per_byte))
}

fn flatten_f64(vals: &[Vec<f32>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
    for v in vals {
        out.extend(v.iter().map(|&x| x as f64));
    }
    out
}

fn run_loop(
    spec: &ExperimentSpec,
    run_dir: &Path,
    restored: Option<Restored>,
) -> Result<RunRecord, HarnessError> {
    spec.validate()?;
    if run_dir.join("run.json").exists() {
        return Err(HarnessError::Config(format!(
            "run dir {} already holds a completed run (append-only)",
            run_dir.display()
        )));
    }
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("spec.toml"), spec.to_toml())?;

    let tokenizer = Tokenizer::load(&spec.corpus.tokenizer)?;
    let cfg = spec.model_config();
    let vocab = cfg.vocab;

    // Samplers for all three stages; unused ones stay at their seeds.
    let mut samplers: Vec<MixtureSampler> = Vec::new();
    for stage in [Stage::Stable, Stage::Decay, Stage::Sft] {
        let specs = spec.sources_for(stage).to_vec();
        let mut corpora = Vec::new();
        for s in &specs {
            let c = load_source(s, &tokenizer)?;
            if let Some(&bad) = c.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(HarnessError::Config(format!(
                    "corpus token id {bad} exceeds model vocab {vocab}"
                )));
            }
            corpora.push(c);
        }
        samplers.push(MixtureSampler::new(
            spec.seed,
            stage.index(),
            &specs,
            corpora,
            spec.seq_len,
        )?);
    }

    let eval_set = match &spec.eval {
        Some(e) => {
            let src = SourceSpec {
                path: e.path.clone(),
                synth_markov: e.synth_markov.clone(),
                weight: 1.0,
            };
            let corpus = load_source(&src, &tokenizer)?;
            if let Some(&bad) = corpus.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(HarnessError::Config(format!(
                    "eval token id {bad} exceeds model vocab {vocab}"
                )));
            }
            Some(EvalSet::from_corpus(&corpus, spec.seq_len, e.tokens)?)
        }
        None => None,
    };

    let (mut model, mut adam, start_step, mut tokens_seen) = match restored {
        Some(r) => {
            for (i, st) in r.sampler_states.iter().enumerate() {
                if let Some(st) = st {
                    samplers[i].restore(st)?;
                    if !r.source_draws[i].is_empty() {
                        samplers[i].draws = r.source_draws[i].clone();
                    }
                }
            }
            (r.model, r.adam, r.start_step, r.tokens_seen)
        }
        None => {
            let model = build_model(&cfg)?;
            let adam = AdamState::new(spec.optimizer.to_adam_config(), &model);
            (model, adam, 0u64, 0u64)
        }
    };

    let mut recorder = if spec.probe_cadence > 0 {
        Some(ProbeRecorder::new(spec.probe_cadence))
    } else {
        None
    };
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut probe_matrix_file = if spec.probe_cadence > 0 {
        let mut f = BufWriter::new(fs::File::create(run_dir.join("probes_matrices.csv"))?);
        writeln!(f, "step,matrix,max_update_signed,max_update_abs")?;
        Some(f)
    } else {
        None
    };

    let ramp = spec.batch.to_ramp();
    let run_id = spec.digest()[..16].to_string();
    let mut pending: Option<MetricsRowOut> = None;
    let mut final_eval: Option<(f64, f64)> = None;
    let mut final_train_loss = 0.0f32;
    let mut final_ckpt = PathBuf::new();

    let save_ckpt = |name: String,
                     spec: &ExperimentSpec,
                     model: &Model,
                     adam: &AdamState,
                     step: u64,
                     tokens_seen: u64,
                     samplers: &[MixtureSampler],
                     states: Option<Vec<SamplerState>>|
     -> Result<PathBuf, HarnessError> {
        let dir = run_dir.join(name);
        let states = states.unwrap_or_else(|| samplers.iter().map(|s| s.state()).collect());
        let draws = samplers.iter().map(|s| s.draws.clone()).collect();
        save_checkpoint(&dir, spec, model, adam, step, tokens_seen, states, draws)?;
        Ok(dir)
    };

    for s in start_step + 1..=spec.total_steps {
        let stage = spec.stage_of(s);
        let batch_tokens = ramp.tokens_at(s);
        let rows = (batch_tokens / spec.seq_len as u64) as usize;
        if rows == 0 {
            return Err(HarnessError::Config(format!(
                "batch of {batch_tokens} tokens yields zero rows of seq {}",
                spec.seq_len
            )));
        }
        let lr = spec.lr_at(s)?;
        // Snapshot sampler positions so a fault checkpoint stays coherent.
        let pre_states: Vec<SamplerState> = samplers.iter().map(|sm| sm.state()).collect();
        let batch = samplers[stage.index()].next_batch(rows);

        let mut g: Graph<f32> = Graph::new();
        let values = model.param_values();
        let fg = model.graph_forward(&mut g, &batch.tokens, batch.rows, batch.chunk, &values, false)?;
        let loss = g.value(fg.loss).data()[0];
        if !loss.is_finite() {
            if let Some(prev) = pending.take() {
                write_row(&mut metrics, &prev)?;
            }
            metrics.flush()?;
            let dir = save_ckpt(
                format!("fault-ckpt-{:08}", s - 1),
                spec,
                &model,
                &adam,
                s - 1,
                tokens_seen,
                &samplers,
                Some(pre_states),
            )?;
            return Err(HarnessError::RunFault(format!(
                "non-finite loss at step {s}; diagnostic checkpoint at {}",
                dir.display()
            )));
        }
        g.backward(fg.loss).map_err(|e| HarnessError::Model(e.to_string()))?;
        let mut grads: Vec<Vec<f32>> = fg
            .param_nodes
            .iter()
            .zip(model.params())
            .map(|(&n, p)| {
                g.grad(n)
                    .map(|gr| gr.to_vec())
                    .unwrap_or_else(|| vec![0.0f32; p.data.numel()])
            })
            .collect();

        // Probe bookkeeping: the gradient of step s completes the probe of
        // step s-1, which still sits in the pending CSV row.
        if let Some(rec) = recorder.as_mut() {
            if rec.wants_grad(s) {
                if let Some(probe) = rec.record_grad(s, flatten_f64(&grads)) {
                    if let Some(prev) = pending.as_mut() {
                        debug_assert_eq!(prev.step, probe.step);
                        prev.probe = Some(probe);
                    }
                }
            }
        }
        let snapshot = match recorder.as_ref() {
            Some(rec) if rec.wants_delta(s) => Some(model.param_values()),
            _ => None,
        };

        if let Err(e) = adam_step(&mut adam, &mut model, &mut grads, lr) {
            if let Some(prev) = pending.take() {
                write_row(&mut metrics, &prev)?;
            }
            metrics.flush()?;
            let dir = save_ckpt(
                format!("fault-ckpt-{:08}", s - 1),
                spec,
                &model,
                &adam,
                s - 1,
                tokens_seen,
                &samplers,
                Some(pre_states),
            )?;
            return Err(HarnessError::RunFault(format!(
                "{e}; diagnostic checkpoint at {}",
                dir.display()
            )));
        }

        if let (Some(rec), Some(before)) = (recorder.as_mut(), snapshot) {
            let mut delta = Vec::new();
            let mut per_matrix = Vec::new();
            for (p, b) in model.params().iter().zip(&before) {
                delta.extend(
                    p.data
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&aft, &bef)| (aft - bef) as f64),
                );
                if p.kind != ParamKind::NormGain {
                    let signed = max_weight_update(b, &p.data)
                        .map_err(|e| HarnessError::Model(e.to_string()))?;
                    let abs = max_abs_weight_update(b, &p.data)
                        .map_err(|e| HarnessError::Model(e.to_string()))?;
                    per_matrix.push((p.name.clone(), signed, abs));
                }
            }
            if let Some(f) = probe_matrix_file.as_mut() {
                for (name, signed, abs) in &per_matrix {
                    writeln!(f, "{s},{name},{signed},{abs}")?;
                }
            }
            rec.record_update(s, delta, per_matrix);
        }

        tokens_seen += rows as u64 * spec.seq_len as u64;
        final_train_loss = loss;

        let eval_due = s == spec.total_steps || (spec.eval_every > 0 && s % spec.eval_every == 0);
        let eval_vals = match (&eval_set, eval_due) {
            (Some(es), true) => {
                let v = evaluate(&model, es)?;
                final_eval = Some(v);
                Some(v)
            }
            _ => None,
        };

        if let Some(prev) = pending.take() {
            write_row(&mut metrics, &prev)?;
        }
        pending = Some(MetricsRowOut {
            step: s,
            lr,
            batch_tokens,
            train_loss: loss,
            eval: eval_vals,
            tokens_seen,
            probe: None,
        });

        if s == spec.total_steps || spec.checkpoint_steps.contains(&s) {
            let dir = save_ckpt(
                format!("ckpt-{s:08}"),
                spec,
                &model,
                &adam,
                s,
                tokens_seen,
                &samplers,
                None,
            )?;
            if s == spec.total_steps {
                final_ckpt = dir;
            }
        }
    }
    if let Some(prev) = pending.take() {
        write_row(&mut metrics, &prev)?;
    }
    metrics.flush()?;
    if let Some(f) = probe_matrix_file.as_mut() {
        f.flush()?;
    }

    let record = RunRecord {
        run_id,
        run_dir: run_dir.to_path_buf(),
        metrics_path,
        final_checkpoint: final_ckpt,
        steps: spec.total_steps,
        tokens_seen,
        final_train_loss: final_train_loss as f64,
        final_eval_loss: final_eval.map(|(a, _)| a),
        final_eval_loss_per_byte: final_eval.map(|(_, b)| b),
        source_draws: samplers.iter().map(|s| s.draws.clone()).collect(),
    };
    let mut f = fs::File::create(run_dir.join("run.json"))?;
    serde_json::to_writer_pretty(&mut f, &record).map_err(|e| HarnessError::Report(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(record)
}

/// Non-embedding parameter count for a spec, used by the scaling reports.
pub fn spec_param_count(spec: &ExperimentSpec) -> u64 {
    count_params(&spec.model_config())
}
