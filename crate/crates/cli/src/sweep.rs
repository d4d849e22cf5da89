//! Grid sweeps: Cartesian expansion of field overrides over a base spec,
//! executed as share-nothing runs with optional parallelism. Results are
//! identical to serial execution; failures are recorded and the sweep
//! continues.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentSpec, SweepCombo, SweepGrid};
use crate::run::{run_experiment, RunRecord};
use crate::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub index: usize,
    pub label: String,
    pub run_dir: PathBuf,
    pub status: String,
    #[serde(default)]
    pub record: Option<RunRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub entries: Vec<SweepEntry>,
    pub failures: usize,
}

pub fn expand_sweep(
    base: &ExperimentSpec,
    grid: &SweepGrid,
) -> Result<Vec<SweepCombo>, HarnessError> {
    grid.expand(base)
}

/// Run every combo under `out_root/run-XXX-label`, up to `parallelism`
/// concurrently.
pub fn run_sweep(
    base: &ExperimentSpec,
    grid: &SweepGrid,
    parallelism: usize,
    out_root: &Path,
) -> Result<SweepSummary, HarnessError> {
    let combos = expand_sweep(base, grid)?;
    std::fs::create_dir_all(out_root)?;
    let jobs: Vec<(usize, SweepCombo, PathBuf)> = combos
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut label = c.label();
            label.truncate(80);
            let dir = out_root.join(format!("run-{i:03}-{label}"));
            (i, c, dir)
        })
        .collect();

    let n = jobs.len();
    let results: Mutex<Vec<Option<SweepEntry>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    let workers = parallelism.clamp(1, n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let (idx, combo, dir) = &jobs[i];
                let entry = match run_experiment(&combo.spec, dir) {
                    Ok(record) => SweepEntry {
                        index: *idx,
                        label: combo.label(),
                        run_dir: dir.clone(),
                        status: "ok".to_string(),
                        record: Some(record),
                    },
                    Err(e) => SweepEntry {
                        index: *idx,
                        label: combo.label(),
                        run_dir: dir.clone(),
                        status: format!("error: {e}"),
                        record: None,
                    },
                };
                results.lock().unwrap()[i] = Some(entry);
            });
        }
    });

    let entries: Vec<SweepEntry> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|e| e.expect("every job produces an entry"))
        .collect();
    let failures = entries.iter().filter(|e| e.status != "ok").count();
    let summary = SweepSummary { entries, failures };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Report(e.to_string()))?;
    std::fs::write(out_root.join("sweep.json"), json + "\n")?;
    Ok(summary)
}
