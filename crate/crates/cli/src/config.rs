//! Experiment configuration: a declarative TOML document that fully
//! determines a run. The resolved spec is echoed into every run directory
//! and hashed; the digest keys checkpoints to their producing config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tinylab_core::model::ModelConfig;
use tinylab_core::optim::AdamConfig;
use tinylab_core::schedule::{BatchRamp, ScheduleKind, ScheduleSpec};

use crate::HarnessError;

/// Model section: [`ModelConfig`] minus the seed (the experiment seed feeds
/// both init and data sampling).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_m: usize,
    pub d_ff: usize,
    pub d_h: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub layers: usize,
    pub vocab: usize,
    pub d_base: usize,
    #[serde(default = "default_scale_emb")]
    pub scale_emb: f64,
    #[serde(default = "default_scale_depth")]
    pub scale_depth: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_true")]
    pub share_embedding: bool,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

fn default_scale_emb() -> f64 {
    12.0
}
fn default_scale_depth() -> f64 {
    1.4
}
fn default_init_std() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_max_seq() -> usize {
    512
}

impl ModelSection {
    pub fn to_model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            d_m: self.d_m,
            d_ff: self.d_ff,
            d_h: self.d_h,
            n_q: self.n_q,
            n_kv: self.n_kv,
            layers: self.layers,
            vocab: self.vocab,
            d_base: self.d_base,
            scale_emb: self.scale_emb,
            scale_depth: self.scale_depth,
            init_std: self.init_std,
            share_embedding: self.share_embedding,
            max_seq: self.max_seq,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub eta: f64,
    pub warmup: u64,
    /// Stable end for WSD; the period for the cosine kinds.
    pub stable_end: u64,
    pub total: u64,
    /// Exponential-decay half-life in steps; defaults to 10% of stable_end.
    #[serde(default)]
    pub half_life: Option<u64>,
    #[serde(default = "default_floor_frac")]
    pub floor_frac: f64,
}

fn default_floor_frac() -> f64 {
    0.1
}

impl ScheduleSection {
    pub fn resolved_half_life(&self) -> u64 {
        self.half_life.unwrap_or((self.stable_end / 10).max(1))
    }

    pub fn to_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            eta: self.eta,
            warmup_end: self.warmup,
            stable_end: self.stable_end,
            total: self.total,
            half_life: self.resolved_half_life(),
            floor_frac: self.floor_frac,
        }
    }
}

/// A corpus source: a file path (raw bytes or an ingested directory), or a
/// deterministic synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth_markov: Option<MarkovSpec>,
    pub weight: f64,
}

/// Seeded order-2 Markov byte generator over a lowercase alphabet. `seed`
/// fixes the transition table; `part` selects an independent sample path
/// from it (use distinct parts for train vs eval splits).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub seed: u64,
    pub bytes: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: usize,
    #[serde(default)]
    pub part: u64,
}

fn default_alphabet() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// "byte" or a path to a trained tokenizer file.
    #[serde(default = "default_tokenizer")]
    pub tokenizer: String,
    pub stable: Vec<SourceSpec>,
    #[serde(default)]
    pub decay: Vec<SourceSpec>,
    #[serde(default)]
    pub sft: Vec<SourceSpec>,
}

fn default_tokenizer() -> String {
    "byte".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth_markov: Option<MarkovSpec>,
    #[serde(default = "default_eval_tokens")]
    pub tokens: usize,
}

fn default_eval_tokens() -> usize {
    16384
}

/// Optional post-decay stage with its own constant learning rate and data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub steps: u64,
    /// Constant stage learning rate; align it with the end-of-decay value.
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.1
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            clip_norm: default_clip(),
        }
    }
}

impl OptimizerSection {
    pub fn to_adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// The full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub total_steps: u64,
    pub seq_len: usize,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub probe_cadence: u64,
    #[serde(default)]
    pub probe_allow_large: bool,
    #[serde(default)]
    pub checkpoint_steps: Vec<u64>,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    #[serde(default = "default_batch")]
    pub batch: BatchSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub sft: Option<SftSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    /// (start step, tokens per step) segments.
    pub segments: Vec<(u64, u64)>,
}

fn default_batch() -> BatchSection {
    BatchSection {
        segments: vec![(1, 256)],
    }
}

impl BatchSection {
    pub fn to_ramp(&self) -> BatchRamp {
        BatchRamp {
            segments: self.segments.clone(),
        }
    }
}

/// Probe runs hold two flattened gradient copies; cap the parameter count
/// unless the spec explicitly opts in.
pub const PROBE_PARAM_LIMIT: u64 = 10_000_000;

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(format!("parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    /// sha256 of the canonical TOML echo.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config(self.seed)
    }

    /// Stage boundaries: stable for s <= stable_end, decay for
    /// stable_end < s <= schedule total, sft beyond.
    pub fn stage_of(&self, step: u64) -> Stage {
        if step <= self.schedule.stable_end {
            Stage::Stable
        } else if step <= self.schedule.total {
            Stage::Decay
        } else {
            Stage::Sft
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, HarnessError> {
        if step <= self.schedule.total {
            Ok(self.schedule.to_spec().lr_at(step)?)
        } else {
            let sft = self
                .sft
                .as_ref()
                .ok_or_else(|| HarnessError::Config("steps beyond schedule need [sft]".into()))?;
            Ok(sft.lr)
        }
    }

    pub fn sources_for(&self, stage: Stage) -> &[SourceSpec] {
        match stage {
            Stage::Stable => &self.corpus.stable,
            Stage::Decay => {
                if self.corpus.decay.is_empty() {
                    &self.corpus.stable
                } else {
                    &self.corpus.decay
                }
            }
            Stage::Sft => {
                if self.corpus.sft.is_empty() {
                    if self.corpus.decay.is_empty() {
                        &self.corpus.stable
                    } else {
                        &self.corpus.decay
                    }
                } else {
                    &self.corpus.sft
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = self.model_config();
        cfg.validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let sched = self.schedule.to_spec();
        sched
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let ramp = self.batch.to_ramp();
        ramp.validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.seq_len < 2 || self.seq_len > self.model.max_seq {
            return Err(HarnessError::Config(format!(
                "seq_len {} outside [2, max_seq {}]",
                self.seq_len, self.model.max_seq
            )));
        }
        for &(_, tokens) in &self.batch.segments {
            if tokens % self.seq_len as u64 != 0 {
                return Err(HarnessError::Config(format!(
                    "batch tokens {tokens} not a multiple of seq_len {}",
                    self.seq_len
                )));
            }
        }
        if self.total_steps == 0 {
            return Err(HarnessError::Config("total_steps must be positive".into()));
        }
        let sft_steps = self.sft.as_ref().map(|s| s.steps).unwrap_or(0);
        if self.total_steps > self.schedule.total + sft_steps {
            return Err(HarnessError::Config(format!(
                "total_steps {} exceeds schedule total {} plus sft steps {sft_steps}",
                self.total_steps, self.schedule.total
            )));
        }
        if self.corpus.stable.is_empty() {
            return Err(HarnessError::Config("corpus.stable has no sources".into()));
        }
        for (name, sources) in [
            ("stable", &self.corpus.stable),
            ("decay", &self.corpus.decay),
            ("sft", &self.corpus.sft),
        ] {
            if sources.is_empty() {
                continue;
            }
            let sum: f64 = sources.iter().map(|s| s.weight).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(HarnessError::Config(format!(
                    "corpus.{name} weights sum to {sum}, need 1"
                )));
            }
            for s in sources {
                validate_source(s)?;
            }
        }
        if let Some(eval) = &self.eval {
            if eval.path.is_none() && eval.synth_markov.is_none() {
                return Err(HarnessError::Config(
                    "eval needs a path or synth_markov".into(),
                ));
            }
            if let Some(p) = &eval.path {
                if !p.exists() {
                    return Err(HarnessError::Config(format!(
                        "eval corpus {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.probe_cadence > 0 && !self.probe_allow_large {
            let total = cfg.vocab as u64 * cfg.d_m as u64 + tinylab_core::model::count_params(&cfg);
            if total > PROBE_PARAM_LIMIT {
                return Err(HarnessError::Config(format!(
                    "probes need two flattened gradient copies; {total} params exceed {PROBE_PARAM_LIMIT} (set probe_allow_large = true to override)"
                )));
            }
        }
        Ok(())
    }
}

fn validate_source(s: &SourceSpec) -> Result<(), HarnessError> {
    match (&s.path, &s.synth_markov) {
        (Some(_), Some(_)) => Err(HarnessError::Config(
            "source has both path and synth_markov".into(),
        )),
        (None, None) => Err(HarnessError::Config(
            "source needs a path or synth_markov".into(),
        )),
        (Some(p), None) => {
            if p.exists() {
                Ok(())
            } else {
                Err(HarnessError::Config(format!(
                    "corpus path {} does not exist",
                    p.display()
                )))
            }
        }
        (None, Some(m)) => {
            if m.bytes == 0 || m.alphabet == 0 || m.alphabet > 26 {
                Err(HarnessError::Config(
                    "synth_markov needs bytes > 0 and alphabet in 1..=26".into(),
                ))
            } else {
                Ok(())
            }
        }
    }
}

/// Sweep grid: dotted TOML path -> list of values, applied to a base spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("grid parse error: {e}")))
    }

    /// Cartesian product in key order; each combo is (assignments, spec).
    pub fn expand(&self, base: &ExperimentSpec) -> Result<Vec<SweepCombo>, HarnessError> {
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![vec![]];
        for (key, values) in &self.grid {
            if values.is_empty() {
                return Err(HarnessError::Config(format!("grid key {key} has no values")));
            }
            let mut next = Vec::with_capacity(combos.len() * values.len());
            for combo in &combos {
                for v in values {
                    let mut c = combo.clone();
                    c.push((key.clone(), v.clone()));
                    next.push(c);
                }
            }
            combos = next;
        }
        let base_value = toml::Value::try_from(base)
            .map_err(|e| HarnessError::Config(format!("base spec: {e}")))?;
        combos
            .into_iter()
            .map(|assignments| {
                let mut v = base_value.clone();
                for (path, value) in &assignments {
                    set_toml_path(&mut v, path, value.clone())?;
                }
                let spec: ExperimentSpec = v
                    .try_into()
                    .map_err(|e| HarnessError::Config(format!("combo spec: {e}")))?;
                Ok(SweepCombo { assignments, spec })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SweepCombo {
    pub assignments: Vec<(String, toml::Value)>,
    pub spec: ExperimentSpec,
}

impl SweepCombo {
    /// Filesystem-safe label like `schedule.eta=0.01,seed=3`.
    pub fn label(&self) -> String {
        self.assignments
            .iter()
            .map(|(k, v)| {
                let vs = match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                let vs: String = vs
                    .chars()
                    .map(|c| if c.is_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                    .collect();
                format!("{k}={vs}")
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn set_toml_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("grid path {path}: {part} is not a table"))
        })?;
        if i == parts.len() - 1 {
            if !table.contains_key(*part) {
                return Err(HarnessError::Config(format!(
                    "grid path {path}: unknown field {part}"
                )));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.get_mut(*part).ok_or_else(|| {
            HarnessError::Config(format!("grid path {path}: missing segment {part}"))
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stable,
    Decay,
    Sft,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::Stable => 0,
            Stage::Decay => 1,
            Stage::Sft => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stable => "stable",
            Stage::Decay => "decay",
            Stage::Sft => "sft",
        }
    }
}
