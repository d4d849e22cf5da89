//! Width-scaled decoder-only transformer.
//!
//! Construction follows the tensor-program scaling rules: matrix weights are
//! drawn with std `init_std / sqrt(d_m / d_base)`, the embedding output is
//! multiplied by `scale_emb`, every residual branch by `scale_depth /
//! sqrt(layers)`, and the logits by `d_base / d_m`. Matrix parameters also
//! carry a `d_base / d_m` learning-rate multiplier (see
//! [`Model::param_groups`]).
//!
//! Blocks are pre-norm with two RMS norms, grouped-query attention
//! (`n_q / n_kv` queries per key/value head), rotary positions, and a gated
//! silu FFN. No biases anywhere; input/output embeddings optionally shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Elem, Graph, NodeId, TensorData, TensorError};

pub const ROPE_BASE: f64 = 10000.0;
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width.
    pub d_m: usize,
    /// FFN bottleneck width.
    pub d_ff: usize,
    /// Attention head dimension.
    pub d_h: usize,
    /// Query heads.
    pub n_q: usize,
    /// Key/value heads (grouped-query attention when < n_q).
    pub n_kv: usize,
    /// Transformer blocks.
    pub layers: usize,
    pub vocab: usize,
    /// Base width the scaling rules are anchored to.
    pub d_base: usize,
    pub scale_emb: f64,
    pub scale_depth: f64,
    pub init_std: f64,
    pub share_embedding: bool,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    pub seed: u64,
}

fn default_max_seq() -> usize {
    512
}

impl ModelConfig {
    /// Search-optimal constants: scale_depth 1.4, scale_emb 12, init_std 0.1.
    pub fn with_tuned_constants(
        d_m: usize,
        d_ff: usize,
        d_h: usize,
        n_q: usize,
        n_kv: usize,
        layers: usize,
        vocab: usize,
        d_base: usize,
        seed: u64,
    ) -> Self {
        Self {
            d_m,
            d_ff,
            d_h,
            n_q,
            n_kv,
            layers,
            vocab,
            d_base,
            scale_emb: 12.0,
            scale_depth: 1.4,
            init_std: 0.1,
            share_embedding: true,
            max_seq: default_max_seq(),
            seed,
        }
    }

    /// Standard-parameterization control: width ratio pinned to 1, no
    /// embedding scaling, residual multiplier 1.
    pub fn without_width_scaling(mut self) -> Self {
        self.d_base = self.d_m;
        self.scale_emb = 1.0;
        self.scale_depth = (self.layers as f64).sqrt();
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_m == 0
            || self.d_ff == 0
            || self.d_h == 0
            || self.n_q == 0
            || self.n_kv == 0
            || self.layers == 0
            || self.vocab == 0
            || self.d_base == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if self.n_q * self.d_h != self.d_m {
            return bad(format!(
                "n_q * d_h must equal d_m: {} * {} != {}",
                self.n_q, self.d_h, self.d_m
            ));
        }
        if self.n_q % self.n_kv != 0 {
            return bad(format!(
                "n_q must be a multiple of n_kv: {} % {} != 0",
                self.n_q, self.n_kv
            ));
        }
        if self.d_base > self.d_m {
            return bad(format!("d_base {} exceeds d_m {}", self.d_base, self.d_m));
        }
        if self.d_h % 2 != 0 {
            return bad(format!("d_h must be even for rotary positions, got {}", self.d_h));
        }
        Ok(())
    }

    /// Width ratio d_m / d_base that drives init, LR, and logit scaling.
    pub fn width_ratio(&self) -> f64 {
        self.d_m as f64 / self.d_base as f64
    }

    pub fn matrix_init_std(&self) -> f64 {
        self.init_std / self.width_ratio().sqrt()
    }

    pub fn residual_scale(&self) -> f64 {
        self.scale_depth / (self.layers as f64).sqrt()
    }

    pub fn logit_multiplier(&self) -> f64 {
        1.0 / self.width_ratio()
    }

    pub fn matrix_lr_multiplier(&self) -> f64 {
        1.0 / self.width_ratio()
    }
}

/// Non-embedding scalar count: attention + gated FFN matrices plus the norm
/// gains, layer by layer, plus the final norm.
pub fn count_params(config: &ModelConfig) -> u64 {
    let d_m = config.d_m as u64;
    let d_ff = config.d_ff as u64;
    let d_h = config.d_h as u64;
    let n_q = config.n_q as u64;
    let n_kv = config.n_kv as u64;
    let layers = config.layers as u64;
    let per_layer = d_m * n_q * d_h      // W_q
        + 2 * d_m * n_kv * d_h           // W_k, W_v
        + n_q * d_h * d_m                // W_o
        + 3 * d_m * d_ff                 // W_gate, W_up, W_down
        + 2 * d_m; // two norm gains
    layers * per_layer + d_m // final norm gain
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// 2-D weight, scaled init and scaled learning rate.
    Matrix,
    /// Embedding-like table: plain init, unit learning-rate multiplier.
    Embedding,
    /// RMS norm gain: ones init, unit multiplier, no weight decay.
    NormGain,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub data: TensorData<f32>,
}

/// A built model: parameters in a fixed registration order (embedding first,
/// then per-layer weights, final norm, optional LM head).
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
}

/// Handles into a forward graph, for reading activations and gradients.
pub struct ForwardGraph {
    pub loss: NodeId,
    pub logits: NodeId,
    /// Leaf node per parameter, registration order.
    pub param_nodes: Vec<NodeId>,
    /// Residual stream after each block.
    pub block_outputs: Vec<NodeId>,
    /// Embedding output after the scale_emb multiply.
    pub embed_scaled: NodeId,
}

pub struct ForwardOutput {
    pub logits: TensorData<f32>,
    pub loss: f32,
}

fn shapes_for(config: &ModelConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
    let d = config.d_m;
    let mut v = Vec::new();
    v.push((
        "embed".to_string(),
        ParamKind::Embedding,
        vec![config.vocab, d],
    ));
    for l in 0..config.layers {
        let p = |name: &str| format!("layer{l}.{name}");
        v.push((p("attn_norm"), ParamKind::NormGain, vec![d]));
        v.push((p("wq"), ParamKind::Matrix, vec![d, config.n_q * config.d_h]));
        v.push((p("wk"), ParamKind::Matrix, vec![d, config.n_kv * config.d_h]));
        v.push((p("wv"), ParamKind::Matrix, vec![d, config.n_kv * config.d_h]));
        v.push((p("wo"), ParamKind::Matrix, vec![config.n_q * config.d_h, d]));
        v.push((p("ffn_norm"), ParamKind::NormGain, vec![d]));
        v.push((p("w_gate"), ParamKind::Matrix, vec![d, config.d_ff]));
        v.push((p("w_up"), ParamKind::Matrix, vec![d, config.d_ff]));
        v.push((p("w_down"), ParamKind::Matrix, vec![config.d_ff, d]));
    }
    v.push(("final_norm".to_string(), ParamKind::NormGain, vec![d]));
    if !config.share_embedding {
        v.push((
            "lm_head".to_string(),
            ParamKind::Embedding,
            vec![d, config.vocab],
        ));
    }
    v
}

/// Initialize a model from its config; deterministic for a fixed seed.
pub fn build_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let matrix_std = config.matrix_init_std();
    let embed_std = config.init_std;
    let mut params = Vec::new();
    for (name, kind, shape) in shapes_for(config) {
        let n: usize = shape.iter().product();
        let data = match kind {
            ParamKind::NormGain => vec![1.0f32; n],
            ParamKind::Matrix | ParamKind::Embedding => {
                let std = if kind == ParamKind::Matrix {
                    matrix_std
                } else {
                    embed_std
                };
                let dist = Normal::new(0.0f64, std).map_err(|e| {
                    ModelError::InvalidConfig(format!("bad init std {std}: {e}"))
                })?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
        };
        params.push(Param {
            name,
            kind,
            data: TensorData::new(shape, data),
        });
    }
    Ok(Model {
        config: *config,
        params,
    })
}

impl Model {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total scalars excluding embedding-like tables.
    pub fn non_embedding_scalars(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Embedding)
            .map(|p| p.data.numel() as u64)
            .sum()
    }

    pub fn total_scalars(&self) -> u64 {
        self.params.iter().map(|p| p.data.numel() as u64).sum()
    }

    /// (name, lr multiplier) per parameter: matrices get d_base/d_m, norm
    /// gains and embedding-like tables get 1.
    pub fn param_groups(&self) -> Vec<(&str, f64)> {
        let mult = self.config.matrix_lr_multiplier();
        self.params
            .iter()
            .map(|p| {
                let m = match p.kind {
                    ParamKind::Matrix => mult,
                    ParamKind::Embedding | ParamKind::NormGain => 1.0,
                };
                (p.name.as_str(), m)
            })
            .collect()
    }

    /// Convenience forward over the model's own f32 weights.
    pub fn forward(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<ForwardOutput, ModelError> {
        let mut g: Graph<f32> = Graph::new();
        let values: Vec<TensorData<f32>> = self.params.iter().map(|p| p.data.clone()).collect();
        let fg = self.graph_forward(&mut g, tokens, batch, seq, &values, false)?;
        Ok(ForwardOutput {
            logits: g.value(fg.logits).clone(),
            loss: g.value(fg.loss).data()[0],
        })
    }

    /// Build the full forward + loss graph from supplied parameter values
    /// (one tensor per parameter, registration order). Leaves are marked
    /// `requires_grad` unless `frozen`.
    pub fn graph_forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        values: &[TensorData<E>],
        frozen: bool,
    ) -> Result<ForwardGraph, ModelError> {
        let cfg = &self.config;
        if tokens.len() != batch * seq {
            return Err(ModelError::InvalidInput(format!(
                "{} tokens for batch {batch} x seq {seq}",
                tokens.len()
            )));
        }
        if seq < 2 {
            return Err(ModelError::InvalidInput(
                "need seq >= 2 for next-token loss".into(),
            ));
        }
        if seq > cfg.max_seq {
            return Err(ModelError::InvalidInput(format!(
                "seq {seq} exceeds max context {}",
                cfg.max_seq
            )));
        }
        if values.len() != self.params.len() {
            return Err(ModelError::InvalidInput(format!(
                "{} parameter tensors supplied, model has {}",
                values.len(),
                self.params.len()
            )));
        }

        let param_nodes: Vec<NodeId> = values
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                debug_assert_eq!(v.shape(), p.data.shape(), "{}", p.name);
                g.leaf(v.clone(), !frozen)
            })
            .collect();
        let node_of = |name: &str| -> NodeId {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("unknown param {name}"));
            param_nodes[idx]
        };

        let (d, dh, nq, nkv) = (cfg.d_m, cfg.d_h, cfg.n_q, cfg.n_kv);
        let res_scale = cfg.residual_scale();

        let embed = node_of("embed");
        let gathered = g.embed_gather(embed, tokens, &[batch, seq])?;
        let embed_scaled = g.scale(gathered, cfg.scale_emb);
        let mut x = embed_scaled;

        let mut block_outputs = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |name: &str| format!("layer{l}.{name}");
            // Attention branch.
            let h = g.rms_norm(x, node_of(&p("attn_norm")), RMS_EPS)?;
            let q = g.matmul(h, node_of(&p("wq")))?;
            let k = g.matmul(h, node_of(&p("wk")))?;
            let v = g.matmul(h, node_of(&p("wv")))?;
            let q = g.reshape(q, &[batch, seq, nq, dh])?;
            let q = g.transpose(q, &[0, 2, 1, 3])?;
            let q = g.rope(q, ROPE_BASE)?;
            let k = g.reshape(k, &[batch, seq, nkv, dh])?;
            let k = g.transpose(k, &[0, 2, 1, 3])?;
            let k = g.rope(k, ROPE_BASE)?;
            let v = g.reshape(v, &[batch, seq, nkv, dh])?;
            let v = g.transpose(v, &[0, 2, 1, 3])?;
            let k_t = g.transpose(k, &[0, 1, 3, 2])?;
            let scores = g.matmul(q, k_t)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = g.causal_softmax(scores)?;
            let ctx = g.matmul(probs, v)?;
            let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[batch, seq, d])?;
            let att = g.matmul(ctx, node_of(&p("wo")))?;
            let att = g.scale(att, res_scale);
            x = g.add(x, att)?;

            // Gated FFN branch.
            let h2 = g.rms_norm(x, node_of(&p("ffn_norm")), RMS_EPS)?;
            let gate = g.matmul(h2, node_of(&p("w_gate")))?;
            let gate = g.silu(gate);
            let up = g.matmul(h2, node_of(&p("w_up")))?;
            let gated = g.mul(gate, up)?;
            let ff = g.matmul(gated, node_of(&p("w_down")))?;
            let ff = g.scale(ff, res_scale);
            x = g.add(x, ff)?;
            block_outputs.push(x);
        }

        let xn = g.rms_norm(x, node_of("final_norm"), RMS_EPS)?;
        let raw_logits = if cfg.share_embedding {
            let head = g.transpose(embed, &[1, 0])?;
            g.matmul(xn, head)?
        } else {
            g.matmul(xn, node_of("lm_head"))?
        };
        let logits = g.scale(raw_logits, cfg.logit_multiplier());

        // Next-token loss: positions 0..seq-1 predict tokens 1..seq.
        let pred = g.slice(logits, 1, 0, seq - 1)?;
        let pred = g.reshape(pred, &[batch * (seq - 1), cfg.vocab])?;
        let mut targets = Vec::with_capacity(batch * (seq - 1));
        for b in 0..batch {
            targets.extend_from_slice(&tokens[b * seq + 1..(b + 1) * seq]);
        }
        let loss = g.softmax_cross_entropy(pred, &targets)?;

        Ok(ForwardGraph {
            loss,
            logits,
            param_nodes,
            block_outputs,
            embed_scaled,
        })
    }

    /// f32 parameter snapshots in registration order (cloned).
    pub fn param_values(&self) -> Vec<TensorData<f32>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }
}
