//! Quantized checkpoint export: calibrate on real forward activations,
//! quantize every 2-D transformer matrix (embeddings and norm gains stay in
//! f32), and pack the results as manifest + nibble array + f32 scale/zero
//! blobs. Two ints per byte, low nibble first, two's-complement nibbles.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tinylab_core::model::{Model, ParamKind};
use tinylab_core::optim::AdamConfig;
use tinylab_core::quant::{
    dequantize, gptq_quantize, rtn_quantize, CalibrationSet, QuantizedMatrix,
};
use tinylab_core::{Graph, TensorData};

use crate::checkpoint::{load_checkpoint, restore_model};
use crate::config::SourceSpec;
use crate::corpus::{load_source, Tokenizer};
use crate::HarnessError;

pub const QUANT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    Rtn,
    Gptq,
}

impl std::str::FromStr for QuantMethod {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "rtn" => Ok(Self::Rtn),
            "gptq" => Ok(Self::Gptq),
            other => Err(HarnessError::Config(format!(
                "unknown quantization method '{other}' (rtn|gptq)"
            ))),
        }
    }
}

pub struct QuantizeOptions {
    pub group: usize,
    pub damping: f64,
    pub method: QuantMethod,
    pub calib: Option<PathBuf>,
    pub calib_sequences: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantTensorEntry {
    name: String,
    d_out: usize,
    d_in: usize,
    /// Byte offset into ints.bin.
    ints_offset: u64,
    /// Element offset into scales.f32 / zeros.f32.
    group_offset: u64,
    n_groups: u64,
    objective_gptq: Option<f64>,
    objective_rtn: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into unquantized.f32.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantManifest {
    format_version: u32,
    method: QuantMethod,
    group: usize,
    bits: u8,
    damping: f64,
    source_config_digest: String,
    tensors: Vec<QuantTensorEntry>,
    unquantized: Vec<RawTensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantSummary {
    pub tensors: usize,
    pub total_gptq_objective: f64,
    pub total_rtn_objective: f64,
    pub packed_bytes: u64,
}

/// Two ints per byte, low nibble first.
pub fn pack_nibbles(ints: &[i8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ints.len().div_ceil(2));
    for pair in ints.chunks(2) {
        let lo = (pair[0] as u8) & 0x0F;
        let hi = if pair.len() > 1 { (pair[1] as u8) & 0x0F } else { 0 };
        out.push(lo | (hi << 4));
    }
    out
}

pub fn unpack_nibbles(bytes: &[u8], n: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(n);
    for &b in bytes {
        // Sign-extend each 4-bit two's-complement nibble.
        out.push(((b & 0x0F) as i8) << 4 >> 4);
        if out.len() == n {
            break;
        }
        out.push(((b >> 4) as i8) << 4 >> 4);
        if out.len() == n {
            break;
        }
    }
    out
}

/// Activations feeding each matrix, captured from one forward pass over the
/// calibration batch.
fn calibration_taps(
    model: &Model,
    tokens: &[usize],
    rows: usize,
    chunk: usize,
) -> Result<Vec<Option<CalibrationSet>>, HarnessError> {
    let mut g: Graph<f32> = Graph::new();
    let fg = model.graph_forward(&mut g, tokens, rows, chunk, &model.param_values(), true)?;
    let mut out = Vec::with_capacity(model.params().len());
    for (i, p) in model.params().iter().enumerate() {
        if p.kind != ParamKind::Matrix {
            out.push(None);
            continue;
        }
        let d_in = p.data.shape()[0];
        let taps = g.matmul_input_values(fg.param_nodes[i]);
        if taps.is_empty() {
            return Err(HarnessError::Model(format!(
                "no activations captured for {}",
                p.name
            )));
        }
        let mut n_samples = 0usize;
        for t in &taps {
            n_samples += t.numel() / d_in;
        }
        // X is d_in x n_samples, column per activation row.
        let mut x = vec![0.0f64; d_in * n_samples];
        let mut col = 0usize;
        for t in &taps {
            let data = t.data();
            let rows_t = t.numel() / d_in;
            for r in 0..rows_t {
                for d in 0..d_in {
                    x[d * n_samples + col] = data[r * d_in + d] as f64;
                }
                col += 1;
            }
        }
        out.push(Some(CalibrationSet::new(d_in, n_samples, x)?));
    }
    Ok(out)
}

pub fn quantize_checkpoint(
    ckpt_dir: &Path,
    opts: &QuantizeOptions,
    out_dir: &Path,
) -> Result<QuantSummary, HarnessError> {
    let data = load_checkpoint(ckpt_dir)?;
    let spec = data.spec.clone();
    let (model, _) = restore_model(&data, AdamConfig::default())?;

    // Calibration batch: leading chunks of the calibration corpus (defaults
    // to the spec's eval corpus, then to the first stable source).
    let tokenizer = Tokenizer::load(&spec.corpus.tokenizer)?;
    let calib_src = match &opts.calib {
        Some(p) => SourceSpec {
            path: Some(p.clone()),
            synth_markov: None,
            weight: 1.0,
        },
        None => match &spec.eval {
            Some(e) => SourceSpec {
                path: e.path.clone(),
                synth_markov: e.synth_markov.clone(),
                weight: 1.0,
            },
            None => spec.corpus.stable[0].clone(),
        },
    };
    let corpus = load_source(&calib_src, &tokenizer)?;
    let chunk = spec.seq_len + 1;
    let rows = opts.calib_sequences.min(corpus.tokens.len() / chunk);
    if rows == 0 {
        return Err(HarnessError::Config(
            "calibration corpus smaller than one sequence".into(),
        ));
    }
    let tokens: Vec<usize> = corpus.tokens[..rows * chunk]
        .iter()
        .map(|&t| t as usize)
        .collect();

    let taps = match opts.method {
        QuantMethod::Gptq => calibration_taps(&model, &tokens, rows, chunk)?,
        QuantMethod::Rtn => vec![None; model.params().len()],
    };

    fs::create_dir_all(out_dir)?;
    let mut ints_bin: Vec<u8> = Vec::new();
    let mut scales: Vec<f32> = Vec::new();
    let mut zeros: Vec<f32> = Vec::new();
    let mut raw: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    let mut unquantized = Vec::new();
    let mut total_gptq = 0.0;
    let mut total_rtn = 0.0;

    for (i, p) in model.params().iter().enumerate() {
        if p.kind != ParamKind::Matrix {
            unquantized.push(RawTensorEntry {
                name: p.name.clone(),
                shape: p.data.shape().to_vec(),
                offset: raw.len() as u64,
                len: p.data.numel() as u64,
            });
            raw.extend_from_slice(p.data.data());
            continue;
        }
        let d_in = p.data.shape()[0];
        if d_in % opts.group != 0 {
            return Err(HarnessError::Config(format!(
                "group {} does not divide {} rows of {}",
                opts.group,
                d_in,
                p.name
            )));
        }
        // Quantize along the input dimension: transpose to d_out x d_in.
        let w_t = transpose_matrix(&p.data);
        let (qm, objectives) = match (&taps[i], opts.method) {
            (Some(calib), QuantMethod::Gptq) => {
                let (qm, rep) = gptq_quantize(&w_t, calib, opts.group, opts.damping)?;
                (qm, Some((rep.gptq_objective, rep.rtn_objective)))
            }
            _ => (rtn_quantize(&w_t, opts.group)?, None),
        };
        if let Some((g_obj, r_obj)) = objectives {
            total_gptq += g_obj;
            total_rtn += r_obj;
        }
        let entry = QuantTensorEntry {
            name: p.name.clone(),
            d_out: qm.d_out,
            d_in: qm.d_in,
            ints_offset: ints_bin.len() as u64,
            group_offset: scales.len() as u64,
            n_groups: qm.scales.len() as u64,
            objective_gptq: objectives.map(|(g, _)| g),
            objective_rtn: objectives.map(|(_, r)| r),
        };
        ints_bin.extend(pack_nibbles(&qm.ints));
        scales.extend(qm.scales.iter().map(|&s| s as f32));
        zeros.extend(qm.zeros.iter().map(|&z| z as f32));
        tensors.push(entry);
    }

    let manifest = QuantManifest {
        format_version: QUANT_FORMAT_VERSION,
        method: opts.method,
        group: opts.group,
        bits: 4,
        damping: opts.damping,
        source_config_digest: data.config_digest.clone(),
        tensors,
        unquantized,
    };
    let mut f = fs::File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| HarnessError::Report(e.to_string()))?;
    f.write_all(b"\n")?;
    let packed_bytes = ints_bin.len() as u64;
    fs::write(out_dir.join("ints.bin"), ints_bin)?;
    write_f32s(&out_dir.join("scales.f32"), &scales)?;
    write_f32s(&out_dir.join("zeros.f32"), &zeros)?;
    write_f32s(&out_dir.join("unquantized.f32"), &raw)?;

    Ok(QuantSummary {
        tensors: manifest.tensors.len(),
        total_gptq_objective: total_gptq,
        total_rtn_objective: total_rtn,
        packed_bytes,
    })
}

fn transpose_matrix(t: &TensorData<f32>) -> TensorData<f32> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    TensorData::new(vec![c, r], out)
}

fn write_f32s(path: &Path, vals: &[f32]) -> Result<(), HarnessError> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f32s(path: &Path) -> Result<Vec<f32>, HarnessError> {
    let raw = fs::read(path)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reconstruct every tensor of a quantized checkpoint: dequantized matrices
/// (transposed back to their graph orientation) plus the raw tensors.
pub fn load_quantized(dir: &Path) -> Result<Vec<(String, TensorData<f32>)>, HarnessError> {
    let manifest: QuantManifest = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?,
    )
    .map_err(|e| HarnessError::Config(format!("{}: bad manifest: {e}", dir.display())))?;
    let ints_bin = fs::read(dir.join("ints.bin"))?;
    let scales = read_f32s(&dir.join("scales.f32"))?;
    let zeros = read_f32s(&dir.join("zeros.f32"))?;
    let raw = read_f32s(&dir.join("unquantized.f32"))?;

    let mut out = Vec::new();
    for t in &manifest.tensors {
        let n = t.d_out * t.d_in;
        let packed = &ints_bin[t.ints_offset as usize..];
        let ints = unpack_nibbles(packed, n);
        let (go, ng) = (t.group_offset as usize, t.n_groups as usize);
        let qm = QuantizedMatrix {
            d_out: t.d_out,
            d_in: t.d_in,
            group: manifest.group,
            bits: manifest.bits,
            ints,
            scales: scales[go..go + ng].iter().map(|&s| s as f64).collect(),
            zeros: zeros[go..go + ng].iter().map(|&z| z as f64).collect(),
        };
        out.push((t.name.clone(), transpose_matrix(&dequantize(&qm))));
    }
    for t in &manifest.unquantized {
        let (o, l) = (t.offset as usize, t.len as usize);
        out.push((
            t.name.clone(),
            TensorData::new(t.shape.clone(), raw[o..o + l].to_vec()),
        ));
    }
    Ok(out)
}
