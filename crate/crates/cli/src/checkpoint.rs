//! Versioned checkpoints: a JSON manifest plus raw little-endian f32 blobs
//! (weights and both Adam moments, in parameter registration order), the
//! full spec echo, and every sampler's position. Restoring one reproduces
//! the uninterrupted run bit-exactly. Checkpoint directories are write-once.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use tinylab_core::model::{build_model, Model};
use tinylab_core::optim::{AdamConfig, AdamState};

use crate::config::ExperimentSpec;
use crate::corpus::SamplerState;
use crate::HarnessError;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    tokens_seen: u64,
    config_digest: String,
    adam_step: u64,
    samplers: Vec<SamplerState>,
    source_draws: Vec<Vec<u64>>,
    tensors: Vec<TensorEntry>,
}

pub struct CheckpointData {
    pub step: u64,
    pub tokens_seen: u64,
    pub config_digest: String,
    pub spec: ExperimentSpec,
    pub weights: Vec<Vec<f32>>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    pub samplers: Vec<SamplerState>,
    pub source_draws: Vec<Vec<u64>>,
    pub tensor_names: Vec<String>,
    pub tensor_shapes: Vec<Vec<usize>>,
}

fn write_f32_blob(path: &Path, tensors: &[&[f32]]) -> Result<(), HarnessError> {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(total * 4);
    for t in tensors {
        for &v in *t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f32_blob(path: &Path) -> Result<Vec<f32>, HarnessError> {
    let raw = fs::read(path)?;
    if raw.len() % 4 != 0 {
        return Err(HarnessError::Config(format!(
            "{} is not an f32 array",
            path.display()
        )));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    spec: &ExperimentSpec,
    model: &Model,
    adam: &AdamState,
    step: u64,
    tokens_seen: u64,
    samplers: Vec<SamplerState>,
    source_draws: Vec<Vec<u64>>,
) -> Result<(), HarnessError> {
    if dir.exists() {
        return Err(HarnessError::RunFault(format!(
            "checkpoint dir {} already exists (write-once)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;

    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for p in model.params() {
        let len = p.data.numel() as u64;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.data.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let weight_slices: Vec<&[f32]> = model.params().iter().map(|p| p.data.data()).collect();
    write_f32_blob(&dir.join("weights.f32"), &weight_slices)?;
    let m_slices: Vec<&[f32]> = adam.m.iter().map(|v| v.as_slice()).collect();
    write_f32_blob(&dir.join("adam_m.f32"), &m_slices)?;
    let v_slices: Vec<&[f32]> = adam.v.iter().map(|v| v.as_slice()).collect();
    write_f32_blob(&dir.join("adam_v.f32"), &v_slices)?;

    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        tokens_seen,
        config_digest: spec.digest(),
        adam_step: adam.step,
        samplers,
        source_draws,
        tensors,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| HarnessError::Report(e.to_string()))?;
    f.write_all(b"\n")?;
    fs::write(dir.join("spec.toml"), spec.to_toml())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointData, HarnessError> {
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?,
    )
    .map_err(|e| HarnessError::Config(format!("{}: bad manifest: {e}", dir.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(HarnessError::Config(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let spec = ExperimentSpec::from_toml(
        &fs::read_to_string(dir.join("spec.toml"))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?,
    )?;
    if spec.digest() != manifest.config_digest {
        return Err(HarnessError::Config(format!(
            "{}: spec echo does not match config digest",
            dir.display()
        )));
    }

    let split = |blob: Vec<f32>| -> Result<Vec<Vec<f32>>, HarnessError> {
        let mut out = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let (start, end) = (t.offset as usize, (t.offset + t.len) as usize);
            if end > blob.len() {
                return Err(HarnessError::Config(format!(
                    "{}: blob truncated at tensor {}",
                    dir.display(),
                    t.name
                )));
            }
            out.push(blob[start..end].to_vec());
        }
        Ok(out)
    };
    let weights = split(read_f32_blob(&dir.join("weights.f32"))?)?;
    let adam_m = split(read_f32_blob(&dir.join("adam_m.f32"))?)?;
    let adam_v = split(read_f32_blob(&dir.join("adam_v.f32"))?)?;

    Ok(CheckpointData {
        step: manifest.step,
        tokens_seen: manifest.tokens_seen,
        config_digest: manifest.config_digest,
        spec,
        weights,
        adam_step: manifest.adam_step,
        adam_m,
        adam_v,
        samplers: manifest.samplers,
        source_draws: manifest.source_draws,
        tensor_names: manifest.tensors.iter().map(|t| t.name.clone()).collect(),
        tensor_shapes: manifest.tensors.iter().map(|t| t.shape.clone()).collect(),
    })
}

/// Rebuild a model + optimizer from checkpoint data, validating layout.
pub fn restore_model(
    data: &CheckpointData,
    adam_config: AdamConfig,
) -> Result<(Model, AdamState), HarnessError> {
    let cfg = data.spec.model_config();
    let mut model = build_model(&cfg)?;
    if model.params().len() != data.weights.len() {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} tensors, model wants {}",
            data.weights.len(),
            model.params().len()
        )));
    }
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if p.name != data.tensor_names[i] || p.data.shape() != data.tensor_shapes[i].as_slice() {
            return Err(HarnessError::Config(format!(
                "tensor {i} mismatch: {} vs {}",
                p.name, data.tensor_names[i]
            )));
        }
        p.data.data_mut().copy_from_slice(&data.weights[i]);
    }
    let mut adam = AdamState::new(adam_config, &model);
    adam.step = data.adam_step;
    for (dst, src) in adam.m.iter_mut().zip(&data.adam_m) {
        dst.copy_from_slice(src);
    }
    for (dst, src) in adam.v.iter_mut().zip(&data.adam_v) {
        dst.copy_from_slice(src);
    }
    Ok((model, adam))
}
