//! 4-bit group quantization: round-to-nearest baseline and a calibrated
//! variant that redistributes per-column quantization error to the not-yet
//! quantized columns via the inverse calibration Hessian (H = 2 X X^T + damp).
//!
//! Per group of G consecutive inputs: scale = (max - min) / 15,
//! zero = -min/scale - 8, int = clamp(round(w/scale + zero), -8, 7),
//! dequant = scale * (int - zero). Zero-range groups get an epsilon scale so
//! constant groups survive the round trip.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorData;

pub const QUANT_BITS: u8 = 4;
pub const QMIN: i8 = -8;
pub const QMAX: i8 = 7;
/// Scale floor for zero-range groups.
pub const SCALE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("calibration Hessian not positive definite even after damping {damping}; try a larger damping")]
    SingularHessian { damping: f64 },
}

/// Int4 weights plus per-group scale/zero. `ints` is row-major
/// `d_out x d_in`; group g of row r covers columns `g*G .. (g+1)*G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub d_out: usize,
    pub d_in: usize,
    pub group: usize,
    pub bits: u8,
    pub ints: Vec<i8>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
}

impl QuantizedMatrix {
    pub fn groups_per_row(&self) -> usize {
        self.d_in / self.group
    }

    pub fn dequant_at(&self, row: usize, col: usize) -> f64 {
        let g = row * self.groups_per_row() + col / self.group;
        self.scales[g] * (self.ints[row * self.d_in + col] as f64 - self.zeros[g])
    }
}

/// Quantize one group of values; returns (ints, scale, zero).
pub fn quantize_group(w: &[f64]) -> Result<(Vec<i8>, f64, f64), QuantError> {
    if w.is_empty() {
        return Err(QuantError::Shape("empty group".into()));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite("group contains NaN/Inf".into()));
    }
    let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let levels = ((1u32 << QUANT_BITS) - 1) as f64; // 15
    let scale = ((max - min) / levels).max(SCALE_EPS);
    let zero = -min / scale - 8.0;
    let ints = w
        .iter()
        .map(|&v| {
            let q = (v / scale + zero).round();
            q.clamp(QMIN as f64, QMAX as f64) as i8
        })
        .collect();
    Ok((ints, scale, zero))
}

pub fn dequantize_value(int: i8, scale: f64, zero: f64) -> f64 {
    scale * (int as f64 - zero)
}

/// Round-to-nearest group quantization of a full `d_out x d_in` matrix.
pub fn rtn_quantize(w: &TensorData<f32>, group: usize) -> Result<QuantizedMatrix, QuantError> {
    let (d_out, d_in) = matrix_dims(w)?;
    check_group(d_in, group)?;
    let mut ints = vec![0i8; d_out * d_in];
    let gpr = d_in / group;
    let mut scales = vec![0.0f64; d_out * gpr];
    let mut zeros = vec![0.0f64; d_out * gpr];
    for r in 0..d_out {
        let row: Vec<f64> = w.data()[r * d_in..(r + 1) * d_in]
            .iter()
            .map(|&v| v as f64)
            .collect();
        for g in 0..gpr {
            let (q, scale, zero) = quantize_group(&row[g * group..(g + 1) * group])?;
            ints[r * d_in + g * group..r * d_in + (g + 1) * group].copy_from_slice(&q);
            scales[r * gpr + g] = scale;
            zeros[r * gpr + g] = zero;
        }
    }
    Ok(QuantizedMatrix {
        d_out,
        d_in,
        group,
        bits: QUANT_BITS,
        ints,
        scales,
        zeros,
    })
}

/// Reconstruct the f32 matrix.
pub fn dequantize(q: &QuantizedMatrix) -> TensorData<f32> {
    let mut data = vec![0.0f32; q.d_out * q.d_in];
    for r in 0..q.d_out {
        for c in 0..q.d_in {
            data[r * q.d_in + c] = q.dequant_at(r, c) as f32;
        }
    }
    TensorData::new(vec![q.d_out, q.d_in], data)
}

/// Calibration activations: `d_in x n_samples`, column per sample.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub d_in: usize,
    pub n_samples: usize,
    /// Row-major d_in x n_samples.
    pub x: Vec<f64>,
    pub provenance: String,
}

impl CalibrationSet {
    pub fn new(d_in: usize, n_samples: usize, x: Vec<f64>) -> Result<Self, QuantError> {
        if n_samples == 0 || x.len() != d_in * n_samples {
            return Err(QuantError::Shape(format!(
                "{} values for {d_in} x {n_samples}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite("calibration data".into()));
        }
        Ok(Self {
            d_in,
            n_samples,
            x,
            provenance: String::new(),
        })
    }
}

/// Frobenius objectives ||W X - What X||_F^2 for both methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub gptq_objective: f64,
    pub rtn_objective: f64,
}

fn matrix_dims(w: &TensorData<f32>) -> Result<(usize, usize), QuantError> {
    let s = w.shape();
    if s.len() != 2 {
        return Err(QuantError::Shape(format!("need a 2-d matrix, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn check_group(d_in: usize, group: usize) -> Result<(), QuantError> {
    if group == 0 || d_in % group != 0 {
        return Err(QuantError::Shape(format!(
            "group {group} must divide d_in {d_in}"
        )));
    }
    Ok(())
}

fn objective(w: &[f64], what: &[f64], d_out: usize, d_in: usize, calib: &CalibrationSet) -> f64 {
    // ||(W - What) X||_F^2
    let n = calib.n_samples;
    let mut total = 0.0;
    for r in 0..d_out {
        for s in 0..n {
            let mut acc = 0.0;
            for c in 0..d_in {
                acc += (w[r * d_in + c] - what[r * d_in + c]) * calib.x[c * n + s];
            }
            total += acc * acc;
        }
    }
    total
}

/// Column-sequential quantization with error compensation.
///
/// H = 2 X X^T + lambda I with lambda = damping * mean(diag(2 X X^T)). After
/// quantizing column q, the remaining columns move by
/// `-(w_q - dequant(quant(w_q))) / [H_F^-1]_qq * (H_F^-1)_{:,q}`, realized
/// through the Cholesky factor of H^-1. Group scale/zero are computed from
/// the current (already compensated) weights when the group starts.
pub fn gptq_quantize(
    w: &TensorData<f32>,
    calib: &CalibrationSet,
    group: usize,
    damping: f64,
) -> Result<(QuantizedMatrix, QuantReport), QuantError> {
    let (d_out, d_in) = matrix_dims(w)?;
    check_group(d_in, group)?;
    if calib.d_in != d_in {
        return Err(QuantError::Shape(format!(
            "calibration d_in {} vs matrix d_in {}",
            calib.d_in, d_in
        )));
    }
    if !(damping >= 0.0) {
        return Err(QuantError::Shape(format!("damping must be >= 0, got {damping}")));
    }
    if !w.all_finite() {
        return Err(QuantError::NonFinite("weight matrix".into()));
    }

    let n = calib.n_samples;
    // H = 2 X X^T + lambda I.
    let mut h = DMatrix::<f64>::zeros(d_in, d_in);
    for i in 0..d_in {
        for j in i..d_in {
            let mut acc = 0.0;
            for s in 0..n {
                acc += calib.x[i * n + s] * calib.x[j * n + s];
            }
            h[(i, j)] = 2.0 * acc;
            h[(j, i)] = 2.0 * acc;
        }
    }
    let mean_diag = (0..d_in).map(|i| h[(i, i)]).sum::<f64>() / d_in as f64;
    let lambda = damping * mean_diag;
    for i in 0..d_in {
        h[(i, i)] += lambda;
    }
    let h_inv = h
        .clone()
        .cholesky()
        .ok_or(QuantError::SingularHessian { damping })?
        .inverse();
    // Lower Cholesky factor L of H^-1: column q of L drives the update of
    // columns > q once the diagonal entry normalizes the error.
    let l = h_inv
        .cholesky()
        .ok_or(QuantError::SingularHessian { damping })?
        .l();

    let w64: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let gpr = d_in / group;
    let mut ints = vec![0i8; d_out * d_in];
    let mut scales = vec![0.0f64; d_out * gpr];
    let mut zeros = vec![0.0f64; d_out * gpr];
    let mut what = vec![0.0f64; d_out * d_in];

    for r in 0..d_out {
        let mut row = w64[r * d_in..(r + 1) * d_in].to_vec();
        let mut scale = 0.0;
        let mut zero = 0.0;
        for q in 0..d_in {
            if q % group == 0 {
                let g = q / group;
                let (_, s, z) = quantize_group(&row[q..q + group])?;
                scales[r * gpr + g] = s;
                zeros[r * gpr + g] = z;
                scale = s;
                zero = z;
            }
            let int = (row[q] / scale + zero)
                .round()
                .clamp(QMIN as f64, QMAX as f64) as i8;
            ints[r * d_in + q] = int;
            let deq = dequantize_value(int, scale, zero);
            what[r * d_in + q] = deq;
            let err = (row[q] - deq) / l[(q, q)];
            for j in q + 1..d_in {
                row[j] -= err * l[(j, q)];
            }
        }
    }

    let qm = QuantizedMatrix {
        d_out,
        d_in,
        group,
        bits: QUANT_BITS,
        ints,
        scales,
        zeros,
    };

    let rtn = rtn_quantize(w, group)?;
    let mut rtn_hat = Vec::with_capacity(d_out * d_in);
    for r in 0..d_out {
        for c in 0..d_in {
            rtn_hat.push(rtn.dequant_at(r, c));
        }
    }
    let report = QuantReport {
        gptq_objective: objective(&w64, &what, d_out, d_in, calib),
        rtn_objective: objective(&w64, &rtn_hat, d_out, d_in, calib),
    };
    Ok((qm, report))
}
