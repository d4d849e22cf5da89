//! Training-dynamics probes: gradient norms, consecutive-step inner products
//! and cosines, directional derivatives along the parameter trajectory, the
//! induced curvature, and per-matrix maximum weight-element updates.
//!
//! Gradients are flattened across all parameters in registration order and
//! treated as one vector. The probe for step t needs the gradient at t and
//! t+1 plus the parameter delta v(t) = x(t+1) - x(t), so a cadence-1 run of
//! n steps yields n-1 probes.

use thiserror::Error;

use crate::tensor::TensorData;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("update direction has zero norm; directional derivatives undefined")]
    UndefinedDirection,
    #[error("length mismatch: {0}")]
    Mismatch(String),
}

/// Core statistics of one (g_t, g_{t+1}, v_t) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradStats {
    /// ||g_t||_2
    pub grad_norm: f64,
    /// ||g_{t+1}||_2
    pub grad_norm_next: f64,
    /// g_{t+1} . g_t
    pub grad_inner: f64,
    /// Inner product normalized by both norms; None when either norm is 0.
    pub grad_cosine: Option<f64>,
    /// First directional derivative along v_t.
    pub d1: f64,
    /// Second directional derivative along v_t.
    pub d2: f64,
    /// |d2| / (1 + d1^2)^(3/2)
    pub curvature: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// D1 = (g_{t+1} . v_t)/||v_t||, D2 = ((g_{t+1} - g_t) . v_t)/||v_t||^2,
/// K = |D2| / (1 + D1^2)^(3/2).
pub fn grad_stats(g_t: &[f64], g_t1: &[f64], v_t: &[f64]) -> Result<GradStats, DynamicsError> {
    if g_t.len() != g_t1.len() || g_t.len() != v_t.len() {
        return Err(DynamicsError::Mismatch(format!(
            "g_t {} / g_t1 {} / v_t {}",
            g_t.len(),
            g_t1.len(),
            v_t.len()
        )));
    }
    let v_norm = norm(v_t);
    if v_norm == 0.0 {
        return Err(DynamicsError::UndefinedDirection);
    }
    let grad_norm = norm(g_t);
    let grad_norm_next = norm(g_t1);
    let grad_inner = dot(g_t1, g_t);
    let grad_cosine = if grad_norm > 0.0 && grad_norm_next > 0.0 {
        Some((grad_inner / (grad_norm * grad_norm_next)).clamp(-1.0, 1.0))
    } else {
        None
    };
    let d1 = dot(g_t1, v_t) / v_norm;
    let diff: Vec<f64> = g_t1.iter().zip(g_t).map(|(a, b)| a - b).collect();
    let d2 = dot(&diff, v_t) / (v_norm * v_norm);
    let curvature = d2.abs() / (1.0 + d1 * d1).powf(1.5);
    Ok(GradStats {
        grad_norm,
        grad_norm_next,
        grad_inner,
        grad_cosine,
        d1,
        d2,
        curvature,
    })
}

/// Signed maximum of (W_{t+1} - W_t) over all entries: the largest increase,
/// or the least-negative decrease when everything went down.
pub fn max_weight_update(
    w_t: &TensorData<f32>,
    w_t1: &TensorData<f32>,
) -> Result<f64, DynamicsError> {
    if w_t.shape() != w_t1.shape() {
        return Err(DynamicsError::Mismatch(format!(
            "{:?} vs {:?}",
            w_t.shape(),
            w_t1.shape()
        )));
    }
    let mut best = f64::NEG_INFINITY;
    for (a, b) in w_t.data().iter().zip(w_t1.data()) {
        best = best.max((*b - *a) as f64);
    }
    Ok(best)
}

/// Companion absolute maximum |W_{t+1} - W_t|, emitted alongside the signed
/// column for plotting.
pub fn max_abs_weight_update(
    w_t: &TensorData<f32>,
    w_t1: &TensorData<f32>,
) -> Result<f64, DynamicsError> {
    if w_t.shape() != w_t1.shape() {
        return Err(DynamicsError::Mismatch(format!(
            "{:?} vs {:?}",
            w_t.shape(),
            w_t1.shape()
        )));
    }
    let mut best = 0.0f64;
    for (a, b) in w_t.data().iter().zip(w_t1.data()) {
        best = best.max(((*b - *a) as f64).abs());
    }
    Ok(best)
}

/// One emitted probe row. Fields are None when the update direction (or a
/// gradient) vanished — the undefined-direction sentinel.
#[derive(Debug, Clone)]
pub struct StepProbe {
    pub step: u64,
    pub grad_norm: f64,
    pub grad_norm_next: f64,
    pub grad_inner: Option<f64>,
    pub grad_cosine: Option<f64>,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub curvature: Option<f64>,
    /// Per-matrix signed max update, (name, signed, abs), registration order.
    pub max_update: Vec<(String, f64, f64)>,
}

/// Pairs consecutive observed steps into probes. Call `record_grad` with the
/// flattened gradient before each update and `record_update` with the
/// flattened parameter delta (plus per-matrix maxima) after it; a probe for
/// step t pops out when the gradient of step t+1 arrives.
pub struct ProbeRecorder {
    cadence: u64,
    pending: Option<Pending>,
}

struct Pending {
    step: u64,
    grad: Vec<f64>,
    delta: Option<Vec<f64>>,
    max_update: Vec<(String, f64, f64)>,
}

impl ProbeRecorder {
    pub fn new(cadence: u64) -> Self {
        assert!(cadence > 0, "cadence must be positive");
        Self {
            cadence,
            pending: None,
        }
    }

    /// Whether step `s` needs a flattened gradient recorded (either to start
    /// a probe or to finish the previous one).
    pub fn wants_grad(&self, step: u64) -> bool {
        step % self.cadence == 0 || self.pending.is_some()
    }

    /// Whether step `s` needs the parameter delta captured after the update.
    pub fn wants_delta(&self, step: u64) -> bool {
        step % self.cadence == 0
    }

    /// Feed the gradient of `step`; returns the completed probe for the
    /// previous observed step, if one was pending.
    pub fn record_grad(&mut self, step: u64, flat_grad: Vec<f64>) -> Option<StepProbe> {
        let mut out = None;
        if let Some(p) = self.pending.take() {
            if p.step + 1 == step {
                let probe = match p.delta {
                    Some(v) => match grad_stats(&p.grad, &flat_grad, &v) {
                        Ok(s) => StepProbe {
                            step: p.step,
                            grad_norm: s.grad_norm,
                            grad_norm_next: s.grad_norm_next,
                            grad_inner: Some(s.grad_inner),
                            grad_cosine: s.grad_cosine,
                            d1: Some(s.d1),
                            d2: Some(s.d2),
                            curvature: Some(s.curvature),
                            max_update: p.max_update,
                        },
                        Err(DynamicsError::UndefinedDirection) => StepProbe {
                            step: p.step,
                            grad_norm: norm(&p.grad),
                            grad_norm_next: norm(&flat_grad),
                            grad_inner: Some(dot(&flat_grad, &p.grad)),
                            grad_cosine: None,
                            d1: None,
                            d2: None,
                            curvature: None,
                            max_update: p.max_update,
                        },
                        Err(_) => unreachable!("lengths are fixed per run"),
                    },
                    None => StepProbe {
                        step: p.step,
                        grad_norm: norm(&p.grad),
                        grad_norm_next: norm(&flat_grad),
                        grad_inner: Some(dot(&flat_grad, &p.grad)),
                        grad_cosine: None,
                        d1: None,
                        d2: None,
                        curvature: None,
                        max_update: p.max_update,
                    },
                };
                out = Some(probe);
            }
        }
        if step % self.cadence == 0 {
            self.pending = Some(Pending {
                step,
                grad: flat_grad,
                delta: None,
                max_update: Vec::new(),
            });
        }
        out
    }

    /// Feed the post-update delta of `step`.
    pub fn record_update(
        &mut self,
        step: u64,
        flat_delta: Vec<f64>,
        max_update: Vec<(String, f64, f64)>,
    ) {
        if let Some(p) = self.pending.as_mut() {
            if p.step == step {
                p.delta = Some(flat_delta);
                p.max_update = max_update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_gradients_give_unit_cosine_zero_curvature() {
        let g = vec![0.3, -0.4, 1.2];
        let v = vec![0.1, 0.1, 0.1];
        let s = grad_stats(&g, &g, &v).unwrap();
        assert!((s.grad_cosine.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.d2, 0.0);
        assert_eq!(s.curvature, 0.0);
    }

    #[test]
    fn orthogonal_next_grad_zeroes_d1() {
        let g_t = vec![1.0, 1.0];
        let g_t1 = vec![0.0, 1.0];
        let v = vec![1.0, 0.0];
        let s = grad_stats(&g_t, &g_t1, &v).unwrap();
        assert_eq!(s.d1, 0.0);
    }

    #[test]
    fn hand_computed_rotation_case() {
        // g_t=(1,0), g_t1=(0,1), v=(1,0): inner 0, cos 0, D1=0, D2=-1, K=1.
        let s = grad_stats(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s.grad_inner, 0.0);
        assert_eq!(s.grad_cosine, Some(0.0));
        assert_eq!(s.d1, 0.0);
        assert_eq!(s.d2, -1.0);
        assert_eq!(s.curvature, 1.0);
    }

    #[test]
    fn zero_direction_is_an_error() {
        assert!(matches!(
            grad_stats(&[1.0], &[1.0], &[0.0]),
            Err(DynamicsError::UndefinedDirection)
        ));
    }

    #[test]
    fn scale_covariance_of_direction() {
        // Scaling v by c > 0 leaves D1 unchanged and divides D2 by c.
        let g_t = vec![0.2, -0.7, 0.4];
        let g_t1 = vec![0.1, -0.5, 0.9];
        let v = vec![0.3, 0.2, -0.1];
        let c = 7.5;
        let vc: Vec<f64> = v.iter().map(|x| x * c).collect();
        let a = grad_stats(&g_t, &g_t1, &v).unwrap();
        let b = grad_stats(&g_t, &g_t1, &vc).unwrap();
        assert!((a.d1 - b.d1).abs() < 1e-12);
        assert!((a.d2 - b.d2 * c).abs() < 1e-12);
        let k_expect = (b.d2 * c).abs() / (1.0 + b.d1 * b.d1).powf(1.5);
        assert!((a.curvature - k_expect).abs() < 1e-12);
    }

    #[test]
    fn cosine_identity_holds() {
        let g_t = vec![0.2, -0.7, 0.4, 0.05];
        let g_t1 = vec![0.1, -0.5, 0.9, -0.3];
        let v = vec![0.3, 0.2, -0.1, 0.0];
        let s = grad_stats(&g_t, &g_t1, &v).unwrap();
        let want = s.grad_inner / (s.grad_norm * s.grad_norm_next);
        assert!((s.grad_cosine.unwrap() - want).abs() < 1e-12);
        assert!(s.grad_cosine.unwrap().abs() <= 1.0);
    }

    #[test]
    fn signed_max_update_cases() {
        let w = TensorData::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        assert_eq!(max_weight_update(&w, &w).unwrap(), 0.0);

        let mut up = w.clone();
        up.data_mut()[2] += 0.3;
        assert!((max_weight_update(&w, &up).unwrap() - 0.3).abs() < 1e-7);

        // All entries decreased: signed max is the least-negative diff.
        let down = TensorData::new(vec![2, 2], vec![0.5f32, 1.9, 2.0, 3.0]);
        let brute = w
            .data()
            .iter()
            .zip(down.data())
            .map(|(a, b)| (b - a) as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max_weight_update(&w, &down).unwrap(), brute);
        assert!(brute < 0.0);
        assert!((max_abs_weight_update(&w, &down).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recorder_fencepost_count() {
        // 10 steps at cadence 1 -> 9 probes.
        let mut rec = ProbeRecorder::new(1);
        let mut probes = 0;
        for s in 1..=10u64 {
            let g = vec![s as f64, 1.0];
            if rec.record_grad(s, g).is_some() {
                probes += 1;
            }
            rec.record_update(s, vec![-0.1, 0.0], vec![]);
        }
        assert_eq!(probes, 9);
    }

    #[test]
    fn recorder_cadence_pairs_consecutive_steps() {
        let mut rec = ProbeRecorder::new(5);
        let mut seen = Vec::new();
        for s in 1..=12u64 {
            if rec.wants_grad(s) {
                if let Some(p) = rec.record_grad(s, vec![s as f64]) {
                    seen.push(p.step);
                }
            }
            if rec.wants_delta(s) {
                rec.record_update(s, vec![1.0], vec![]);
            }
        }
        assert_eq!(seen, vec![5, 10]);
    }

    #[test]
    fn zero_delta_yields_sentinel_probe() {
        let mut rec = ProbeRecorder::new(1);
        assert!(rec.record_grad(1, vec![1.0, 2.0]).is_none());
        rec.record_update(1, vec![0.0, 0.0], vec![]);
        let p = rec.record_grad(2, vec![1.0, 2.0]).unwrap();
        assert!(p.d1.is_none() && p.curvature.is_none());
        assert!(p.grad_norm > 0.0);
    }
}
