//! Central finite differences, used as the independent oracle for backward.
//!
//! Nothing here touches the tape's backward pass: gradients are estimated by
//! re-evaluating a caller-supplied scalar function with perturbed leaves.

/// Central-difference gradient of `f` with respect to every entry of every
/// leaf, step size `h`.
pub fn central_diff<F>(f: F, leaves: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = leaves.to_vec();
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = vec![0.0; leaves[li].len()];
        for j in 0..leaves[li].len() {
            let orig = work[li][j];
            work[li][j] = orig + h;
            let fp = f(&work);
            work[li][j] = orig - h;
            let fm = f(&work);
            work[li][j] = orig;
            g[j] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Element-wise relative error profile between an analytic gradient and a
/// finite-difference estimate.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub n: usize,
    pub max_rel: f64,
    /// Fraction of entries with relative error below the per-entry threshold.
    pub frac_within: f64,
}

/// rel(a, b) = |a - b| / max(|a|, |b|, floor); `frac_within` counts entries
/// with rel < `tol`.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64, floor: f64) -> GradCheckReport {
    let mut n = 0usize;
    let mut within = 0usize;
    let mut max_rel = 0.0f64;
    for (ga, gn) in analytic.iter().zip(numeric) {
        assert_eq!(ga.len(), gn.len(), "gradient length mismatch");
        for (&a, &b) in ga.iter().zip(gn) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(floor);
            max_rel = max_rel.max(rel);
            n += 1;
            if rel < tol {
                within += 1;
            }
        }
    }
    GradCheckReport {
        n,
        max_rel,
        frac_within: if n == 0 { 1.0 } else { within as f64 / n as f64 },
    }
}
