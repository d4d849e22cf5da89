//! Empirical-law fitting: the L(N, D) loss surface, the compute-optimal
//! model/data split it implies, best-loss-vs-compute envelopes, and the
//! optimal-batch-size power law.
//!
//! All fits minimize residuals in loss space (the additive-offset forms make
//! log-loss fits wrong) and log-parameterize every positive parameter.

mod optimize;

pub use optimize::{FitOutcome, ResidualModel};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use optimize::{linear_fit, multi_start_fit, quadratic_fit};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("fit did not converge: {0}")]
    NotConverged(String),
    #[error("no usable loss levels for the batch-size fit")]
    NoUsableLevels,
}

/// One decayed-run measurement: loss after training a model of N
/// non-embedding parameters on D tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub n_params: f64,
    pub tokens: f64,
    pub loss: f64,
    pub batch_size: f64,
    pub tag: String,
}

impl RunPoint {
    pub fn new(n_params: f64, tokens: f64, loss: f64) -> Self {
        Self {
            n_params,
            tokens,
            loss,
            batch_size: 0.0,
            tag: String::new(),
        }
    }

    /// C = 6 N D.
    pub fn compute(&self) -> f64 {
        6.0 * self.n_params * self.tokens
    }
}

/// Fitted parameters of L(N, D) = C_N N^-alpha + C_D D^-beta + L0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub c_n: f64,
    pub alpha: f64,
    pub c_d: f64,
    pub beta: f64,
    pub l0: f64,
    /// (beta - alpha) / (alpha + beta), the compute exponent of the optimal
    /// ratio.
    pub eta_exp: f64,
    /// K^2 with K = (alpha C_N / (beta C_D))^(1/(alpha+beta)).
    pub k2: f64,
    pub rmse: f64,
    pub n_points: usize,
    pub converged: bool,
}

impl ScalingFit {
    pub fn loss_at(&self, n: f64, d: f64) -> f64 {
        self.c_n * n.powf(-self.alpha) + self.c_d * d.powf(-self.beta) + self.l0
    }

    pub fn recompute_eta(&self) -> f64 {
        (self.beta - self.alpha) / (self.alpha + self.beta)
    }

    pub fn recompute_k2(&self) -> f64 {
        ((self.alpha * self.c_n) / (self.beta * self.c_d))
            .powf(1.0 / (self.alpha + self.beta))
            .powi(2)
    }
}

/// Multi-start grid for the surface fit; `default_grid` draws a deterministic
/// log-uniform cloud sized to the data.
#[derive(Debug, Clone)]
pub struct MultiStart {
    pub starts: Vec<Vec<f64>>,
}

impl MultiStart {
    pub fn default_grid(points: &[RunPoint]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let min_loss = points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
        let max_loss = points.iter().map(|p| p.loss).fold(0.0f64, f64::max);
        let spread = (max_loss - min_loss).max(0.1 * min_loss.abs()).max(1e-6);
        let geo = |sel: fn(&RunPoint) -> f64| -> f64 {
            (points.iter().map(|p| sel(p).ln()).sum::<f64>() / points.len() as f64).exp()
        };
        let n_geo = geo(|p| p.n_params);
        let d_geo = geo(|p| p.tokens);
        let mut starts = Vec::with_capacity(32);
        for _ in 0..32 {
            let alpha: f64 = 0.05 * (2.0f64 / 0.05).powf(rng.gen::<f64>());
            let beta: f64 = 0.05 * (2.0f64 / 0.05).powf(rng.gen::<f64>());
            let c_n = spread * n_geo.powf(alpha) * 10.0f64.powf(rng.gen::<f64>() * 2.0 - 1.0);
            let c_d = spread * d_geo.powf(beta) * 10.0f64.powf(rng.gen::<f64>() * 2.0 - 1.0);
            let l0 = (min_loss.max(1e-3)) * 10.0f64.powf(rng.gen::<f64>() - 0.5);
            starts.push(vec![c_n.ln(), alpha.ln(), c_d.ln(), beta.ln(), l0.ln()]);
        }
        Self { starts }
    }
}

struct SurfaceModel<'a> {
    points: &'a [RunPoint],
}

impl ResidualModel for SurfaceModel<'_> {
    fn n_params(&self) -> usize {
        5
    }
    fn n_points(&self) -> usize {
        self.points.len()
    }
    fn residuals(&self, u: &[f64], out: &mut [f64]) {
        let (c_n, alpha, c_d, beta, l0) =
            (u[0].exp(), u[1].exp(), u[2].exp(), u[3].exp(), u[4].exp());
        for (o, p) in out.iter_mut().zip(self.points) {
            *o = c_n * p.n_params.powf(-alpha) + c_d * p.tokens.powf(-beta) + l0 - p.loss;
        }
    }
    fn jacobian(&self, u: &[f64], out: &mut [f64]) {
        let (c_n, alpha, c_d, beta, l0) =
            (u[0].exp(), u[1].exp(), u[2].exp(), u[3].exp(), u[4].exp());
        for (i, p) in self.points.iter().enumerate() {
            let tn = c_n * p.n_params.powf(-alpha);
            let td = c_d * p.tokens.powf(-beta);
            // d/d ln(theta) = theta * d/d theta
            out[i * 5] = tn;
            out[i * 5 + 1] = -tn * alpha * p.n_params.ln();
            out[i * 5 + 2] = td;
            out[i * 5 + 3] = -td * beta * p.tokens.ln();
            out[i * 5 + 4] = l0;
        }
    }
}

/// Least-squares fit of the loss surface. Needs >= 8 points spanning at
/// least 2 distinct N and 3 distinct D.
pub fn fit_nd_scaling(points: &[RunPoint], starts: &MultiStart) -> Result<ScalingFit, FitError> {
    let mut distinct_n: Vec<f64> = points.iter().map(|p| p.n_params).collect();
    let mut distinct_d: Vec<f64> = points.iter().map(|p| p.tokens).collect();
    distinct_n.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct_n.dedup();
    distinct_d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct_d.dedup();
    if points.len() < 8 || distinct_n.len() < 2 || distinct_d.len() < 3 {
        return Err(FitError::Underdetermined(format!(
            "{} points, {} distinct N, {} distinct D (need >=8 / >=2 / >=3)",
            points.len(),
            distinct_n.len(),
            distinct_d.len()
        )));
    }
    if points
        .iter()
        .any(|p| !(p.n_params > 0.0 && p.tokens > 0.0 && p.loss > 0.0))
    {
        return Err(FitError::InvalidInput(
            "N, D, and loss must all be positive".into(),
        ));
    }

    // Point order must not matter: fit over a canonically sorted copy.
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        (a.n_params, a.tokens, a.loss)
            .partial_cmp(&(b.n_params, b.tokens, b.loss))
            .unwrap()
    });
    let model = SurfaceModel { points: &sorted };
    let out = multi_start_fit(&model, &starts.starts);
    let (c_n, alpha, c_d, beta, l0) = (
        out.u[0].exp(),
        out.u[1].exp(),
        out.u[2].exp(),
        out.u[3].exp(),
        out.u[4].exp(),
    );
    let rmse = (2.0 * out.cost / sorted.len() as f64).sqrt();
    // Identifiability: a term that contributes nothing anywhere leaves its
    // exponent free, so the zero-gradient test is vacuous there.
    let loss_scale = sorted.iter().map(|p| p.loss.abs()).sum::<f64>() / sorted.len() as f64;
    let term_n = sorted
        .iter()
        .map(|p| c_n * p.n_params.powf(-alpha))
        .fold(0.0f64, f64::max);
    let term_d = sorted
        .iter()
        .map(|p| c_d * p.tokens.powf(-beta))
        .fold(0.0f64, f64::max);
    let identified = term_n > 1e-7 * loss_scale && term_d > 1e-7 * loss_scale;
    let mut fit = ScalingFit {
        c_n,
        alpha,
        c_d,
        beta,
        l0,
        eta_exp: 0.0,
        k2: 0.0,
        rmse,
        n_points: sorted.len(),
        converged: out.converged && identified,
    };
    fit.eta_exp = fit.recompute_eta();
    fit.k2 = fit.recompute_k2();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeOptimal {
    pub n_opt: f64,
    pub d_opt: f64,
    /// N_opt / D_opt = K^2 (C/6)^eta.
    pub ratio: f64,
}

/// Split a compute budget C = 6 N D optimally under a converged fit.
pub fn compute_optimal(fit: &ScalingFit, compute: f64) -> Result<ComputeOptimal, FitError> {
    if !fit.converged {
        return Err(FitError::NotConverged(
            "compute_optimal requires a converged fit".into(),
        ));
    }
    if !(compute > 0.0) {
        return Err(FitError::InvalidInput(format!(
            "compute must be positive, got {compute}"
        )));
    }
    let c6 = compute / 6.0;
    let ratio = fit.k2 * c6.powf(fit.eta_exp);
    let n_opt = (ratio * c6).sqrt();
    let d_opt = c6 / n_opt;
    Ok(ComputeOptimal { n_opt, d_opt, ratio })
}

/// Brute-force minimizer of L(N, C/6N) over a log grid, the oracle
/// `compute_optimal` is checked against.
pub fn brute_force_optimal_n(fit: &ScalingFit, compute: f64, grid: usize) -> f64 {
    let c6 = compute / 6.0;
    // Cover an extravagant range around sqrt(C/6).
    let center = c6.sqrt();
    let lo = (center * 1e-6).ln();
    let hi = (center * 1e6).ln();
    let mut best_n = center;
    let mut best_l = f64::INFINITY;
    for i in 0..grid {
        let n = (lo + (hi - lo) * i as f64 / (grid - 1) as f64).exp();
        let l = fit.loss_at(n, c6 / n);
        if l < best_l {
            best_l = l;
            best_n = n;
        }
    }
    best_n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeForm {
    Exponential,
    Power,
}

/// Fit of one envelope form: exponential L = a e^{-b C} + L0, or power
/// L = a C^{-b} + L0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub form: EnvelopeForm,
    pub a: f64,
    pub b: f64,
    pub l0: f64,
    pub rmse: f64,
    pub converged: bool,
}

impl EnvelopeFit {
    pub fn loss_at(&self, c: f64) -> f64 {
        match self.form {
            EnvelopeForm::Exponential => self.a * (-self.b * c).exp() + self.l0,
            EnvelopeForm::Power => self.a * c.powf(-self.b) + self.l0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub exponential: EnvelopeFit,
    pub power: EnvelopeFit,
    /// Lower-rmse form; ties break toward power.
    pub preferred: EnvelopeForm,
}

struct EnvelopeModel<'a> {
    // (C / c_scale, loss)
    points: &'a [(f64, f64)],
    form: EnvelopeForm,
}

impl ResidualModel for EnvelopeModel<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_points(&self) -> usize {
        self.points.len()
    }
    fn residuals(&self, u: &[f64], out: &mut [f64]) {
        let (a, b, l0) = (u[0].exp(), u[1].exp(), u[2].exp());
        for (o, &(c, loss)) in out.iter_mut().zip(self.points) {
            let f = match self.form {
                EnvelopeForm::Exponential => a * (-b * c).exp(),
                EnvelopeForm::Power => a * c.powf(-b),
            };
            *o = f + l0 - loss;
        }
    }
    fn jacobian(&self, u: &[f64], out: &mut [f64]) {
        let (a, b, l0) = (u[0].exp(), u[1].exp(), u[2].exp());
        for (i, &(c, _)) in self.points.iter().enumerate() {
            match self.form {
                EnvelopeForm::Exponential => {
                    let f = a * (-b * c).exp();
                    out[i * 3] = f;
                    out[i * 3 + 1] = -f * b * c;
                }
                EnvelopeForm::Power => {
                    let f = a * c.powf(-b);
                    out[i * 3] = f;
                    out[i * 3 + 1] = -f * b * c.ln();
                }
            }
            out[i * 3 + 2] = l0;
        }
    }
}

fn fit_one_envelope(points: &[(f64, f64)], form: EnvelopeForm) -> EnvelopeFit {
    // Normalize C by its geometric mean for conditioning.
    let c_scale =
        (points.iter().map(|&(c, _)| c.ln()).sum::<f64>() / points.len() as f64).exp();
    let scaled: Vec<(f64, f64)> = points.iter().map(|&(c, l)| (c / c_scale, l)).collect();
    let model = EnvelopeModel {
        points: &scaled,
        form,
    };
    let min_loss = points.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
    let max_loss = points.iter().map(|&(_, l)| l).fold(0.0f64, f64::max);
    let spread = (max_loss - min_loss).max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut starts = Vec::with_capacity(16);
    for _ in 0..16 {
        let a = spread * 10.0f64.powf(rng.gen::<f64>() * 2.0 - 1.0);
        let b = 10.0f64.powf(rng.gen::<f64>() * 2.0 - 1.5);
        let l0 = min_loss.max(1e-3) * 10.0f64.powf(rng.gen::<f64>() - 0.5);
        starts.push(vec![a.ln(), b.ln(), l0.ln()]);
    }
    let out = multi_start_fit(&model, &starts);
    let (a_s, b_s, l0) = (out.u[0].exp(), out.u[1].exp(), out.u[2].exp());
    // Undo the C normalization.
    let (a, b) = match form {
        EnvelopeForm::Exponential => (a_s, b_s / c_scale),
        EnvelopeForm::Power => (a_s * c_scale.powf(b_s), b_s),
    };
    EnvelopeFit {
        form,
        a,
        b,
        l0,
        rmse: (2.0 * out.cost / points.len() as f64).sqrt(),
        converged: out.converged,
    }
}

/// Fit both envelope forms to (compute, loss) points and pick the better.
pub fn fit_envelope(points: &[(f64, f64)]) -> Result<EnvelopeReport, FitError> {
    if points.len() < 4 {
        return Err(FitError::Underdetermined(format!(
            "{} points, need >= 4",
            points.len()
        )));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(FitError::InvalidInput(
            "compute values must be strictly increasing".into(),
        ));
    }
    let exponential = fit_one_envelope(points, EnvelopeForm::Exponential);
    let power = fit_one_envelope(points, EnvelopeForm::Power);
    let preferred = if exponential.rmse < power.rmse {
        EnvelopeForm::Exponential
    } else {
        EnvelopeForm::Power
    };
    Ok(EnvelopeReport {
        exponential,
        power,
        preferred,
    })
}

/// One training curve at a fixed batch size: cumulative tokens vs loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCurve {
    pub batch_size: f64,
    /// (cumulative tokens, loss), tokens strictly increasing.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFit {
    pub loss_level: f64,
    pub best_batch_size: f64,
}

/// bs(L) = coeff * L^(-exponent), with per-level parabola diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeFit {
    pub coeff: f64,
    pub exponent: f64,
    pub levels: Vec<LevelFit>,
    pub skipped_levels: Vec<String>,
    pub rmse_log: f64,
}

impl BatchSizeFit {
    pub fn batch_size_at(&self, loss: f64) -> f64 {
        self.coeff * loss.powf(-self.exponent)
    }
}

pub const BATCH_FIT_LEVELS: usize = 20;

fn tokens_to_reach(curve: &[(f64, f64)], level: f64) -> Option<f64> {
    // Running-min view of the curve; linear interpolation at the crossing.
    let mut prev_tokens = curve[0].0;
    let mut prev_loss = curve[0].1;
    if prev_loss <= level {
        return Some(prev_tokens);
    }
    let mut best = prev_loss;
    for &(t, l) in &curve[1..] {
        let l = l.min(best);
        best = l;
        if l <= level {
            let frac = if prev_loss > l {
                (prev_loss - level) / (prev_loss - l)
            } else {
                1.0
            };
            return Some(prev_tokens + (t - prev_tokens) * frac);
        }
        prev_tokens = t;
        prev_loss = l;
    }
    None
}

/// Equal-loss parabola construction: for each probed loss level, fit
/// tokens-to-reach as a parabola in log batch size, take its minimum, then
/// regress log best-bs on log loss.
pub fn fit_optimal_batchsize(curves: &[BatchCurve]) -> Result<BatchSizeFit, FitError> {
    let mut distinct: Vec<f64> = curves.iter().map(|c| c.batch_size).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(FitError::Underdetermined(format!(
            "{} distinct batch sizes, parabola needs >= 3",
            distinct.len()
        )));
    }
    for c in curves {
        if c.points.is_empty() {
            return Err(FitError::InvalidInput("empty curve".into()));
        }
    }

    // Overlapping loss range: every curve must be able to reach a level.
    let reach_lo = curves
        .iter()
        .map(|c| c.points.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let start_hi = curves
        .iter()
        .map(|c| c.points[0].1)
        .fold(f64::INFINITY, f64::min);
    if !(start_hi > reach_lo) {
        return Err(FitError::NoUsableLevels);
    }

    let mut levels = Vec::new();
    let mut skipped = Vec::new();
    for i in 1..=BATCH_FIT_LEVELS {
        let level = reach_lo + (start_hi - reach_lo) * i as f64 / (BATCH_FIT_LEVELS + 1) as f64;
        let mut zs = Vec::new();
        let mut ts = Vec::new();
        let mut unreachable = 0;
        for c in curves {
            match tokens_to_reach(&c.points, level) {
                Some(t) => {
                    zs.push(c.batch_size.ln());
                    ts.push(t);
                }
                None => unreachable += 1,
            }
        }
        if unreachable > 0 {
            skipped.push(format!(
                "level {level:.6}: unreachable in {unreachable} run(s)"
            ));
            if zs.len() < 3 {
                continue;
            }
        }
        if zs.len() < 3 {
            skipped.push(format!("level {level:.6}: only {} usable points", zs.len()));
            continue;
        }
        let Some((a, b, _c)) = quadratic_fit(&zs, &ts) else {
            skipped.push(format!("level {level:.6}: singular parabola"));
            continue;
        };
        if a <= 0.0 {
            skipped.push(format!("level {level:.6}: no interior minimum (a={a:.3e})"));
            continue;
        }
        let z_min = -b / (2.0 * a);
        levels.push(LevelFit {
            loss_level: level,
            best_batch_size: z_min.exp(),
        });
    }
    if levels.len() < 2 {
        return Err(FitError::NoUsableLevels);
    }

    let xs: Vec<f64> = levels.iter().map(|l| l.loss_level.ln()).collect();
    let ys: Vec<f64> = levels.iter().map(|l| l.best_batch_size.ln()).collect();
    let (intercept, slope) = linear_fit(&xs, &ys);
    let rmse_log = {
        let ss: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let pred = intercept + slope * x;
                (y - pred) * (y - pred)
            })
            .sum();
        (ss / xs.len() as f64).sqrt()
    };
    Ok(BatchSizeFit {
        coeff: intercept.exp(),
        exponent: -slope,
        levels,
        skipped_levels: skipped,
        rmse_log,
    })
}

/// Total nats per byte: sum of token losses over sum of token byte lengths.
pub fn bytes_normalized_loss(token_losses: &[f64], token_byte_lengths: &[u64]) -> Result<f64, FitError> {
    if token_losses.is_empty() {
        return Err(FitError::InvalidInput("empty input".into()));
    }
    if token_losses.len() != token_byte_lengths.len() {
        return Err(FitError::InvalidInput(format!(
            "{} losses vs {} byte lengths",
            token_losses.len(),
            token_byte_lengths.len()
        )));
    }
    if token_byte_lengths.iter().any(|&b| b == 0) {
        return Err(FitError::InvalidInput("byte lengths must be >= 1".into()));
    }
    let total_loss: f64 = token_losses.iter().sum();
    let total_bytes: u64 = token_byte_lengths.iter().sum();
    Ok(total_loss / total_bytes as f64)
}
