//! Nonlinear least squares on log-parameterized models: derivative-free
//! simplex descent to get into the basin, then Levenberg-damped Gauss-Newton
//! to polish. Everything is deterministic for fixed inputs.

use nalgebra::{DMatrix, DVector};

/// A residual model over log-parameters u (the physical parameters are
/// exp(u), which keeps them positive).
pub trait ResidualModel {
    fn n_params(&self) -> usize;
    fn n_points(&self) -> usize;
    /// Residuals r_i(u), length n_points.
    fn residuals(&self, u: &[f64], out: &mut [f64]);
    /// Row-major Jacobian d r_i / d u_j, n_points x n_params.
    fn jacobian(&self, u: &[f64], out: &mut [f64]);
}

pub const LOG_BOUND: f64 = 27.631; // exp bound ~ 1e12

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub u: Vec<f64>,
    pub cost: f64,
    /// Half sum of squares gradient inf-norm at the stopping point.
    pub grad_inf: f64,
    /// True when the gradient test passed and no parameter sits on a bound.
    pub converged: bool,
}

fn clamp_u(u: &mut [f64]) {
    for v in u.iter_mut() {
        *v = v.clamp(-LOG_BOUND, LOG_BOUND);
    }
}

fn cost_of<M: ResidualModel>(model: &M, u: &[f64], buf: &mut [f64]) -> f64 {
    model.residuals(u, buf);
    0.5 * buf.iter().map(|r| r * r).sum::<f64>()
}

/// Standard Nelder-Mead with deterministic ordering.
fn nelder_mead<M: ResidualModel>(model: &M, start: &[f64], iters: usize) -> Vec<f64> {
    let dim = model.n_params();
    let mut buf = vec![0.0; model.n_points()];
    let mut eval = |u: &mut Vec<f64>| -> f64 {
        clamp_u(u);
        cost_of(model, u, &mut buf)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let mut s0 = start.to_vec();
    let f0 = eval(&mut s0);
    simplex.push((s0, f0));
    for d in 0..dim {
        let mut s = start.to_vec();
        s[d] += 0.25;
        let f = eval(&mut s);
        simplex.push((s, f));
    }

    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= 1e-14 * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(s, _)| s[j]).sum::<f64>() / dim as f64)
            .collect();
        let mix = |a: f64| -> Vec<f64> {
            (0..dim)
                .map(|j| centroid[j] + a * (simplex[dim].0[j] - centroid[j]))
                .collect()
        };
        let mut refl = mix(-1.0);
        let f_refl = eval(&mut refl);
        if f_refl < simplex[0].1 {
            let mut exp = mix(-2.0);
            let f_exp = eval(&mut exp);
            simplex[dim] = if f_exp < f_refl { (exp, f_exp) } else { (refl, f_refl) };
        } else if f_refl < simplex[dim - 1].1 {
            simplex[dim] = (refl, f_refl);
        } else {
            let mut con = mix(0.5);
            let f_con = eval(&mut con);
            if f_con < simplex[dim].1 {
                simplex[dim] = (con, f_con);
            } else {
                // Shrink toward the best vertex.
                let best_pt = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let mut s: Vec<f64> = entry
                        .0
                        .iter()
                        .zip(&best_pt)
                        .map(|(x, b)| b + 0.5 * (x - b))
                        .collect();
                    let f = eval(&mut s);
                    *entry = (s, f);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex[0].0.clone()
}

/// Levenberg-damped Gauss-Newton polish.
fn gauss_newton<M: ResidualModel>(model: &M, start: &[f64], iters: usize) -> FitOutcome {
    let dim = model.n_params();
    let n = model.n_points();
    let mut u = start.to_vec();
    clamp_u(&mut u);
    let mut r = vec![0.0; n];
    let mut jbuf = vec![0.0; n * dim];
    let mut cost = cost_of(model, &u, &mut r);
    let mut lambda = 1e-6;

    for _ in 0..iters {
        model.residuals(&u, &mut r);
        model.jacobian(&u, &mut jbuf);
        let j = DMatrix::from_row_slice(n, dim, &jbuf);
        let rv = DVector::from_column_slice(&r);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &rv;
        let grad_inf = jtr.amax();
        if grad_inf <= 1e-12 * (1.0 + cost) {
            break;
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda * (jtj[(d, d)].abs().max(1e-12));
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&jtr));
            let mut cand: Vec<f64> = u.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            clamp_u(&mut cand);
            let cand_cost = cost_of(model, &cand, &mut r);
            if cand_cost <= cost {
                u = cand;
                cost = cand_cost;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }

    model.residuals(&u, &mut r);
    model.jacobian(&u, &mut jbuf);
    let j = DMatrix::from_row_slice(n, dim, &jbuf);
    let rv = DVector::from_column_slice(&r);
    let grad_inf = (j.transpose() * rv).amax();
    let at_bound = u.iter().any(|v| v.abs() >= LOG_BOUND - 1e-9);
    let converged = !at_bound && grad_inf <= 1e-6 * (1.0 + cost);
    FitOutcome {
        u,
        cost,
        grad_inf,
        converged,
    }
}

/// Run simplex + Gauss-Newton from every start, keep the lowest cost.
pub fn multi_start_fit<M: ResidualModel>(model: &M, starts: &[Vec<f64>]) -> FitOutcome {
    assert!(!starts.is_empty(), "need at least one start");
    let mut best: Option<FitOutcome> = None;
    for start in starts {
        let rough = nelder_mead(model, start, 200 * model.n_params());
        let polished = gauss_newton(model, &rough, 80);
        let better = match &best {
            None => true,
            Some(b) => polished.cost < b.cost,
        };
        if better {
            best = Some(polished);
        }
    }
    best.unwrap()
}

/// Ordinary least squares for y = a + b x; returns (a, b).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    let b = (n * sxy - sx * sy) / denom;
    let a = (sy - b * sx) / n;
    (a, b)
}

/// Least-squares parabola y = a x^2 + b x + c; returns (a, b, c).
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 3 {
        return None;
    }
    let mut ata = DMatrix::<f64>::zeros(3, 3);
    let mut atb = DVector::<f64>::zeros(3);
    for (&x, &y) in xs.iter().zip(ys) {
        let row = [x * x, x, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[(i, j)] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    ata.lu().solve(&atb).map(|s| (s[0], s[1], s[2]))
}
