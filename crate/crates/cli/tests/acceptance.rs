//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (run with `--nocapture` to see them on success).
//!
//! Tolerances are pinned here, in code. The soft criteria (4, 5, 10) train
//! real models on seeded synthetic text; they assert orderings and
//! stability, never absolute loss values.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tinylab_cli::config::ExperimentSpec;
use tinylab_cli::report::read_metrics;
use tinylab_cli::run::{fork_decay, resume_experiment, run_experiment, ForkOptions};
use tinylab_core::dynamics::grad_stats;
use tinylab_core::model::{build_model, count_params, ModelConfig};
use tinylab_core::quant::{
    dequantize, gptq_quantize, rtn_quantize, CalibrationSet,
};
use tinylab_core::scaling::{
    brute_force_optimal_n, compute_optimal, fit_nd_scaling, fit_optimal_batchsize, BatchCurve,
    BatchSizeFit, MultiStart, RunPoint, ScalingFit,
};
use tinylab_core::schedule::ScheduleSpec;
use tinylab_core::tensor::gradcheck::{central_diff, compare};
use tinylab_core::{Graph, TensorData};

fn pass(n: u32, name: &str, detail: &str) {
    println!("ACCEPTANCE {n:2} {name}: PASS  [{detail}]");
}

// ---------------------------------------------------------------------------
// 1. Parameter-count exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_parameter_count_exactness() {
    let cfg_12 = ModelConfig::with_tuned_constants(1536, 3840, 64, 24, 8, 52, 73_440, 256, 0);
    assert_eq!(count_params(&cfg_12), 1_247_442_432, "1.2B table value");
    let cfg_24 = ModelConfig::with_tuned_constants(2304, 5760, 64, 36, 36, 40, 122_753, 256, 0);
    assert_eq!(count_params(&cfg_24), 2_442_057_984, "2.4B table value");

    // Seven smaller presets against the published N(B) column. The column
    // prints three decimals of a billion, so each entry carries up to
    // 0.0005e9 of quantization; the comparison allows 2% or that printed
    // quantum, whichever is larger (the 0.009 entry has only one significant
    // digit and sits 4.7% from its exact count).
    let table: [(f64, usize, usize, usize, usize); 7] = [
        (0.009, 320, 800, 5, 8),
        (0.036, 512, 1280, 8, 12),
        (0.066, 640, 1600, 10, 14),
        (0.109, 768, 1920, 12, 16),
        (0.166, 896, 2240, 14, 18),
        (0.241, 1024, 2560, 16, 20),
        (0.499, 1344, 3360, 21, 24),
    ];
    let mut detail = String::new();
    for &(n_b, d_m, d_ff, n_h, layers) in &table {
        let cfg = ModelConfig::with_tuned_constants(d_m, d_ff, 64, n_h, n_h, layers, 1, 64, 0);
        let n = count_params(&cfg) as f64;
        let table_n = n_b * 1e9;
        let rel = (n - table_n).abs() / table_n;
        let quantum_ok = (n / 1e9 - n_b).abs() <= 0.0005;
        assert!(
            rel <= 0.02 || quantum_ok,
            "config d_m={d_m}: {n} vs {table_n} (rel {rel:.4})"
        );
        let _ = write!(detail, "{n_b}:{rel:.4} ");
    }
    // The smallest preset's exact enumeration, frozen.
    let cfg_9m = ModelConfig::with_tuned_constants(320, 800, 64, 5, 5, 8, 1, 64, 0);
    assert_eq!(count_params(&cfg_9m), 9_426_240);
    pass(1, "parameter-count exactness", detail.trim());
}

// ---------------------------------------------------------------------------
// 2. Scheduler exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_scheduler_exactness() {
    const REL: f64 = 1e-12;
    let eta = 0.01;
    let (w, t, s_total, hl) = (100u64, 80_000u64, 100_000u64, 5_000u64);
    let wsd = ScheduleSpec::wsd(eta, w, t, s_total, hl);
    let cos = ScheduleSpec::cosine(eta, w, t, s_total);
    let lop = ScheduleSpec::cosine_loop(eta, w, t, s_total);

    // Closed forms, written out independently of the library code.
    let wsd_ref = |s: u64| -> f64 {
        if s < w {
            s as f64 / w as f64 * eta
        } else if s <= t {
            eta
        } else {
            eta * 0.5f64.powf((s - t) as f64 / hl as f64)
        }
    };
    let cos_body = |s: u64| eta * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * s as f64 / t as f64).cos()));
    let cos_ref = |s: u64| -> f64 {
        if s < w {
            s as f64 / w as f64 * eta
        } else if s <= t {
            cos_body(s)
        } else {
            0.1 * eta
        }
    };
    let loop_ref = |s: u64| -> f64 {
        if s < w {
            s as f64 / w as f64 * eta
        } else {
            cos_body(s)
        }
    };

    let mut max_rel = 0.0f64;
    for i in 0..10_000u64 {
        let s = 1 + i * (s_total - 1) / 9_999;
        for (spec, reference) in [
            (&wsd, &wsd_ref as &dyn Fn(u64) -> f64),
            (&cos, &cos_ref),
            (&lop, &loop_ref),
        ] {
            let got = spec.lr_at(s).unwrap();
            let want = reference(s);
            let rel = (got - want).abs() / want.abs().max(1e-300);
            max_rel = max_rel.max(rel);
            assert!(rel <= REL, "{:?} step {s}: {got} vs {want}", spec.kind);
        }
    }

    // WSD continuity at the warmup and stable boundaries.
    assert_eq!(wsd.lr_at(w).unwrap(), eta);
    assert_eq!(wsd.lr_at(t).unwrap(), eta);
    let long = ScheduleSpec::wsd(eta, w, t, s_total, 1_000_000);
    let after = long.lr_at(t + 1).unwrap();
    assert!(
        (after - eta).abs() <= 1e-6 * eta,
        "decay limit at T should approach the plateau: {after}"
    );
    pass(2, "scheduler exactness", &format!("max rel err {max_rel:.2e} over 3x10^4 samples"));
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness
// ---------------------------------------------------------------------------

const FD_H: f64 = 1e-5;
const GRAD_TOL_TYPICAL: f64 = 1e-4;
const GRAD_TOL_WORST: f64 = 1e-3;
const GRAD_REL_FLOOR: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

#[test]
fn criterion_03_gradient_correctness() {
    // Every differentiable op, checked through a fixed random projection.
    type Build = Box<
        dyn Fn(&mut Graph<f64>, &[TensorData<f64>]) -> (tinylab_core::NodeId, Vec<tinylab_core::NodeId>),
    >;
    let project = |g: &mut Graph<f64>, node: tinylab_core::NodeId, seed: u64| {
        let shape = g.value(node).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = TensorData::from_f64_slice(shape, &randn(&mut rng, n, 1.0));
        let wl = g.leaf(w, false);
        let p = g.mul(node, wl).unwrap();
        g.sum(p)
    };

    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        (
            "matmul",
            vec![vec![2, 3, 4], vec![4, 5]],
            Box::new(move |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let c = g.matmul(a, b).unwrap();
                (project(g, c, 1), vec![a, b])
            }),
        ),
        (
            "matmul-grouped",
            vec![vec![2, 4, 3, 5], vec![2, 2, 5, 3]],
            Box::new(move |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let c = g.matmul(a, b).unwrap();
                (project(g, c, 2), vec![a, b])
            }),
        ),
        (
            "add-mul-scale-sum",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let s = g.add(a, b).unwrap();
                let m = g.mul(s, a).unwrap();
                let sc = g.scale(m, -1.7);
                (project(g, sc, 3), vec![a, b])
            }),
        ),
        (
            "embed-gather",
            vec![vec![7, 5]],
            Box::new(move |g, t| {
                let table = g.leaf(t[0].clone(), true);
                let out = g.embed_gather(table, &[0, 3, 3, 6, 0, 2], &[2, 3]).unwrap();
                (project(g, out, 4), vec![table])
            }),
        ),
        (
            "rms-norm",
            vec![vec![4, 6], vec![6]],
            Box::new(move |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let gamma = g.leaf(t[1].clone(), true);
                let y = g.rms_norm(x, gamma, 1e-6).unwrap();
                (project(g, y, 5), vec![x, gamma])
            }),
        ),
        (
            "silu-softmax",
            vec![vec![3, 7]],
            Box::new(move |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let s = g.silu(x);
                let sm = g.softmax(s).unwrap();
                (project(g, sm, 6), vec![x])
            }),
        ),
        (
            "causal-softmax",
            vec![vec![2, 5, 5]],
            Box::new(move |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let sm = g.causal_softmax(x).unwrap();
                (project(g, sm, 7), vec![x])
            }),
        ),
        (
            "cross-entropy",
            vec![vec![6, 9]],
            Box::new(move |g, t| {
                let logits = g.leaf(t[0].clone(), true);
                let loss = g.softmax_cross_entropy(logits, &[0, 3, 8, 1, 1, 5]).unwrap();
                (loss, vec![logits])
            }),
        ),
        (
            "rope",
            vec![vec![2, 3, 4, 6]],
            Box::new(move |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let y = g.rope(x, 10_000.0).unwrap();
                (project(g, y, 8), vec![x])
            }),
        ),
        (
            "reshape-transpose-slice-concat",
            vec![vec![2, 3, 4], vec![2, 3, 4]],
            Box::new(move |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let at = g.transpose(a, &[1, 0, 2]).unwrap();
                let ar = g.reshape(at, &[3, 8]).unwrap();
                let asl = g.slice(ar, 1, 2, 5).unwrap();
                let bt = g.transpose(b, &[1, 2, 0]).unwrap();
                let br = g.reshape(bt, &[3, 8]).unwrap();
                let bsl = g.slice(br, 1, 0, 3).unwrap();
                let cat = g.concat(&[asl, bsl], 1).unwrap();
                (project(g, cat, 9), vec![a, b])
            }),
        ),
    ];

    for (i, (name, shapes, build)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let leaves: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| randn(&mut rng, s.iter().product(), 1.0))
            .collect();
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let tensors: Vec<TensorData<f64>> = vals
                .iter()
                .zip(shapes)
                .map(|(v, s)| TensorData::from_f64_slice(s.clone(), v))
                .collect();
            let mut g = Graph::new();
            let (loss, _) = build(&mut g, &tensors);
            g.value(loss).data()[0]
        };
        let numeric = central_diff(eval, &leaves, FD_H);
        let tensors: Vec<TensorData<f64>> = leaves
            .iter()
            .zip(shapes)
            .map(|(v, s)| TensorData::from_f64_slice(s.clone(), v))
            .collect();
        let mut g = Graph::new();
        let (loss, nodes) = build(&mut g, &tensors);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = nodes.iter().map(|&n| g.grad(n).unwrap().to_vec()).collect();
        let rep = compare(&analytic, &numeric, GRAD_TOL_TYPICAL, GRAD_REL_FLOOR);
        assert!(rep.frac_within >= 0.99, "{name}: frac {:.4}", rep.frac_within);
        assert!(rep.max_rel < GRAD_TOL_WORST, "{name}: max {:.2e}", rep.max_rel);
    }

    // Full transformer loss on a <1e4-parameter model.
    let cfg = ModelConfig::with_tuned_constants(16, 40, 8, 2, 1, 2, 50, 16, 42);
    let model = build_model(&cfg).unwrap();
    assert!(model.total_scalars() < 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (batch, seq) = (2usize, 8usize);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.data.shape().to_vec()).collect();
    let leaves: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.data.data().iter().map(|&v| v as f64).collect())
        .collect();
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tensors: Vec<TensorData<f64>> = vals
            .iter()
            .zip(&shapes)
            .map(|(v, s)| TensorData::from_f64_slice(s.clone(), v))
            .collect();
        let mut g: Graph<f64> = Graph::new();
        let fg = model.graph_forward(&mut g, &tokens, batch, seq, &tensors, false).unwrap();
        g.value(fg.loss).data()[0]
    };
    let numeric = central_diff(eval, &leaves, FD_H);
    let tensors: Vec<TensorData<f64>> = leaves
        .iter()
        .zip(&shapes)
        .map(|(v, s)| TensorData::from_f64_slice(s.clone(), v))
        .collect();
    let mut g: Graph<f64> = Graph::new();
    let fg = model.graph_forward(&mut g, &tokens, batch, seq, &tensors, false).unwrap();
    g.backward(fg.loss).unwrap();
    let analytic: Vec<Vec<f64>> = fg.param_nodes.iter().map(|&n| g.grad(n).unwrap().to_vec()).collect();
    let rep = compare(&analytic, &numeric, GRAD_TOL_TYPICAL, GRAD_REL_FLOOR);
    assert!(
        rep.frac_within >= 0.99 && rep.max_rel < GRAD_TOL_WORST,
        "full model: frac {:.5}, max {:.2e}",
        rep.frac_within,
        rep.max_rel
    );
    pass(
        3,
        "gradient correctness",
        &format!("full model: {} entries, max rel {:.2e}", rep.n, rep.max_rel),
    );
}

// ---------------------------------------------------------------------------
// Shared builders for the training criteria
// ---------------------------------------------------------------------------

fn training_spec_toml(
    seed: u64,
    kind: &str,
    total: u64,
    stable_end: u64,
    half_life: u64,
    eta: f64,
) -> String {
    format!(
        r#"
seed = {seed}
total_steps = {total}
seq_len = 64
eval_every = 0

[model]
d_m = 64
d_ff = 176
d_h = 8
n_q = 8
n_kv = 4
layers = 6
vocab = 128
d_base = 64

[schedule]
kind = "{kind}"
eta = {eta}
warmup = 50
stable_end = {stable_end}
total = {total}
half_life = {half_life}

[batch]
segments = [[1, 256]]

[corpus]
tokenizer = "byte"
[[corpus.stable]]
synth_markov = {{ seed = 42, bytes = 1000000, part = 0 }}
weight = 1.0

[eval]
synth_markov = {{ seed = 42, bytes = 34000, part = 1 }}
tokens = 32768
"#
    )
}

// ---------------------------------------------------------------------------
// 4. WSD vs Cosine ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_wsd_vs_cosine() {
    const TOTAL: u64 = 3000;
    const TOL_NATS: f64 = 0.01;
    let tmp = tempfile::tempdir().unwrap();
    let mut detail = String::new();
    for seed in [1u64, 2, 3] {
        // Equal total steps: WSD spends the last 10% in exponential decay,
        // cosine anneals over the whole period.
        let wsd_spec = ExperimentSpec::from_toml(&training_spec_toml(
            seed, "wsd", TOTAL, 2700, 60, 0.01,
        ))
        .unwrap();
        let cos_spec = ExperimentSpec::from_toml(&training_spec_toml(
            seed, "cosine", TOTAL, TOTAL, 60, 0.01,
        ))
        .unwrap();
        let wsd = run_experiment(&wsd_spec, &tmp.path().join(format!("wsd-{seed}"))).unwrap();
        let cos = run_experiment(&cos_spec, &tmp.path().join(format!("cos-{seed}"))).unwrap();
        let (lw, lc) = (
            wsd.final_eval_loss.unwrap(),
            cos.final_eval_loss.unwrap(),
        );
        println!("  seed {seed}: wsd {lw:.5}  cosine {lc:.5}  (cos-wsd {:+.5})", lc - lw);
        assert!(
            lw <= lc + TOL_NATS,
            "seed {seed}: wsd {lw} vs cosine {lc} (+{TOL_NATS} allowed); absolute values are \
             not targets, only this ordering"
        );
        let _ = write!(detail, "s{seed}:{:+.4} ", lc - lw);
    }
    pass(4, "wsd-vs-cosine ordering (3 seeds)", detail.trim());
}

// ---------------------------------------------------------------------------
// 5. Decay sufficiency
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_decay_sufficiency() {
    const DONOR_STEPS: u64 = 2000;
    let tmp = tempfile::tempdir().unwrap();
    let mut majority_monotone = 0;
    let mut majority_flat = 0;
    let mut table = String::from("\n  seed  2.5%      10%       20%\n");
    for seed in [1u64, 2, 3] {
        // All-stable donor, checkpointed at its end.
        let mut donor_spec = ExperimentSpec::from_toml(&training_spec_toml(
            seed,
            "wsd",
            DONOR_STEPS,
            DONOR_STEPS,
            50,
            0.01,
        ))
        .unwrap();
        donor_spec.checkpoint_steps = vec![DONOR_STEPS];
        let donor_dir = tmp.path().join(format!("donor-{seed}"));
        run_experiment(&donor_spec, &donor_dir).unwrap();
        let ckpt = donor_dir.join(format!("ckpt-{DONOR_STEPS:08}"));

        let mut finals = Vec::new();
        for (pct, span) in [(2.5f64, 50u64), (10.0, 200), (20.0, 400)] {
            let fork_dir = tmp.path().join(format!("fork-{seed}-{pct}"));
            let rec = fork_decay(
                &ckpt,
                ForkOptions {
                    half_life: (span / 5).max(1),
                    end_step: DONOR_STEPS + span,
                    mixture: None,
                },
                &fork_dir,
            )
            .unwrap();
            finals.push(rec.final_eval_loss.unwrap());
        }
        let _ = writeln!(
            table,
            "  {seed}     {:.5}  {:.5}  {:.5}",
            finals[0], finals[1], finals[2]
        );
        if finals[0] >= finals[1] {
            majority_monotone += 1;
        }
        if (finals[1] - finals[2]).abs() <= 0.02 {
            majority_flat += 1;
        }
    }
    println!("{table}");
    assert!(
        majority_monotone >= 2,
        "2.5% decay must trail 10% decay in at least 2 of 3 seeds ({majority_monotone}/3)"
    );
    assert!(
        majority_flat >= 2,
        "10% decay must sit within 0.02 nats of 20% in at least 2 of 3 seeds ({majority_flat}/3)"
    );
    pass(
        5,
        "decay sufficiency (2-of-3 seeds)",
        &format!("monotone {majority_monotone}/3, flat {majority_flat}/3"),
    );
}

// ---------------------------------------------------------------------------
// 6. Scaling-law fit recovery
// ---------------------------------------------------------------------------

// Desk-scale N/D grid: with unit C_N/C_D the power-law terms contribute
// O(0.1) to the loss, so both exponents stay identifiable under the 0.5%
// noise the criterion injects. (On an LLM-scale grid those terms would sit
// below the noise floor and no fitter could recover them.)
fn surface_points(c_n: f64, alpha: f64, c_d: f64, beta: f64, l0: f64) -> Vec<RunPoint> {
    let ns = [1e2, 1e3, 1e4, 1e5, 1e6];
    let ds = [1e2, 1e3, 1e4, 1e5, 1e6, 1e7];
    let mut out = Vec::new();
    for &n in &ns {
        for &d in &ds {
            out.push(RunPoint::new(
                n,
                d,
                c_n * n.powf(-alpha) + c_d * d.powf(-beta) + l0,
            ));
        }
    }
    out
}

#[test]
fn criterion_06_scaling_fit_recovery() {
    // Noiseless recovery to 1e-4.
    let truth = (1.0, 0.29, 1.0, 0.23, 1.5);
    let points = surface_points(truth.0, truth.1, truth.2, truth.3, truth.4);
    let fit = fit_nd_scaling(&points, &MultiStart::default_grid(&points)).unwrap();
    assert!(fit.converged);
    for (got, want, name) in [
        (fit.c_n, truth.0, "c_n"),
        (fit.alpha, truth.1, "alpha"),
        (fit.c_d, truth.2, "c_d"),
        (fit.beta, truth.3, "beta"),
        (fit.l0, truth.4, "l0"),
    ] {
        assert!((got - want).abs() < 1e-4, "{name}: {got} vs {want}");
    }

    // 0.5% multiplicative noise: median error over 20 seeds.
    let mut err_a = Vec::new();
    let mut err_b = Vec::new();
    let mut err_l = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let noisy: Vec<RunPoint> = points
            .iter()
            .map(|p| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                RunPoint::new(p.n_params, p.tokens, p.loss * (1.0 + 0.005 * eps))
            })
            .collect();
        let f = fit_nd_scaling(&noisy, &MultiStart::default_grid(&noisy)).unwrap();
        err_a.push((f.alpha - truth.1).abs());
        err_b.push((f.beta - truth.3).abs());
        err_l.push((f.l0 - truth.4).abs());
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let (ma, mb, ml) = (median(&mut err_a), median(&mut err_b), median(&mut err_l));
    assert!(ma <= 0.02, "median alpha error {ma}");
    assert!(mb <= 0.02, "median beta error {mb}");
    assert!(ml <= 0.01, "median l0 error {ml}");

    // compute_optimal vs brute force over 100 random converged fits.
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut max_rel = 0.0f64;
    for _ in 0..100 {
        let alpha = 0.15 + rng.gen::<f64>() * 0.3;
        let beta = 0.15 + rng.gen::<f64>() * 0.3;
        let c_n = 10f64.powf(rng.gen::<f64>() * 2.0 - 0.5);
        let c_d = 10f64.powf(rng.gen::<f64>() * 2.0 - 0.5);
        let mut f = ScalingFit {
            c_n,
            alpha,
            c_d,
            beta,
            l0: 0.5 + rng.gen::<f64>() * 2.5,
            eta_exp: 0.0,
            k2: 0.0,
            rmse: 0.0,
            n_points: 15,
            converged: true,
        };
        f.eta_exp = f.recompute_eta();
        f.k2 = f.recompute_k2();
        let c = 10f64.powf(15.0 + rng.gen::<f64>() * 6.0);
        let opt = compute_optimal(&f, c).unwrap();
        let brute = brute_force_optimal_n(&f, c, 10_000);
        let rel = (opt.n_opt - brute).abs() / brute;
        max_rel = max_rel.max(rel);
        assert!(rel < 0.01, "analytic {} vs brute {brute}", opt.n_opt);
        assert!((6.0 * opt.n_opt * opt.d_opt - c).abs() <= 4.0 * f64::EPSILON * c);
    }
    pass(
        6,
        "scaling-law fit recovery",
        &format!("noise medians a {ma:.4} b {mb:.4} l0 {ml:.4}; opt vs brute max rel {max_rel:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 7. Batch-size law recovery
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_batchsize_law() {
    // Synthetic construction: tokens(level, bs) exactly parabolic in log bs
    // with minimum at bs*(level) = 1e6 * level^-2.
    let bss = [1e4f64, 3e4, 1e5, 3e5, 1e6, 3e6, 1e7];
    let levels: Vec<f64> = (0..40).map(|i| 4.0 - i as f64 * 0.05).collect();
    let curves: Vec<BatchCurve> = bss
        .iter()
        .map(|&bs| BatchCurve {
            batch_size: bs,
            points: levels
                .iter()
                .map(|&l| {
                    let z = bs.ln() - (1e6 * l.powf(-2.0)).ln();
                    (1e7 * (4.05 - l) + 5e5 * z * z, l)
                })
                .collect(),
        })
        .collect();
    let fit = fit_optimal_batchsize(&curves).unwrap();
    let exp_err = (fit.exponent - 2.0).abs() / 2.0;
    assert!(exp_err < 0.05, "exponent {} (err {exp_err})", fit.exponent);

    // Direct evaluation of the published law at L = 3.0 (formula check,
    // not an empirical claim).
    let published = BatchSizeFit {
        coeff: 1.21e9,
        exponent: 6.24,
        levels: vec![],
        skipped_levels: vec![],
        rmse_log: 0.0,
    };
    let bs = published.batch_size_at(3.0);
    assert!(
        (bs - 1.27e6).abs() / 1.27e6 < 0.01,
        "1.21e9 / 3^6.24 = {bs}, expected ~1.27e6"
    );
    pass(
        7,
        "batch-size law recovery",
        &format!("exponent err {exp_err:.4}, law(3.0) = {bs:.4e}"),
    );
}

// ---------------------------------------------------------------------------
// 8. Quantization
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_quantization() {
    // RTN round-trip on 10^6 random values.
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (rows, cols, group) = (128usize, 8192usize, 64usize);
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen::<f32>() * 8.0 - 4.0).collect();
    assert_eq!(rows * cols, 1_048_576);
    let w = TensorData::new(vec![rows, cols], data.clone());
    let q = rtn_quantize(&w, group).unwrap();
    let back = dequantize(&q);
    let gpr = q.groups_per_row();
    let mut worst = 0.0f64;
    for r in 0..rows {
        for c in 0..cols {
            let err = (back.data()[r * cols + c] - data[r * cols + c]).abs() as f64;
            let bound = q.scales[r * gpr + c / group] / 2.0 + 1e-7;
            worst = worst.max(err / bound);
            assert!(err <= bound, "({r},{c}): err {err} > {bound}");
        }
    }

    // Calibrated quantization never loses to round-to-nearest: 100 random
    // 64x64 instances with 256 calibration samples.
    let mut improvements = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let d = 64usize;
        let wdata: Vec<f32> = (0..d * d).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let w = TensorData::new(vec![d, d], wdata);
        let x: Vec<f64> = (0..d * 256).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let calib = CalibrationSet::new(d, 256, x).unwrap();
        let (_, rep) = gptq_quantize(&w, &calib, d, 0.01).unwrap();
        assert!(
            rep.gptq_objective <= rep.rtn_objective * (1.0 + 1e-9),
            "seed {seed}: {} vs {}",
            rep.gptq_objective,
            rep.rtn_objective
        );
        if rep.gptq_objective < rep.rtn_objective {
            improvements += 1;
        }
    }

    // Diagonal Hessian (orthogonal calibration rows): identical to RTN.
    let d = 16usize;
    let mut x = vec![0.0f64; d * d];
    for i in 0..d {
        x[i * d + i] = 1.0 + i as f64 * 0.25;
    }
    let calib = CalibrationSet::new(d, d, x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let wdata: Vec<f32> = (0..8 * d).map(|_| rng.gen::<f32>() - 0.5).collect();
    let w = TensorData::new(vec![8, d], wdata);
    let (qq, rep) = gptq_quantize(&w, &calib, d, 0.0).unwrap();
    let qr = rtn_quantize(&w, d).unwrap();
    assert_eq!(qq.ints, qr.ints, "diagonal Hessian must reduce to RTN");
    assert_eq!(qq.scales, qr.scales);
    assert!((rep.gptq_objective - rep.rtn_objective).abs() < 1e-9);

    pass(
        8,
        "quantization",
        &format!(
            "rtn worst err/bound {worst:.4}; calibrated strictly better in {improvements}/100"
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Dynamics probes
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_dynamics_probes() {
    // Hand-computed vectors, exact.
    let s = grad_stats(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]).unwrap();
    assert_eq!(s.grad_inner, 0.0);
    assert_eq!(s.grad_cosine, Some(0.0));
    assert_eq!(s.d1, 0.0);
    assert_eq!(s.d2, -1.0);
    assert_eq!(s.curvature, 1.0);

    // Quadratic toy objective 0.5 p^2 under fixed-lr gradient descent: the
    // measured trajectory curvature matches the closed form of the 1-D loss
    // path at the new iterate.
    let lr = 0.1f64;
    let mut p = 1.3f64;
    let mut max_err = 0.0f64;
    for _ in 0..30 {
        let g_t = p;
        let p_next = p - lr * g_t;
        let g_t1 = p_next;
        let v = [p_next - p];
        let stats = grad_stats(&[g_t], &[g_t1], &v).unwrap();
        let analytic = 1.0 / (1.0 + p_next * p_next).powf(1.5);
        max_err = max_err.max((stats.curvature - analytic).abs());
        assert!(
            (stats.curvature - analytic).abs() < 1e-6,
            "K {} vs analytic {analytic}",
            stats.curvature
        );
        p = p_next;
    }

    // Probes on vs off: bit-identical loss trajectory.
    let tmp = tempfile::tempdir().unwrap();
    let base = training_spec_toml(5, "wsd", 40, 30, 5, 0.01);
    let mut spec = ExperimentSpec::from_toml(&base).unwrap();
    spec.schedule.warmup = 5;
    spec.model.layers = 2; // keep this check quick
    let off = run_experiment(&spec, &tmp.path().join("off")).unwrap();
    spec.probe_cadence = 1;
    let on = run_experiment(&spec, &tmp.path().join("on")).unwrap();
    let ra = read_metrics(&off.metrics_path).unwrap();
    let rb = read_metrics(&on.metrics_path).unwrap();
    for (a, b) in ra.iter().zip(&rb) {
        assert_eq!(
            a.train_loss.to_bits(),
            b.train_loss.to_bits(),
            "step {}: probes perturbed training",
            a.step
        );
    }
    let probes = rb.iter().filter(|r| r.grad_norm.is_some()).count();
    assert_eq!(probes, 39, "cadence 1 over 40 steps pairs 39 probes");
    pass(
        9,
        "dynamics probes",
        &format!("quadratic max err {max_err:.2e}; {probes} probes, trajectory bit-identical"),
    );
}

// ---------------------------------------------------------------------------
// 10. Width-stable optimal learning rate
// ---------------------------------------------------------------------------

fn sweep_spec_toml(seed: u64, d_m: usize, eta: f64, scaled: bool) -> String {
    let (d_base, scale_emb, scale_depth, init_std) = if scaled {
        (64, 12.0, 1.4, 0.1)
    } else {
        // Standard-parameterization control: width ratio 1, no embedding
        // scaling, residual multiplier 1 (scale_depth = sqrt(layers)).
        (d_m, 1.0, std::f64::consts::SQRT_2, 0.1)
    };
    format!(
        r#"
seed = {seed}
total_steps = 400
seq_len = 64
eval_every = 0

[model]
d_m = {d_m}
d_ff = {d_ff}
d_h = 8
n_q = {heads}
n_kv = {heads}
layers = 2
vocab = 128
d_base = {d_base}
scale_emb = {scale_emb}
scale_depth = {scale_depth}
init_std = {init_std}

[schedule]
kind = "wsd"
eta = {eta}
warmup = 20
stable_end = 360
total = 400
half_life = 10

[batch]
segments = [[1, 128]]

[corpus]
tokenizer = "byte"
[[corpus.stable]]
synth_markov = {{ seed = 42, bytes = 400000, part = 0 }}
weight = 1.0

[eval]
synth_markov = {{ seed = 42, bytes = 9000, part = 1 }}
tokens = 8192
"#,
        d_ff = d_m * 5 / 2,
        heads = d_m / 8,
    )
}

#[test]
fn criterion_10_lr_stability_under_width_scaling() {
    let widths = [64usize, 128, 256];
    let etas: Vec<f64> = (0..7).map(|i| 10f64.powf(-3.0 + i as f64 / 3.0)).collect();
    let tmp = tempfile::tempdir().unwrap();

    let run_grid = |seed: u64, scaled: bool| -> Vec<usize> {
        // Returns the argmin eta index per width.
        widths
            .iter()
            .map(|&w| {
                let mut best = (f64::INFINITY, 0usize);
                for (i, &eta) in etas.iter().enumerate() {
                    let spec = ExperimentSpec::from_toml(&sweep_spec_toml(seed, w, eta, scaled))
                        .unwrap();
                    let dir = tmp.path().join(format!(
                        "{}-w{w}-e{i}-s{seed}",
                        if scaled { "mup" } else { "sp" }
                    ));
                    let loss = match run_experiment(&spec, &dir) {
                        Ok(rec) => rec.final_eval_loss.unwrap(),
                        // Diverged runs lose the argmin by definition.
                        Err(_) => f64::INFINITY,
                    };
                    if loss < best.0 {
                        best = (loss, i);
                    }
                }
                println!(
                    "  {} seed {seed} width {w}: best eta {:.4e} (loss {:.5})",
                    if scaled { "scaled " } else { "control" },
                    etas[best.1],
                    best.0
                );
                best.1
            })
            .collect()
    };

    let mut ok_seeds = 0;
    let mut shifts = Vec::new();
    for seed in [1u64, 2, 3] {
        let argmins = run_grid(seed, true);
        let shift = argmins.iter().max().unwrap() - argmins.iter().min().unwrap();
        shifts.push(shift);
        if shift <= 1 {
            ok_seeds += 1;
        }
    }
    // Control (reported, not asserted): standard parameterization, one seed.
    let control = run_grid(1, false);
    let control_shift = control.iter().max().unwrap() - control.iter().min().unwrap();
    println!(
        "  width-scaled argmin shifts per seed: {shifts:?}; control (std param) shift: {control_shift}"
    );
    assert!(
        ok_seeds >= 2,
        "argmin learning rate must move <= 1 grid step across widths in 2 of 3 seeds; shifts {shifts:?}"
    );
    pass(
        10,
        "lr stability under width scaling (2-of-3 seeds)",
        &format!("shifts {shifts:?}, control shift {control_shift}"),
    );
}

// ---------------------------------------------------------------------------
// 11. Determinism and fork-off
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_determinism_and_fork() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::from_toml(&training_spec_toml(9, "wsd", 60, 60, 6, 0.01)).unwrap();
    spec.schedule.warmup = 10;
    spec.model.layers = 2;
    spec.checkpoint_steps = vec![30];
    let donor = run_experiment(&spec, &tmp.path().join("donor")).unwrap();
    let ckpt = tmp.path().join("donor/ckpt-00000030");

    // Restore-and-continue reproduces the donor CSV byte-exactly.
    let resumed = resume_experiment(&ckpt, &tmp.path().join("resumed")).unwrap();
    let donor_text = std::fs::read_to_string(&donor.metrics_path).unwrap();
    let resumed_text = std::fs::read_to_string(&resumed.metrics_path).unwrap();
    let donor_suffix: Vec<&str> = donor_text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|v| v.parse::<u64>().ok())
                .is_some_and(|s| s > 30)
        })
        .collect();
    let resumed_rows: Vec<&str> = resumed_text.lines().skip(1).collect();
    assert_eq!(donor_suffix, resumed_rows, "continued CSV must match donor bytes");

    // Fork-off: first step at exactly eta.
    let fork = fork_decay(
        &ckpt,
        ForkOptions {
            half_life: 5,
            end_step: 50,
            mixture: None,
        },
        &tmp.path().join("fork"),
    )
    .unwrap();
    let rows = read_metrics(&fork.metrics_path).unwrap();
    assert_eq!(rows[0].step, 31);
    assert_eq!(rows[0].lr, spec.schedule.eta, "fork resumes at the plateau rate");
    pass(
        11,
        "determinism and fork-off",
        &format!("{} continued rows byte-identical; fork lr {}", resumed_rows.len(), rows[0].lr),
    );
}

// ---------------------------------------------------------------------------
// 12. BPE
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_bpe() {
    use tinylab_core::bpe::{train_bpe, TokenizerModel};

    // Round-trip identity on random byte strings.
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let corpus: Vec<u8> = (0..4000).map(|_| rng.gen::<u8>() % 64 + 32).collect();
    let model = train_bpe(&corpus, 400).unwrap();
    for len in [0usize, 1, 17, 256, 1000] {
        let sample: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let ids = model.encode(&sample);
        assert_eq!(model.decode(&ids).unwrap(), sample, "len {len}");
    }

    // The repeated-"aaaa" trace, exact. (Published compression-table values
    // are not reproducible here: that corpus is unavailable.)
    let traced = train_bpe(&b"aaaa".repeat(2), 258).unwrap();
    assert_eq!(traced.merges(), &[(97, 97), (256, 256)]);
    assert_eq!(traced.encode(b"aaaa"), vec![257]);
    assert_eq!(traced.encode(b"aaaaa"), vec![257, 97]);
    let rate = traced.compression_rate(&b"aaaa".repeat(25)).unwrap();
    assert_eq!(rate, 4.0);

    // Compression rate >= 1 universally (byte-level base alphabet).
    let ident = TokenizerModel::byte_identity();
    assert_eq!(ident.compression_rate(b"any bytes").unwrap(), 1.0);
    for probe in [&corpus[..], b"mississippi", &[0u8, 1, 2][..]] {
        assert!(model.compression_rate(probe).unwrap() >= 1.0);
    }
    pass(12, "bpe", &format!("trace exact; trained rate on corpus {:.3}", model.compression_rate(&corpus).unwrap()));
}
