//! Finite-difference verification of every differentiable op and of the full
//! transformer loss, in f64 shadow mode: central differences with h = 1e-5,
//! relative error under 1e-4 on 99% of entries and under 1e-3 on all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylab_core::model::{build_model, ModelConfig};
use tinylab_core::tensor::gradcheck::{central_diff, compare};
use tinylab_core::{Graph, TensorData};

const H: f64 = 1e-5;
const TOL_TYPICAL: f64 = 1e-4;
const TOL_WORST: f64 = 1e-3;
/// Relative-error denominator floor; finite-difference noise is ~1e-10, so
/// entries below this magnitude compare against the floor instead.
const REL_FLOOR: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

/// Check one op: `build` maps leaf values to a scalar loss inside a fresh
/// graph, returning (graph, loss node, leaf nodes).
fn check_op<F>(name: &str, leaves: &[Vec<f64>], shapes: &[Vec<usize>], build: F)
where
    F: Fn(&mut Graph<f64>, &[TensorData<f64>]) -> (tinylab_core::NodeId, Vec<tinylab_core::NodeId>),
{
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
    let numeric = central_diff(eval, leaves, H);

    let tensors: Vec<TensorData<f64>> = leaves
        .iter()
        .zip(shapes)
        .map(|(v, s)| TensorData::from_f64_slice(s.clone(), v))
        .collect();
    let mut g = Graph::new();
    let (loss, nodes) = build(&mut g, &tensors);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&n| g.grad(n).expect("missing grad").to_vec())
        .collect();

    let report = compare(&analytic, &numeric, TOL_TYPICAL, REL_FLOOR);
    assert!(
        report.frac_within >= 0.99,
        "{name}: only {:.4} of {} entries within {TOL_TYPICAL}",
        report.frac_within,
        report.n
    );
    assert!(
        report.max_rel < TOL_WORST,
        "{name}: max rel err {}",
        report.max_rel
    );
}

/// Projects a tensor to a scalar with fixed pseudo-random weights so every
/// output entry feeds the loss differently.
fn project(g: &mut Graph<f64>, node: tinylab_core::NodeId, seed: u64) -> tinylab_core::NodeId {
    let shape = g.value(node).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = TensorData::from_f64_slice(shape, &randn(&mut rng, n, 1.0));
    let wleaf = g.leaf(w, false);
    let prod = g.mul(node, wleaf).unwrap();
    g.sum(prod)
}

#[test]
fn matmul_weight_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let leaves = vec![randn(&mut rng, 2 * 3 * 4, 1.0), randn(&mut rng, 4 * 5, 1.0)];
    check_op(
        "matmul[.. x 2d]",
        &leaves,
        &[vec![2, 3, 4], vec![4, 5]],
        |g, t| {
            let a = g.leaf(t[0].clone(), true);
            let b = g.leaf(t[1].clone(), true);
            let c = g.matmul(a, b).unwrap();
            (project(g, c, 10), vec![a, b])
        },
    );
}

#[test]
fn matmul_grouped_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // a: [2, 4, 3, 5], b: [2, 2, 5, 3] -> group 2
    let leaves = vec![
        randn(&mut rng, 2 * 4 * 3 * 5, 1.0),
        randn(&mut rng, 2 * 2 * 5 * 3, 1.0),
    ];
    check_op(
        "matmul[grouped]",
        &leaves,
        &[vec![2, 4, 3, 5], vec![2, 2, 5, 3]],
        |g, t| {
            let a = g.leaf(t[0].clone(), true);
            let b = g.leaf(t[1].clone(), true);
            let c = g.matmul(a, b).unwrap();
            (project(g, c, 11), vec![a, b])
        },
    );
}

#[test]
fn add_mul_scale_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = vec![randn(&mut rng, 12, 1.0), randn(&mut rng, 12, 1.0)];
    check_op("add+mul+scale", &leaves, &[vec![3, 4], vec![3, 4]], |g, t| {
        let a = g.leaf(t[0].clone(), true);
        let b = g.leaf(t[1].clone(), true);
        let s = g.add(a, b).unwrap();
        let m = g.mul(s, a).unwrap();
        let sc = g.scale(m, -1.7);
        (project(g, sc, 12), vec![a, b])
    });
}

#[test]
fn embedding_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let leaves = vec![randn(&mut rng, 7 * 5, 1.0)];
    check_op("embed_gather", &leaves, &[vec![7, 5]], |g, t| {
        let table = g.leaf(t[0].clone(), true);
        // Repeats exercise grad accumulation into shared rows.
        let out = g.embed_gather(table, &[0, 3, 3, 6, 0, 2], &[2, 3]).unwrap();
        (project(g, out, 13), vec![table])
    });
}

#[test]
fn rms_norm_inputs_and_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = vec![randn(&mut rng, 4 * 6, 1.0), randn(&mut rng, 6, 0.5)];
    check_op("rms_norm", &leaves, &[vec![4, 6], vec![6]], |g, t| {
        let x = g.leaf(t[0].clone(), true);
        let gamma = g.leaf(t[1].clone(), true);
        let y = g.rms_norm(x, gamma, 1e-6).unwrap();
        (project(g, y, 14), vec![x, gamma])
    });
}

#[test]
fn silu_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let leaves = vec![randn(&mut rng, 3 * 7, 2.0)];
    check_op("silu+softmax", &leaves, &[vec![3, 7]], |g, t| {
        let x = g.leaf(t[0].clone(), true);
        let s = g.silu(x);
        let sm = g.softmax(s).unwrap();
        (project(g, sm, 15), vec![x])
    });
}

#[test]
fn causal_softmax_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let leaves = vec![randn(&mut rng, 2 * 5 * 5, 1.5)];
    check_op("causal_softmax", &leaves, &[vec![2, 5, 5]], |g, t| {
        let x = g.leaf(t[0].clone(), true);
        let sm = g.causal_softmax(x).unwrap();
        (project(g, sm, 16), vec![x])
    });
}

#[test]
fn cross_entropy_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let leaves = vec![randn(&mut rng, 6 * 9, 2.0)];
    check_op("softmax_cross_entropy", &leaves, &[vec![6, 9]], |g, t| {
        let logits = g.leaf(t[0].clone(), true);
        let loss = g
            .softmax_cross_entropy(logits, &[0, 3, 8, 1, 1, 5])
            .unwrap();
        (loss, vec![logits])
    });
}

#[test]
fn rope_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let leaves = vec![randn(&mut rng, 2 * 3 * 4 * 6, 1.0)];
    check_op("rope", &leaves, &[vec![2, 3, 4, 6]], |g, t| {
        let x = g.leaf(t[0].clone(), true);
        let y = g.rope(x, 10000.0).unwrap();
        (project(g, y, 17), vec![x])
    });
}

#[test]
fn reshape_transpose_slice_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let leaves = vec![randn(&mut rng, 2 * 3 * 4, 1.0), randn(&mut rng, 2 * 3 * 4, 1.0)];
    check_op(
        "reshape+transpose+slice+concat",
        &leaves,
        &[vec![2, 3, 4], vec![2, 3, 4]],
        |g, t| {
            let a = g.leaf(t[0].clone(), true);
            let b = g.leaf(t[1].clone(), true);
            let at = g.transpose(a, &[1, 0, 2]).unwrap(); // [3, 2, 4]
            let ar = g.reshape(at, &[3, 8]).unwrap();
            let asl = g.slice(ar, 1, 2, 5).unwrap(); // [3, 5]
            let bt = g.transpose(b, &[1, 2, 0]).unwrap(); // [3, 4, 2]
            let br = g.reshape(bt, &[3, 8]).unwrap();
            let bsl = g.slice(br, 1, 0, 3).unwrap(); // [3, 3]
            let cat = g.concat(&[asl, bsl], 1).unwrap(); // [3, 8]
            (project(g, cat, 18), vec![a, b])
        },
    );
}

#[test]
fn full_transformer_loss_gradient() {
    // ~6.3k parameters, all leaves checked against central differences.
    let cfg = ModelConfig::with_tuned_constants(16, 40, 8, 2, 1, 2, 50, 16, 42);
    let model = build_model(&cfg).unwrap();
    assert!(model.total_scalars() < 10_000, "model must stay under 1e4 params");

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (batch, seq) = (2usize, 8usize);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab)).collect();

    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|p| p.data.shape().to_vec())
        .collect();
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
        let fg = model
            .graph_forward(&mut g, &tokens, batch, seq, &tensors, false)
            .unwrap();
        g.value(fg.loss).data()[0]
    };
    let numeric = central_diff(eval, &leaves, H);

    let tensors: Vec<TensorData<f64>> = leaves
        .iter()
        .zip(&shapes)
        .map(|(v, s)| TensorData::from_f64_slice(s.clone(), v))
        .collect();
    let mut g: Graph<f64> = Graph::new();
    let fg = model
        .graph_forward(&mut g, &tokens, batch, seq, &tensors, false)
        .unwrap();
    g.backward(fg.loss).unwrap();
    let analytic: Vec<Vec<f64>> = fg
        .param_nodes
        .iter()
        .map(|&n| g.grad(n).expect("param grad").to_vec())
        .collect();

    let report = compare(&analytic, &numeric, TOL_TYPICAL, REL_FLOOR);
    assert!(
        report.frac_within >= 0.99,
        "full model: {:.5} of {} entries within {TOL_TYPICAL} (max {})",
        report.frac_within,
        report.n,
        report.max_rel
    );
    assert!(
        report.max_rel < TOL_WORST,
        "full model: max rel err {}",
        report.max_rel
    );
}

#[test]
fn backward_is_deterministic() {
    let cfg = ModelConfig::with_tuned_constants(16, 40, 8, 2, 1, 2, 50, 16, 42);
    let model = build_model(&cfg).unwrap();
    let tokens: Vec<usize> = vec![1, 2, 3, 4, 5, 6, 7, 8];
    let run = || -> Vec<Vec<f32>> {
        let mut g: Graph<f32> = Graph::new();
        let fg = model
            .graph_forward(&mut g, &tokens, 1, 8, &model.param_values(), false)
            .unwrap();
        g.backward(fg.loss).unwrap();
        fg.param_nodes
            .iter()
            .map(|&n| g.grad(n).unwrap().to_vec())
            .collect()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "two identical backward passes must match bit-for-bit");
}
