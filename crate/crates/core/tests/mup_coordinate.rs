//! Width-stability of activations at initialization: with the scaling rules
//! on, the residual-stream RMS after every block stays within a factor of 2
//! across widths 64..512 for a fixed input distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylab_core::model::{build_model, ModelConfig};
use tinylab_core::Graph;

fn block_rms_at_width(d_m: usize, seed: u64) -> Vec<f64> {
    let d_h = 8;
    let cfg = ModelConfig::with_tuned_constants(
        d_m,
        d_m * 5 / 2,
        d_h,
        d_m / d_h,
        d_m / d_h,
        2,
        64,
        64,
        seed,
    );
    let model = build_model(&cfg).unwrap();
    let (batch, seq) = (4usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let mut g: Graph<f32> = Graph::new();
    let fg = model
        .graph_forward(&mut g, &tokens, batch, seq, &model.param_values(), true)
        .unwrap();
    fg.block_outputs
        .iter()
        .map(|&n| g.value(n).rms())
        .collect()
}

#[test]
fn block_output_rms_stable_across_widths() {
    let widths = [64usize, 128, 256, 512];
    let seeds = [3u64, 5, 9];
    for block in 0..2 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        let mut all = Vec::new();
        for &w in &widths {
            let mean: f64 = seeds
                .iter()
                .map(|&s| block_rms_at_width(w, s)[block])
                .sum::<f64>()
                / seeds.len() as f64;
            all.push((w, mean));
            lo = lo.min(mean);
            hi = hi.max(mean);
        }
        assert!(
            hi / lo < 2.0,
            "block {block}: RMS spread {:.3}x across widths ({all:?})",
            hi / lo
        );
    }
}

#[test]
fn embedding_output_rms_is_width_free() {
    // scale_emb * init_std = 1.2 regardless of width.
    for &w in &[64usize, 256] {
        let d_h = 8;
        let cfg = ModelConfig::with_tuned_constants(
            w,
            w * 5 / 2,
            d_h,
            w / d_h,
            w / d_h,
            2,
            64,
            64,
            7,
        );
        let model = build_model(&cfg).unwrap();
        let tokens: Vec<usize> = (0..64).map(|i| i % 64).collect();
        let mut g: Graph<f32> = Graph::new();
        let fg = model
            .graph_forward(&mut g, &tokens, 4, 16, &model.param_values(), true)
            .unwrap();
        let rms = g.value(fg.embed_scaled).rms();
        assert!(
            (rms - 1.2).abs() < 0.25,
            "width {w}: embed RMS {rms} should hug 1.2"
        );
    }
}
