//! Property tests for the pure-function contracts.

use proptest::prelude::*;
use tinylab_core::bpe::{train_bpe, TokenizerModel};
use tinylab_core::quant::{dequantize, rtn_quantize};
use tinylab_core::schedule::{BatchRamp, ScheduleSpec};
use tinylab_core::TensorData;

proptest! {
    #[test]
    fn schedule_values_stay_in_range(
        eta in 1e-4f64..1.0,
        warmup in 1u64..50,
        stable_extra in 0u64..400,
        decay_extra in 1u64..200,
        half_life in 1u64..500,
        probe in 0u64..1000,
    ) {
        let stable = warmup + stable_extra;
        let total = stable + decay_extra;
        let spec = ScheduleSpec::wsd(eta, warmup, stable, total, half_life);
        spec.validate().unwrap();
        let s = 1 + probe % total;
        let lr = spec.lr_at(s).unwrap();
        prop_assert!(lr > 0.0 && lr <= eta, "lr {lr} outside (0, {eta}]");
        // Purity: same inputs, bit-identical output.
        prop_assert_eq!(lr.to_bits(), spec.lr_at(s).unwrap().to_bits());
    }

    #[test]
    fn cosine_variants_stay_in_range(
        eta in 1e-4f64..1.0,
        period_extra in 10u64..500,
        probe in 0u64..2000,
        looped in any::<bool>(),
    ) {
        let warmup = 5u64;
        let period = warmup + period_extra;
        let total = period * 3;
        let spec = if looped {
            ScheduleSpec::cosine_loop(eta, warmup, period, total)
        } else {
            ScheduleSpec::cosine(eta, warmup, period, total)
        };
        let s = 1 + probe % total;
        let lr = spec.lr_at(s).unwrap();
        prop_assert!(lr > 0.0 && lr <= eta * (1.0 + 1e-12));
    }

    #[test]
    fn batch_ramp_is_monotone_lookup(
        sizes in prop::collection::vec(1u64..10_000_000, 1..6),
        probe in 1u64..100_000,
    ) {
        let segments: Vec<(u64, u64)> = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| (1 + (i as u64) * 1000, s))
            .collect();
        let ramp = BatchRamp { segments: segments.clone() };
        ramp.validate().unwrap();
        let got = ramp.tokens_at(probe);
        let want = segments
            .iter()
            .rev()
            .find(|(start, _)| *start <= probe)
            .map(|&(_, s)| s)
            .unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn bpe_round_trip_identity(data in prop::collection::vec(any::<u8>(), 0..400)) {
        let model = TokenizerModel::byte_identity();
        let ids = model.encode(&data);
        prop_assert_eq!(ids.len(), data.len());
        prop_assert_eq!(model.decode(&ids).unwrap(), data);
    }

    #[test]
    fn bpe_trained_round_trip_and_rate(
        corpus in prop::collection::vec(prop::sample::select(vec![b'a', b'b', b'c', b' ']), 20..300),
        sample in prop::collection::vec(any::<u8>(), 1..200),
    ) {
        let model = train_bpe(&corpus, 280).unwrap();
        // Any byte string round-trips, trained or not.
        let ids = model.encode(&sample);
        prop_assert_eq!(model.decode(&ids).unwrap(), sample);
        // Compression rate is at least 1 for byte-level models.
        let rate = model.compression_rate(&corpus).unwrap();
        prop_assert!(rate >= 1.0);
    }

    #[test]
    fn rtn_round_trip_error_bounded(
        vals in prop::collection::vec(-50.0f32..50.0, 16),
    ) {
        let w = TensorData::new(vec![1, 16], vals.clone());
        let q = rtn_quantize(&w, 8).unwrap();
        let back = dequantize(&q);
        for (c, (&a, &b)) in vals.iter().zip(back.data()).enumerate() {
            let scale = q.scales[c / 8];
            prop_assert!(
                ((a - b).abs() as f64) <= scale / 2.0 + 1e-7,
                "idx {c}: {a} vs {b} scale {scale}"
            );
        }
    }
}
