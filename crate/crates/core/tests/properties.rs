//! Property tests for the geometry and operator invariants.

use proptest::prelude::*;

use maxsr::attention::{adaptive_block_attention, adaptive_grid_attention, AttentionParams};
use maxsr::geometry::{
    adaptive_footage, crop_to_original, grid_partition, grid_reverse, pad_for_plan,
    window_partition, window_reverse, AttentionMode,
};
use maxsr::tensor::Tensor;
use maxsr::train::{dihedral_inverse, dihedral_transform};

fn mode_strategy() -> impl Strategy<Value = AttentionMode> {
    prop_oneof![
        Just(AttentionMode::AdaptiveExact),
        Just(AttentionMode::AdaptiveApprox),
        (1usize..9).prop_map(AttentionMode::Fixed),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_round_trips_bit_exact(
        h in 1usize..40,
        w in 1usize..40,
        mode in mode_strategy(),
        seed in any::<u64>(),
    ) {
        let mut rng = maxsr::rng::Rng::new(seed);
        let x = Tensor::from_vec(
            (0..2 * h * w).map(|_| rng.uniform(-3.0, 3.0) as f32).collect(),
            &[1, 2, h, w],
        ).unwrap();
        let plan = adaptive_footage(h, w, mode).unwrap();
        let padded = pad_for_plan(&x, &plan).unwrap();

        let t = window_partition(&padded, &plan).unwrap();
        let r = window_reverse(&t, &plan).unwrap();
        prop_assert_eq!(r.data(), padded.data());

        let t = grid_partition(&padded, &plan).unwrap();
        let r = grid_reverse(&t, &plan).unwrap();
        prop_assert_eq!(r.data(), padded.data());

        let c = crop_to_original(&r, &plan).unwrap();
        prop_assert_eq!(c.data(), x.data());
    }

    #[test]
    fn pad_preserves_sum_and_zeros_remainder(
        h in 1usize..32,
        w in 1usize..32,
        mode in mode_strategy(),
    ) {
        let x = Tensor::from_vec((0..h * w).map(|i| 1.0 + (i % 7) as f32).collect(), &[1, 1, h, w]).unwrap();
        let plan = adaptive_footage(h, w, mode).unwrap();
        let p = pad_for_plan(&x, &plan).unwrap();
        let sum_in: f32 = x.data().iter().sum();
        let sum_out: f32 = p.data().iter().sum();
        prop_assert_eq!(sum_in, sum_out);
        // everything outside the original extents is exactly zero
        for y in 0..plan.pad_h {
            for xx in 0..plan.pad_w {
                if y >= h || xx >= w {
                    prop_assert_eq!(p.data()[y * plan.pad_w + xx], 0.0);
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_permutes_values(
        c in 1usize..4,
        r in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let numel = c * r * r * h * w;
        let vals: Vec<f32> = (0..numel).map(|i| i as f32).collect();
        let x = Tensor::from_vec(vals.clone(), &[1, c * r * r, h, w]).unwrap();
        let y = x.pixel_shuffle(r).unwrap();
        prop_assert_eq!(y.shape(), &[1, c, h * r, w * r]);
        let mut got = y.data().to_vec();
        got.sort_by(f32::total_cmp);
        prop_assert_eq!(got, vals);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30f64..30.0, 1..48)) {
        let n = values.len();
        let x = Tensor::from_vec(values, &[n]).unwrap();
        let s = x.softmax_lastdim().unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dihedral_code_then_inverse_is_identity(
        h in 1usize..7,
        w in 1usize..7,
        code in 0u8..8,
    ) {
        let x = Tensor::from_vec(
            (0..3 * h * w).map(|i| (i as f32 * 0.37).sin()).collect(),
            &[3, h, w],
        ).unwrap();
        let t = dihedral_transform(&x, code).unwrap();
        let back = dihedral_transform(&t, dihedral_inverse(code)).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert_eq!(back.data(), x.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Shape preservation across the footage range attention must handle.
    #[test]
    fn attention_preserves_shape(
        h in 1usize..34,
        w in 1usize..34,
        mode in mode_strategy(),
        grid in any::<bool>(),
    ) {
        let width = 4;
        let mut rng = maxsr::rng::Rng::new(99);
        let mut mk = |shape: &[usize]| {
            let numel: usize = shape.iter().product();
            Tensor::from_vec((0..numel).map(|_| rng.uniform(-0.4, 0.4) as f32).collect(), shape).unwrap()
        };
        let params = AttentionParams {
            heads: 2,
            qkv_weight: mk(&[width, 3 * width]),
            qkv_bias: mk(&[3 * width]),
            out_weight: mk(&[width, width]),
            out_bias: mk(&[width]),
            rpe: None,
        };
        let x = mk(&[1, width, h, w]);
        let y = if grid {
            adaptive_grid_attention(&x, &params, mode, false).unwrap()
        } else {
            adaptive_block_attention(&x, &params, mode, false).unwrap()
        };
        prop_assert_eq!(y.shape(), x.shape());
    }
}
