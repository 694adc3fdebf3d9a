//! Property-based invariants for the synthesizer, metrics and mask algebra.

use attnad::metrics::{auroc, ScoreRecord};
use attnad::synth::{
    apply_tile_permutation, draw_tile_permutation, make_cut_anomaly, make_prime_anomaly,
    replay_recipe, AugmentationConfig,
};
use attnad::types::{AttentionMask, FeatureMap, ImageTensor};
use ndarray::{s, Array4};
use proptest::prelude::*;

fn arb_image(n: usize, c: usize, hw: usize) -> impl Strategy<Value = ImageTensor<f32>> {
    proptest::collection::vec(0.0f32..=1.0, n * c * hw * hw).prop_map(move |v| {
        ImageTensor::new(Array4::from_shape_vec((n, c, hw, hw), v).unwrap()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perm_preserves_pixel_multiset(img in arb_image(1, 3, 12), seed in any::<u64>(), grid in 2u32..=4) {
        let mut rng = attnad::rng::stream(seed, &[1]);
        let p = draw_tile_permutation(&mut rng, grid);
        let out = apply_tile_permutation(&img, grid, &p).unwrap();
        for c in 0..3 {
            let mut a: Vec<f32> = img.data().slice(s![0, c, .., ..]).iter().cloned().collect();
            let mut b: Vec<f32> = out.data().slice(s![0, c, .., ..]).iter().cloned().collect();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn recipes_replay_bit_exactly(img in arb_image(1, 3, 16), seed in any::<u64>()) {
        let cfg = AugmentationConfig { seed, ..Default::default() };
        let prime = make_prime_anomaly(&img, &cfg).unwrap();
        let (ri, rm) = replay_recipe(&img, &prime.recipe).unwrap();
        prop_assert_eq!(ri.data(), prime.image.data());
        prop_assert_eq!(rm.data(), prime.mask.data());

        let cut = make_cut_anomaly(&img, &prime, &cfg).unwrap();
        let (ci, cm) = replay_recipe(&img, &cut.recipe).unwrap();
        prop_assert_eq!(ci.data(), cut.image.data());
        prop_assert_eq!(cm.data(), cut.mask.data());
    }

    #[test]
    fn auroc_invariant_under_positive_affine(
        scores in proptest::collection::vec(-3.0f64..3.0, 8..40),
        labels in proptest::collection::vec(0u8..=1, 8..40),
        a in 0.01f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let n = scores.len().min(labels.len());
        let recs: Vec<ScoreRecord> = (0..n)
            .map(|i| ScoreRecord::simple(format!("{i}"), labels[i], scores[i]))
            .collect();
        let has_both = recs.iter().any(|r| r.label == 0) && recs.iter().any(|r| r.label == 1);
        prop_assume!(has_both);
        let base = auroc(&recs).unwrap();
        let mapped: Vec<ScoreRecord> = recs
            .iter()
            .map(|r| ScoreRecord::simple(r.sample_id.clone(), r.label, a * r.score + b))
            .collect();
        prop_assert!((auroc(&mapped).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn mask_algebra_on_binary_masks_is_bit_exact(
        feats in proptest::collection::vec(-1.0f32..1.0, 2 * 3 * 36),
        bits1 in proptest::collection::vec(proptest::bool::ANY, 2 * 36),
        bits2 in proptest::collection::vec(proptest::bool::ANY, 2 * 36),
    ) {
        let f = FeatureMap::new(Array4::from_shape_vec((2, 3, 6, 6), feats).unwrap());
        let to_mask = |bits: &[bool]| {
            AttentionMask::<f32>::new(
                Array4::from_shape_vec(
                    (2, 1, 6, 6),
                    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                )
                .unwrap(),
            )
            .unwrap()
        };
        let a1 = to_mask(&bits1);
        let a2 = to_mask(&bits2);
        // identity and annihilation
        let ones = AttentionMask::<f32>::ones(2, 6, 6);
        let zeros = AttentionMask::<f32>::zeros(2, 6, 6);
        prop_assert_eq!(&attnad::adgan::mask_features(&f, &ones).unwrap().data, &f.data);
        prop_assert!(attnad::adgan::mask_features(&f, &zeros).unwrap().data.iter().all(|&v| v == 0.0));
        // composition
        let a12 = AttentionMask::new(a1.data() * a2.data()).unwrap();
        let lhs = attnad::adgan::mask_features(&f, &a12).unwrap();
        let rhs = attnad::adgan::mask_features(&attnad::adgan::mask_features(&f, &a1).unwrap(), &a2).unwrap();
        prop_assert_eq!(lhs.data, rhs.data);
    }
}
