//! Property tests over randomized inputs: index-table bijections, structural
//! equalities of the shuffle operators, metric invariances, and mask-head
//! algebra.

use proptest::prelude::*;

use s1e::autograd::{Graph, Tensor};
use s1e::metrics::{aggregate, binarize, iou, upsample_mask, IouRecord};
use s1e::seg::predict_mask;
use s1e::shuffle::{
    pixel_shuffle_compress, pixel_unshuffle_expand, scanning_table, shuffle_concat_table,
    unshuffle_place_table, upsample_table, GridFeatures, Mlp, ShuffleSpec,
};

fn is_permutation(table: &[usize]) -> bool {
    let mut seen = vec![false; table.len()];
    table.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_tables_are_permutations(hb in 1usize..5, wb in 1usize..5, d0 in 1usize..4) {
        let s = 2;
        let (h, w) = (hb * s, wb * s);
        let fwd = shuffle_concat_table(h, w, d0, s);
        prop_assert_eq!(fwd.len(), h * w * d0);
        prop_assert!(is_permutation(&fwd));
        let back = unshuffle_place_table(h / s, w / s, d0, s);
        prop_assert!(is_permutation(&back));
        for (i, &b) in back.iter().enumerate() {
            prop_assert_eq!(fwd[b], i);
        }
    }

    #[test]
    fn scanning_and_upsample_tables_cover_sources(hb in 1usize..4, wb in 1usize..4) {
        let s = 2;
        let (h, w) = (hb * s, wb * s);
        // every source element appears at least once in both tables
        for table in [scanning_table(h, w, 1, s), upsample_table(h, w, 1, s)] {
            let mut hit = vec![false; h * w];
            for &i in &table {
                hit[i] = true;
            }
            prop_assert!(hit.iter().all(|&v| v));
        }
    }

    #[test]
    fn roundtrip_holds_for_random_values(values in proptest::collection::vec(-100.0f64..100.0, 32)) {
        let (h, w, d0, s) = (4usize, 4usize, 2usize, 2usize);
        let spec = ShuffleSpec::new(s, d0, s * s * d0);
        let f = GridFeatures::new(h, w, d0, Tensor::new(&[h * w, d0], values.clone()).unwrap()).unwrap();
        let mut g = Graph::inference();
        let down = pixel_shuffle_compress(&mut g, &f, &spec, &Mlp::identity(s * s * d0)).unwrap();
        let up = pixel_unshuffle_expand(&mut g, &down, &spec, &Mlp::identity(s * s * d0)).unwrap();
        prop_assert_eq!(up.data.data(), &values[..]);
    }

    #[test]
    fn binarize_matches_definition(logits in proptest::collection::vec(-5.0f64..5.0, 1..64), thr in -1.0f64..1.0) {
        let mask = binarize(&logits, thr);
        for (m, &l) in mask.iter().zip(&logits) {
            prop_assert_eq!(*m, l > thr);
        }
    }

    #[test]
    fn iou_invariances(pred in proptest::collection::vec(any::<bool>(), 16), gt in proptest::collection::vec(any::<bool>(), 16)) {
        let r = iou(&pred, &gt).unwrap();
        prop_assert!(r.intersection <= r.union);
        prop_assert!((0.0..=1.0).contains(&r.iou));
        // symmetry
        let r2 = iou(&gt, &pred).unwrap();
        prop_assert_eq!(r.iou, r2.iou);
        // scale invariance under nearest upsampling
        let up_p = upsample_mask(&pred, 4, 2);
        let up_g = upsample_mask(&gt, 4, 2);
        prop_assert_eq!(iou(&up_p, &up_g).unwrap().iou, r.iou);
    }

    #[test]
    fn aggregate_means_bound_extremes(ious in proptest::collection::vec(0u64..50, 1..12)) {
        let records: Vec<IouRecord> = ious
            .iter()
            .map(|&i| IouRecord { intersection: i, union: 50, iou: i as f64 / 50.0 })
            .collect();
        let (ciou, giou) = aggregate(&records).unwrap();
        let lo = records.iter().map(|r| r.iou).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.iou).fold(0.0f64, f64::max);
        prop_assert!(giou >= lo - 1e-12 && giou <= hi + 1e-12);
        // equal unions make the two aggregates coincide
        prop_assert!((ciou - giou).abs() < 1e-12);
    }

    #[test]
    fn mask_head_is_linear_in_the_query(scale in 0.1f64..10.0, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (8usize, 6usize);
        let img: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grid = GridFeatures::new(2, 4, d, Tensor::new(&[n, d], img).unwrap()).unwrap();
        let mut g = Graph::inference();
        let base = predict_mask(&mut g, &grid, &Tensor::new(&[1, d], q.clone()).unwrap()).unwrap();
        let scaled_q: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let scaled = predict_mask(&mut g, &grid, &Tensor::new(&[1, d], scaled_q).unwrap()).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            prop_assert!((b - a * scale).abs() <= 1e-9 * (1.0 + a.abs() * scale));
            // positive scaling never flips the thresholded mask
            prop_assert_eq!(*a > 0.0, *b > 0.0);
        }
    }

    #[test]
    fn mask_head_is_linear_in_the_image_features(scale in 0.1f64..10.0, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (6usize, 4usize);
        let img: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = Tensor::new(&[1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::inference();
        let base_grid = GridFeatures::new(2, 3, d, Tensor::new(&[n, d], img.clone()).unwrap()).unwrap();
        let base = predict_mask(&mut g, &base_grid, &q).unwrap();
        let scaled_grid = GridFeatures::new(2, 3, d, Tensor::new(&[n, d], img.iter().map(|v| v * scale).collect()).unwrap()).unwrap();
        let scaled = predict_mask(&mut g, &scaled_grid, &q).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            prop_assert!((b - a * scale).abs() <= 1e-9 * (1.0 + a.abs() * scale));
        }
    }
}
