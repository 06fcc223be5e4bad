//! Segmentation metrics: binarization, per-sample IoU, cumulative and mean
//! aggregation, the per-category protocol, and the brute-force
//! resolution-ceiling oracle.
//!
//! Conventions, pinned so hand values are reproducible:
//! * `binarize` uses strict `>` against the threshold (default 0).
//! * Empty-prediction vs empty-ground-truth IoU is defined as 1 and
//!   contributes nothing to cumulative-IoU denominators.
//! * cIoU is total intersection over total union; gIoU is the unweighted
//!   mean of per-sample IoU values.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: prediction has {pred} pixels, ground truth {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("cannot aggregate zero records")]
    Empty,
    #[error("expected {expected} per-category maps, got {got}")]
    CategoryCountMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `mask[i] = logits[i] > threshold`.
pub fn binarize(logits: &[f64], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&v| v > threshold).collect()
}

/// One scored sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouRecord {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// Intersection, union, and IoU of two binary masks of identical shape.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<IouRecord> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        intersection += u64::from(p && g);
        union += u64::from(p || g);
    }
    let iou = if union == 0 { 1.0 } else { intersection as f64 / union as f64 };
    Ok(IouRecord { intersection, union, iou })
}

/// Aggregate to `(cIoU, gIoU)`. Pairs with `union == 0` are skipped in the
/// cumulative ratio but still count (as IoU 1) toward the mean.
pub fn aggregate(records: &[IouRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total_i: u64 = records.iter().map(|r| r.intersection).sum();
    let total_u: u64 = records.iter().map(|r| r.union).sum();
    let ciou = if total_u == 0 { 1.0 } else { total_i as f64 / total_u as f64 };
    let giou = records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64;
    Ok((ciou, giou))
}

/// Open-vocabulary protocol: one logit map per category, each pixel assigned
/// to the arg-max category (ties to the lowest index), per-category IoU
/// against the ground-truth category map, unweighted mean over categories
/// present in ground truth or prediction.
pub fn miou(category_logits: &[Vec<f64>], gt_categories: &[usize], n_categories: usize) -> Result<f64> {
    if category_logits.len() != n_categories {
        return Err(MetricsError::CategoryCountMismatch {
            expected: n_categories,
            got: category_logits.len(),
        });
    }
    let pixels = gt_categories.len();
    for map in category_logits {
        if map.len() != pixels {
            return Err(MetricsError::ShapeMismatch {
                pred: map.len(),
                gt: pixels,
            });
        }
    }
    let mut pred = vec![0usize; pixels];
    for p in 0..pixels {
        let mut best = 0usize;
        for c in 1..n_categories {
            if category_logits[c][p] > category_logits[best][p] {
                best = c;
            }
        }
        pred[p] = best;
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..n_categories {
        let pmask: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let gmask: Vec<bool> = gt_categories.iter().map(|&v| v == c).collect();
        let present = pmask.iter().any(|&v| v) || gmask.iter().any(|&v| v);
        if !present {
            continue;
        }
        total += iou(&pmask, &gmask)?.iou;
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(total / counted as f64)
}

/// Nearest-neighbour upsampling of a binary mask by an integer factor.
pub fn upsample_mask(mask: &[bool], side: usize, factor: usize) -> Vec<bool> {
    let out_side = side * factor;
    let mut out = vec![false; out_side * out_side];
    for r in 0..out_side {
        for c in 0..out_side {
            out[r * out_side + c] = mask[(r / factor) * side + (c / factor)];
        }
    }
    out
}

/// Area-average a full-resolution binary mask down to `target_side` cells and
/// threshold at coverage > 0.5. This is the training target at a mode's
/// native mask resolution.
pub fn downsample_gt(gt: &[bool], side: usize, target_side: usize) -> Vec<bool> {
    assert_eq!(side % target_side, 0, "resolution must divide the image side");
    let cell = side / target_side;
    let mut out = vec![false; target_side * target_side];
    for r in 0..target_side {
        for c in 0..target_side {
            let mut covered = 0usize;
            for dy in 0..cell {
                for dx in 0..cell {
                    covered += usize::from(gt[(r * cell + dy) * side + (c * cell + dx)]);
                }
            }
            out[r * target_side + c] = covered as f64 / (cell * cell) as f64 > 0.5;
        }
    }
    out
}

/// Per-cell coverage fractions of a full-resolution mask on a coarse grid.
pub fn cell_coverage(gt: &[bool], side: usize, target_side: usize) -> Vec<f64> {
    let cell = side / target_side;
    let mut out = vec![0.0; target_side * target_side];
    for r in 0..target_side {
        for c in 0..target_side {
            let mut covered = 0usize;
            for dy in 0..cell {
                for dx in 0..cell {
                    covered += usize::from(gt[(r * cell + dy) * side + (c * cell + dx)]);
                }
            }
            out[r * target_side + c] = covered as f64 / (cell * cell) as f64;
        }
    }
    out
}

/// Best achievable IoU of *any* binary mask at `target_side x target_side`
/// against a full-resolution ground truth, scored after nearest upsampling.
///
/// Exhaustive over thresholds: for a fixed number of selected cells, the
/// optimum takes the highest-coverage cells, so sweeping prefixes of the
/// coverage-sorted cell list visits an optimal mask for every cardinality.
pub fn best_cell_iou(gt: &[bool], side: usize, target_side: usize) -> f64 {
    let gt_count: f64 = gt.iter().filter(|&&v| v).count() as f64;
    if gt_count == 0.0 {
        return 1.0;
    }
    let cell_area = ((side / target_side) * (side / target_side)) as f64;
    let mut cov = cell_coverage(gt, side, target_side);
    cov.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best = 0.0f64;
    let mut inter = 0.0;
    for (k, c) in cov.iter().enumerate() {
        inter += c * cell_area;
        let pred_area = (k + 1) as f64 * cell_area;
        let iou = inter / (gt_count + pred_area - inter);
        best = best.max(iou);
    }
    best
}

/// Mean best-achievable IoU (the gIoU ceiling) of a corpus at a resolution.
pub fn resolution_ceiling(gts: &[(&[bool], usize)], target_side: usize) -> f64 {
    let mut total = 0.0;
    for (gt, side) in gts {
        total += best_cell_iou(gt, *side, target_side);
    }
    total / gts.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_strict_inequality() {
        assert_eq!(binarize(&[-1.0, 0.0, 1.0], 0.0), vec![false, false, true]);
        assert_eq!(binarize(&[-20.0; 4], 0.0), vec![false; 4]);
    }

    #[test]
    fn binarize_threshold_sweep_shrinks() {
        let logits = [-0.5, 0.2, 0.7, 1.5, -2.0, 0.9];
        let mut prev_count = usize::MAX;
        for t in [-1.0, 0.0, 1.0] {
            let m = binarize(&logits, t);
            let count = m.iter().filter(|&&v| v).count();
            assert!(count <= prev_count);
            prev_count = count;
        }
    }

    #[test]
    fn iou_hand_counts() {
        let gt = [true, true, true, false];
        assert_eq!(iou(&gt, &gt).unwrap().iou, 1.0);

        let none = [false, false, false, true];
        let r = iou(&[true, false, false, false], &none).unwrap();
        assert_eq!(r.iou, 0.0);

        // pred 2 px inside a 4 px union
        let pred = [true, true, false, false];
        let gt = [true, true, true, true];
        let r = iou(&pred, &gt).unwrap();
        assert_eq!((r.intersection, r.union), (2, 4));
        assert_eq!(r.iou, 0.5);
    }

    #[test]
    fn empty_vs_empty_is_one() {
        let r = iou(&[false; 3], &[false; 3]).unwrap();
        assert_eq!(r.iou, 1.0);
        assert_eq!(r.union, 0);
    }

    #[test]
    fn aggregate_hand_value() {
        let records = [
            IouRecord { intersection: 2, union: 4, iou: 0.5 },
            IouRecord { intersection: 3, union: 5, iou: 0.6 },
        ];
        let (ciou, giou) = aggregate(&records).unwrap();
        assert!((ciou - 5.0 / 9.0).abs() < 1e-12);
        assert!((giou - 0.55).abs() < 1e-12);

        let (c, g) = aggregate(&records[..1]).unwrap();
        assert_eq!(c, g);

        assert_eq!(aggregate(&[]).unwrap_err(), MetricsError::Empty);
    }

    #[test]
    fn aggregate_order_invariant_and_equal_u_case() {
        let a = [
            IouRecord { intersection: 1, union: 10, iou: 0.1 },
            IouRecord { intersection: 7, union: 10, iou: 0.7 },
            IouRecord { intersection: 4, union: 10, iou: 0.4 },
        ];
        let mut b = a;
        b.reverse();
        let (ca, ga) = aggregate(&a).unwrap();
        let (cb, gb) = aggregate(&b).unwrap();
        assert_eq!(ca, cb); // integer totals: exactly order-free
        assert!((ga - gb).abs() < 1e-12); // float mean: order-free up to rounding
        // identical unions: cIoU == gIoU
        let (c, g) = aggregate(&a).unwrap();
        assert!((c - g).abs() < 1e-12);
    }

    #[test]
    fn iou_scale_invariant_under_upsampling() {
        let pred = [true, false, false, true];
        let gt = [true, true, false, false];
        let base = iou(&pred, &gt).unwrap().iou;
        for k in [2usize, 4] {
            let up_p = upsample_mask(&pred, 2, k);
            let up_g = upsample_mask(&gt, 2, k);
            assert_eq!(iou(&up_p, &up_g).unwrap().iou, base);
        }
    }

    #[test]
    fn miou_perfect_and_swapped() {
        // two categories on 4 pixels
        let gt = vec![0, 0, 1, 1];
        let perfect = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]];
        assert_eq!(miou(&perfect, &gt, 2).unwrap(), 1.0);

        let swapped = vec![vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]];
        assert_eq!(miou(&swapped, &gt, 2).unwrap(), 0.0);

        assert!(matches!(
            miou(&perfect, &gt, 3),
            Err(MetricsError::CategoryCountMismatch { .. })
        ));
    }

    #[test]
    fn miou_matches_exhaustive_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pixels = 25;
        let cats = 3;
        let gt: Vec<usize> = (0..pixels).map(|_| rng.gen_range(0..cats)).collect();
        let logits: Vec<Vec<f64>> = (0..cats)
            .map(|_| (0..pixels).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let got = miou(&logits, &gt, cats).unwrap();

        // oracle: explicit argmax + explicit per-category counting
        let mut pred = vec![0usize; pixels];
        for p in 0..pixels {
            let mut best = 0;
            for c in 1..cats {
                if logits[c][p] > logits[best][p] {
                    best = c;
                }
            }
            pred[p] = best;
        }
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..cats {
            let mut i = 0.0;
            let mut u = 0.0;
            let mut present = false;
            for p in 0..pixels {
                let pp = pred[p] == c;
                let gg = gt[p] == c;
                present |= pp || gg;
                i += f64::from(pp && gg);
                u += f64::from(pp || gg);
            }
            if present {
                sum += if u == 0.0 { 1.0 } else { i / u };
                n += 1;
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn downsample_threshold_rule() {
        // one fully covered cell, one half covered, two empty (2x2 cells of 2x2 px)
        let gt = [
            true, true, true, false, //
            true, true, false, false, //
            false, false, false, false, //
            false, false, false, false,
        ];
        let down = downsample_gt(&gt, 4, 2);
        assert_eq!(down, vec![true, false, false, false]); // 0.5 coverage is not > 0.5
    }

    #[test]
    fn best_cell_iou_beats_threshold_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let side = 16;
            let gt: Vec<bool> = (0..side * side).map(|_| rng.gen_bool(0.3)).collect();
            let best = best_cell_iou(&gt, side, 4);
            // any thresholded coverage mask scores no better
            for t in [0.1, 0.3, 0.5, 0.7] {
                let cov = cell_coverage(&gt, side, 4);
                let mask: Vec<bool> = cov.iter().map(|&c| c > t).collect();
                let up = upsample_mask(&mask, 4, 4);
                let scored = iou(&up, &gt).unwrap().iou;
                assert!(scored <= best + 1e-12);
            }
        }
    }

    #[test]
    fn best_cell_iou_exact_on_aligned_gt() {
        // gt exactly equals one 8x8 cell of a 16x16 image at 2x2 resolution
        let side = 16;
        let mut gt = vec![false; side * side];
        for r in 0..8 {
            for c in 0..8 {
                gt[r * side + c] = true;
            }
        }
        assert_eq!(best_cell_iou(&gt, side, 2), 1.0);
    }
}
