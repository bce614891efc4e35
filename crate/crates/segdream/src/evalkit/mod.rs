//! Segmentation-quality metrics and report emission.

pub mod plot;
pub mod report;

use crate::error::{Result, SdError};
use ndarray::Array2;

/// Aggregated per-episode mask quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub frame_count: usize,
}

/// Intersection-over-union of two boolean masks; 1.0 when both are empty.
pub fn frame_iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(SdError::Shape(format!(
            "frame_iou shapes {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Precision and recall of `pred_prob >= threshold` against a boolean mask.
/// Empty denominators score 1.0 (no predictions means no false positives;
/// no ground truth means nothing was missed).
pub fn precision_recall(
    pred_prob: &Array2<f32>,
    gt: &Array2<bool>,
    threshold: f32,
) -> Result<(f64, f64)> {
    if pred_prob.dim() != gt.dim() {
        return Err(SdError::Shape(format!(
            "precision_recall shapes {:?} vs {:?}",
            pred_prob.dim(),
            gt.dim()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred_prob.iter().zip(gt.iter()) {
        let pred = p >= threshold;
        match (pred, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok((precision, recall))
}

/// Arithmetic mean of per-frame metrics over an episode.
pub fn episodic_quality(frames: &[(Array2<bool>, Array2<bool>)]) -> Result<MaskMetrics> {
    if frames.is_empty() {
        return Err(SdError::Usage(
            "episodic_quality needs at least one frame".into(),
        ));
    }
    let mut iou = 0.0;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (pred, gt) in frames {
        iou += frame_iou(pred, gt)?;
        let prob = pred.mapv(|b| if b { 1.0f32 } else { 0.0 });
        let (p, r) = precision_recall(&prob, gt, 0.5)?;
        precision += p;
        recall += r;
    }
    let n = frames.len() as f64;
    Ok(MaskMetrics {
        iou: iou / n,
        precision: precision / n,
        recall: recall / n,
        frame_count: frames.len(),
    })
}

/// Mean and standard error of the mean over independent values (seeds).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt() / (n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mask(bits: &[&[u8]]) -> Array2<bool> {
        let h = bits.len();
        let w = bits[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| bits[y][x] != 0)
    }

    #[test]
    fn iou_basic_identities() {
        let a = mask(&[&[1, 1], &[0, 0]]);
        let b = mask(&[&[0, 0], &[1, 1]]);
        assert_eq!(frame_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(frame_iou(&a, &b).unwrap(), 0.0);
        let empty = mask(&[&[0, 0], &[0, 0]]);
        assert_eq!(frame_iou(&empty, &empty).unwrap(), 1.0);
        // two 2-pixel masks overlapping in exactly one pixel: 1/3
        let c = mask(&[&[1, 1], &[0, 0]]);
        let d = mask(&[&[0, 1], &[0, 1]]);
        assert!((frame_iou(&c, &d).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = mask(&[&[1, 0, 1], &[0, 1, 0]]);
        let b = mask(&[&[1, 1, 0], &[0, 0, 1]]);
        assert_eq!(frame_iou(&a, &b).unwrap(), frame_iou(&b, &a).unwrap());
    }

    #[test]
    fn precision_recall_basics() {
        let gt = mask(&[&[1, 0], &[0, 0]]);
        let pred_all = Array2::from_elem((2, 2), 1.0f32);
        let (p, r) = precision_recall(&pred_all, &gt, 0.5).unwrap();
        assert!((p - 0.25).abs() < 1e-12);
        assert_eq!(r, 1.0);

        let exact = gt.mapv(|b| if b { 1.0f32 } else { 0.0 });
        let (p, r) = precision_recall(&exact, &gt, 0.5).unwrap();
        assert_eq!((p, r), (1.0, 1.0));

        // empty prediction: precision convention 1.0, recall 0.0
        let none = Array2::from_elem((2, 2), 0.0f32);
        let (p, r) = precision_recall(&none, &gt, 0.5).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn precision_recall_matches_enumeration_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let prob = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0f32));
            let gt = Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.3));
            let th = rng.random_range(0.1..0.9f32);
            let (p, r) = precision_recall(&prob, &gt, th).unwrap();
            // pixel-enumeration oracle
            let (mut tp, mut fp, mut fn_) = (0f64, 0f64, 0f64);
            for y in 0..8 {
                for x in 0..8 {
                    let pr = prob[(y, x)] >= th;
                    let g = gt[(y, x)];
                    if pr && g {
                        tp += 1.0;
                    }
                    if pr && !g {
                        fp += 1.0;
                    }
                    if !pr && g {
                        fn_ += 1.0;
                    }
                }
            }
            let ep = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
            let er = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
            assert!((p - ep).abs() < 1e-12);
            assert!((r - er).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_monotonicity_of_recall() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let prob = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0f32));
        let gt = Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4));
        let mut last = f64::INFINITY;
        for th in [0.1f32, 0.3, 0.5, 0.7, 0.9] {
            let (_, r) = precision_recall(&prob, &gt, th).unwrap();
            assert!(r <= last + 1e-12, "recall rose with threshold");
            last = r;
        }
    }

    #[test]
    fn monotone_recall_under_superset_predictions() {
        let gt = mask(&[&[1, 1, 0], &[0, 1, 0]]);
        let small = mask(&[&[1, 0, 0], &[0, 0, 0]]);
        let big = mask(&[&[1, 1, 0], &[0, 0, 1]]); // superset of small
        let to_prob = |m: &Array2<bool>| m.mapv(|b| if b { 1.0f32 } else { 0.0 });
        let (_, r_small) = precision_recall(&to_prob(&small), &gt, 0.5).unwrap();
        let (_, r_big) = precision_recall(&to_prob(&big), &gt, 0.5).unwrap();
        assert!(r_big >= r_small);
    }

    #[test]
    fn episodic_quality_is_mean_of_frames() {
        let a = mask(&[&[1, 1], &[0, 0]]);
        let b = mask(&[&[0, 0], &[1, 1]]);
        // frame 1: identical (IoU 1), frame 2: disjoint (IoU 0)
        let frames = vec![(a.clone(), a.clone()), (a.clone(), b.clone())];
        let m = episodic_quality(&frames).unwrap();
        assert!((m.iou - 0.5).abs() < 1e-12);
        assert_eq!(m.frame_count, 2);

        let single = episodic_quality(&frames[..1]).unwrap();
        assert_eq!(single.iou, 1.0);

        assert!(episodic_quality(&[]).is_err());
    }

    #[test]
    fn episodic_quality_matches_direct_recomputation() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<(Array2<bool>, Array2<bool>)> = (0..100)
            .map(|_| {
                (
                    Array2::from_shape_fn((6, 6), |_| rng.random_bool(0.4)),
                    Array2::from_shape_fn((6, 6), |_| rng.random_bool(0.4)),
                )
            })
            .collect();
        let m = episodic_quality(&frames).unwrap();
        let mean_iou: f64 = frames
            .iter()
            .map(|(p, g)| frame_iou(p, g).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!((m.iou - mean_iou).abs() < 1e-9);
    }

    #[test]
    fn sem_of_two_seeds() {
        let (mean, sem) = mean_sem(&[100.0, 300.0]);
        assert_eq!(mean, 200.0);
        assert!((sem - 100.0).abs() < 1e-9);
        let (_, zero) = mean_sem(&[42.0]);
        assert_eq!(zero, 0.0);
    }
}
