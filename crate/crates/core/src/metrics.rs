//! Intersection-over-union segmentation metrics.

use crate::error::{Error, Result};
use crate::maps::LabelMap;

/// Per-class IoU (None for classes absent from both maps) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU per class and the mean over classes present in either map.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<IoUReport> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if pred.labels().is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut intersection = vec![0u64; classes];
    let mut pred_count = vec![0u64; classes];
    let mut gt_count = vec![0u64; classes];
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes {
            return Err(Error::InvalidLabel { value: p, classes });
        }
        if g >= classes {
            return Err(Error::InvalidLabel { value: g, classes });
        }
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            intersection[p] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for j in 0..classes {
        let union = pred_count[j] + gt_count[j] - intersection[j];
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = intersection[j] as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    Ok(IoUReport {
        per_class,
        miou: sum / present as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, labels: &[u8]) -> LabelMap {
        LabelMap::new(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = map(2, 2, &[0, 1, 2, 1]);
        let out = miou(&gt, &gt, 3).unwrap();
        assert_eq!(out.miou, 1.0);
        assert!(out.per_class.iter().all(|c| *c == Some(1.0)));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let pred = map(1, 4, &[1, 1, 0, 0]);
        let gt = map(1, 4, &[0, 0, 1, 1]);
        let out = miou(&pred, &gt, 2).unwrap();
        assert_eq!(out.per_class[0], Some(0.0));
        assert_eq!(out.per_class[1], Some(0.0));
        assert_eq!(out.miou, 0.0);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // pred [[0,0],[1,1]] vs gt [[0,1],[1,1]]:
        // IoU_0 = 1/2, IoU_1 = 2/3, mIoU = 7/12
        let pred = map(2, 2, &[0, 0, 1, 1]);
        let gt = map(2, 2, &[0, 1, 1, 1]);
        let out = miou(&pred, &gt, 2).unwrap();
        assert_eq!(out.per_class[0], Some(0.5));
        assert_eq!(out.per_class[1], Some(2.0 / 3.0));
        assert!((out.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let pred = map(1, 2, &[0, 0]);
        let gt = map(1, 2, &[0, 0]);
        let out = miou(&pred, &gt, 5).unwrap();
        assert_eq!(out.per_class[0], Some(1.0));
        assert!(out.per_class[1..].iter().all(Option::is_none));
        assert_eq!(out.miou, 1.0);
    }

    #[test]
    fn shape_and_range_validation() {
        let a = map(1, 2, &[0, 0]);
        let b = map(2, 1, &[0, 0]);
        assert!(matches!(
            miou(&a, &b, 2).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
        let c = map(1, 2, &[0, 7]);
        assert!(matches!(
            miou(&a, &c, 2).unwrap_err(),
            Error::InvalidLabel { .. }
        ));
    }
}
