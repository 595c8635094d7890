//! Detection metrics: greedy matching, precision/recall, 101-point
//! interpolated AP and class-averaged mAP.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::boxes::{iou, BBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no ground truths: mean average precision is undefined")]
    NoGroundTruth,
    #[error("detection {index} has confidence {value}, expected a value in [0, 1]")]
    InvalidConfidence { index: usize, value: f64 },
    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    pub image_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    pub image_id: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the detection list, in ranking order.
    pub order: Vec<usize>,
    /// TP flag per ranked detection.
    pub is_tp: Vec<bool>,
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct APResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map_value: f64,
}

/// Confidence descending, then lower image id, then input order.
pub fn rank_detections(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching of one class: each detection, in rank order, claims the
/// unmatched ground truth of its image with the highest IoU ≥ threshold
/// (first one on ties).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let order = rank_detections(dets);
    let mut taken = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
        }
        is_tp.push(best.is_some());
    }
    let tp = is_tp.iter().filter(|&&t| t).count();
    MatchResult {
        order,
        counts: MatchCounts {
            tp,
            fp: dets.len() - tp,
            fn_: gts.len() - tp,
        },
        is_tp,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(TP / (TP + FP), TP / (TP + FN))`, with 0/0 taken as 0.
pub fn precision_recall(c: MatchCounts) -> (f64, f64) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// AP of ranked TP/FP labels: precision envelope sampled at recall
/// 0, 0.01, …, 1 and averaged.
pub fn average_precision(is_tp: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 || is_tp.is_empty() {
        return 0.0;
    }
    let mut tp_cum = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &t) in is_tp.iter().enumerate() {
        tp += t as usize;
        tp_cum.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100usize {
        // recall_k ≥ i/100, compared in integers
        while k < tp_cum.len() && tp_cum[k] * 100 < i * total_gt {
            k += 1;
        }
        if k == tp_cum.len() {
            break;
        }
        sum += precision[k];
    }
    sum / 101.0
}

fn validate(dets: &[Detection], iou_threshold: f64) -> Result<(), MetricsError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(MetricsError::InvalidThreshold(iou_threshold));
    }
    if let Some((index, d)) = dets
        .iter()
        .enumerate()
        .find(|(_, d)| !(0.0..=1.0).contains(&d.confidence))
    {
        return Err(MetricsError::InvalidConfidence {
            index,
            value: d.confidence,
        });
    }
    Ok(())
}

/// Per-class AP at one IoU threshold and their mean over classes that have
/// at least one ground truth.
pub fn map_at(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<APResult, MetricsError> {
    validate(dets, iou_threshold)?;
    if gts.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let mut per_class_ap = BTreeMap::new();
    for &c in &classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        let m = match_detections(&cd, &cg, iou_threshold);
        per_class_ap.insert(c, average_precision(&m.is_tp, cg.len()));
    }
    let map_value = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(APResult {
        per_class_ap,
        map_value,
    })
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// mAP averaged over [`coco_thresholds`].
pub fn map_50_95(dets: &[Detection], gts: &[GroundTruth]) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for t in coco_thresholds() {
        total += map_at(dets, gts, t)?.map_value;
    }
    Ok(total / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, class_id: usize, confidence: f64, image_id: usize) -> Detection {
        Detection {
            bbox: b,
            class_id,
            confidence,
            image_id,
        }
    }

    fn gt(b: BBox, class_id: usize, image_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: b,
            class_id,
            image_id,
        }
    }

    #[test]
    fn exact_match() {
        let b = bx(0., 0., 10., 10.);
        let m = match_detections(&[det(b, 0, 0.9, 0)], &[gt(b, 0, 0)], 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn greedy_order_prefers_confidence() {
        let g = bx(0., 0., 10., 10.);
        // IoU 0.6 and 0.7 against g
        let a = bx(0., 0., 6., 10.);
        let b = bx(0., 0., 7., 10.);
        assert!((iou(&a, &g) - 0.6).abs() < 1e-12 && (iou(&b, &g) - 0.7).abs() < 1e-12);
        let m = match_detections(&[det(b, 0, 0.8, 0), det(a, 0, 0.9, 0)], &[gt(g, 0, 0)], 0.5);
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.is_tp, vec![true, false]);
    }

    #[test]
    fn no_detections() {
        let g = bx(0., 0., 1., 1.);
        let m = match_detections(&[], &[gt(g, 0, 0), gt(g, 0, 1), gt(g, 0, 2)], 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 0, fp: 0, fn_: 3 });
    }

    #[test]
    fn pr_values() {
        assert_eq!(precision_recall(MatchCounts { tp: 8, fp: 2, fn_: 2 }), (0.8, 0.8));
        assert_eq!(precision_recall(MatchCounts { tp: 0, fp: 0, fn_: 5 }), (0.0, 0.0));
        assert_eq!(precision_recall(MatchCounts { tp: 5, fp: 0, fn_: 0 }), (1.0, 1.0));
    }

    #[test]
    fn ap_values() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, false], 3), 0.0);
        // recall ≤ 0.5 at precision 1, then 2/3 up to recall 1
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_half() {
        let b0 = bx(0., 0., 4., 4.);
        let b1 = bx(10., 10., 20., 14.);
        let gts = [gt(b0, 0, 0), gt(b1, 1, 0), gt(b1, 0, 1)];
        let dets: Vec<Detection> = gts.iter().map(|g| det(g.bbox, g.class_id, 0.7, g.image_id)).collect();
        assert_eq!(map_at(&dets, &gts, 0.5).unwrap().map_value, 1.0);
        assert_eq!(map_50_95(&dets, &gts).unwrap(), 1.0);
        let silent: Vec<Detection> = dets.iter().filter(|d| d.class_id == 0).copied().collect();
        let r = map_at(&silent, &gts, 0.5).unwrap();
        assert_eq!(r.map_value, 0.5);
        assert_eq!(r.per_class_ap[&1], 0.0);
    }

    #[test]
    fn errors() {
        let b = bx(0., 0., 1., 1.);
        assert_eq!(map_at(&[det(b, 0, 0.5, 0)], &[], 0.5), Err(MetricsError::NoGroundTruth));
        assert!(matches!(
            map_at(&[det(b, 0, 1.5, 0)], &[gt(b, 0, 0)], 0.5),
            Err(MetricsError::InvalidConfidence { index: 0, .. })
        ));
        assert!(map_at(&[], &[gt(b, 0, 0)], 0.0).is_err());
    }

    #[test]
    fn thresholds() {
        let t = coco_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert_eq!(t[3], 0.65);
    }
}
