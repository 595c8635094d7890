//! Decoding, non-maximum suppression and the evaluation report.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use smalldet_core::boxes::iou;
use smalldet_core::metrics::{map_50_95, map_at, rank_detections, Detection, GroundTruth};
use smalldet_core::params::bind_frozen;
use smalldet_core::tape::sigmoid;
use smalldet_core::{BBox, Precision, Tape};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::model::{cell_center, forward, ToyModelParams, STRIDE};

pub const DEFAULT_CONFIDENCE: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub confidence_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            confidence_threshold: DEFAULT_CONFIDENCE,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.confidence_threshold, self.nms_iou);
        if !(0.0..=1.0).contains(&c) || !(n > 0.0 && n <= 1.0) {
            return Err(HarnessError::Config(format!(
                "confidence threshold must be in [0, 1] and NMS IoU in (0, 1], got {c} and {n}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// AP at IoU 0.5 keyed by class id.
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub map50: f64,
    pub map50_95: f64,
    pub detections: usize,
    pub ground_truths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Scores,
    pub loss_curve: Vec<f64>,
    pub wall_clock_seconds: f64,
    pub settings: EvalSettings,
    pub training: TrainingMeta,
    pub images: usize,
}

/// Greedy per-class suppression: walk detections by rank and drop any whose
/// IoU with an already kept box of the same class and image exceeds
/// `nms_iou`.
pub fn nms(dets: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank_detections(dets) {
        let d = dets[i];
        let clash = kept.iter().any(|k| {
            k.class_id == d.class_id && k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > nms_iou
        });
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// Per-cell detections `σ(obj)·σ(best class logit)` above the threshold,
/// after suppression.
pub fn predict(
    params: &ToyModelParams,
    data: &Dataset,
    settings: EvalSettings,
    precision: Precision,
) -> Result<Vec<Detection>> {
    settings.validate()?;
    let cfg = params.config;
    let k = cfg.num_classes;
    let order: Vec<usize> = (0..data.len()).collect();
    let mut raw = Vec::new();
    for chunk in order.chunks(EVAL_BATCH) {
        let mut tape = Tape::new(precision);
        let bound = bind_frozen(params, &mut tape);
        let x = tape.constant(data.batch_tensor(chunk));
        let out = forward(&mut tape, x, &bound)?;
        let ov = tape.value(out);
        let [_, ch, g, _] = *ov.shape() else {
            unreachable!("head output is rank 4")
        };
        let at = |n: usize, c: usize, y: usize, x: usize| ov.data()[((n * ch + c) * g + y) * g + x];
        let mut cells = Vec::new();
        let mut meta = Vec::new();
        for (n, &image_id) in chunk.iter().enumerate() {
            for y in 0..g {
                for x in 0..g {
                    let (class_id, logit) = (0..k)
                        .map(|c| (c, at(n, 4 + c, y, x)))
                        .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
                    let conf = sigmoid(at(n, 4 + k, y, x)) * sigmoid(logit);
                    if conf >= settings.confidence_threshold {
                        cells.push([n, y, x]);
                        meta.push((image_id, class_id, conf.clamp(0.0, 1.0)));
                    }
                }
            }
        }
        if cells.is_empty() {
            continue;
        }
        let offsets = tape.gather_cells(out, 0, 4, &cells)?;
        let centers: Vec<[f64; 2]> = cells.iter().map(|&[_, y, x]| cell_center(y, x)).collect();
        let boxes = tape.decode_boxes(offsets, &centers, STRIDE as f64, cfg.anchor)?;
        for (row, &(image_id, class_id, confidence)) in tape.value(boxes).data().chunks_exact(4).zip(&meta) {
            raw.push(Detection {
                bbox: BBox::new(row[0], row[1], row[2], row[3])?,
                class_id,
                confidence,
                image_id,
            });
        }
    }
    Ok(nms(&raw, settings.nms_iou))
}

pub fn score(dets: &[Detection], gts: &[GroundTruth]) -> Result<Scores> {
    let r = map_at(dets, gts, 0.5)?;
    Ok(Scores {
        per_class_ap50: r.per_class_ap,
        map50: r.map_value,
        map50_95: map_50_95(dets, gts)?,
        detections: dets.len(),
        ground_truths: gts.len(),
    })
}

pub fn evaluate_params(
    params: &ToyModelParams,
    data: &Dataset,
    settings: EvalSettings,
    precision: Precision,
) -> Result<Scores> {
    let dets = predict(params, data, settings, precision)?;
    score(&dets, &data.ground_truths())
}

pub fn evaluate(
    ckpt: &Checkpoint,
    data: &Dataset,
    settings: EvalSettings,
    precision: Precision,
) -> Result<EvalReport> {
    let start = Instant::now();
    let model = ckpt.meta.model;
    if model.image_size != data.image_size() || model.num_classes != data.spec.num_classes {
        return Err(HarnessError::Config(format!(
            "checkpoint expects {0}×{0} images with {1} classes, dataset has {2}×{2} with {3}",
            model.image_size,
            model.num_classes,
            data.image_size(),
            data.spec.num_classes
        )));
    }
    let params = ckpt.to_params(model)?;
    let scores = evaluate_params(&params, data, settings, precision)?;
    Ok(EvalReport {
        scores,
        loss_curve: ckpt.meta.loss_curve.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        settings,
        training: ckpt.meta.clone(),
        images: data.len(),
    })
}
