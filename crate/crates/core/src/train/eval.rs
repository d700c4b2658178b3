use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::detector::{Annotation, Detector};
use crate::scalar::Scalar;
use crate::synthgen::ModalitySample;
use crate::train::{check_classes, stack, TrainError};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    /// `[x, y, w, h]`, top-left corner.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for classes without ground truth; those are left out of the
    /// means.
    pub per_class_ap50: Vec<Option<f64>>,
    pub per_class_ap50_95: Vec<Option<f64>>,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
    pub mean_ap50_95: f64,
    pub images: usize,
    pub detections: usize,
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Score-descending order; ties keep input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    order
}

/// Greedy per-class non-maximum suppression within one image.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranked(dets) {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Turns per-level head outputs of a batch (`[N, C, h, w]` logits and
/// `[N, 4, h, w]` offsets) into NMS-filtered detections per image.
pub fn decode_levels<S: Scalar>(
    levels: &[(Tensor<S>, Tensor<S>)],
    strides: [usize; 3],
    first_image: usize,
    config: &DecodeConfig,
) -> Vec<Vec<Detection>> {
    let n = levels[0].0.shape()[0];
    let mut out = vec![Vec::new(); n];
    for (l, (logits, boxes)) in levels.iter().enumerate() {
        let [_, classes, gh, gw] = logits.shape()[..] else {
            unreachable!("logits are rank 4")
        };
        let s = strides[l] as f64;
        let plane = gh * gw;
        let (ld, bd) = (logits.data(), boxes.data());
        for (i, dets) in out.iter_mut().enumerate() {
            for c in 0..classes {
                for cell in 0..plane {
                    let score = ld[(i * classes + c) * plane + cell].sigmoid().as_f64();
                    if score < config.score_threshold {
                        continue;
                    }
                    let off = |k: usize| bd[(i * 4 + k) * plane + cell].as_f64();
                    let (row, col) = ((cell / gw) as f64, (cell % gw) as f64);
                    let cx = (col + off(0)) * s;
                    let cy = (row + off(1)) * s;
                    let w = off(2).clamp(-8.0, 8.0).exp() * s;
                    let h = off(3).clamp(-8.0, 8.0).exp() * s;
                    dets.push(Detection {
                        image: first_image + i,
                        class: c,
                        score,
                        bbox: [cx - w / 2.0, cy - h / 2.0, w, h],
                    });
                }
            }
        }
    }
    out.into_iter()
        .map(|dets| {
            let mut kept = nms(&dets, config.nms_iou);
            kept.truncate(config.max_detections);
            kept
        })
        .collect()
}

/// All-point interpolated AP of one class at one IoU threshold, or `None`
/// without ground truth. Each detection, in score order, claims the
/// unmatched ground truth of its image with the highest IoU (lowest index
/// on ties) if that IoU reaches the threshold.
fn class_ap(dets: &[Detection], truth: &[Annotation], class: usize, threshold: f64) -> Option<f64> {
    let total: usize = truth
        .iter()
        .map(|a| a.classes.iter().filter(|&&c| c == class).count())
        .sum();
    if total == 0 {
        return None;
    }
    let mine: Vec<Detection> = dets.iter().copied().filter(|d| d.class == class).collect();
    let mut taken: Vec<Vec<bool>> = truth.iter().map(|a| vec![false; a.boxes.len()]).collect();
    let mut hits = Vec::with_capacity(mine.len());
    for i in ranked(&mine) {
        let d = &mine[i];
        let ann = &truth[d.image];
        let mut best: Option<(usize, f64)> = None;
        for (g, (b, &c)) in ann.boxes.iter().zip(&ann.classes).enumerate() {
            if c != class || taken[d.image][g] {
                continue;
            }
            let v = iou(&d.bbox, b);
            if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[d.image][g] = true;
        }
        hits.push(best.is_some());
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let area = hits
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .fold(0.0, |a, (_, &p)| a + p);
    Some(area / total as f64)
}

fn mean(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().fold(0.0, |a, b| a + b) / present.len() as f64
    }
}

/// AP metrics of `detections` against `truth`, where `Detection::image`
/// indexes `truth`.
pub fn average_precision(
    detections: &[Detection],
    truth: &[Annotation],
    num_classes: usize,
) -> EvalResult {
    let mut table = vec![vec![None; IOU_THRESHOLDS.len()]; num_classes];
    for (c, row) in table.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            *cell = class_ap(detections, truth, c, IOU_THRESHOLDS[t]);
        }
    }
    let per_class_ap50: Vec<Option<f64>> = table.iter().map(|r| r[0]).collect();
    let per_class_ap75: Vec<Option<f64>> = table.iter().map(|r| r[5]).collect();
    let per_class_ap50_95: Vec<Option<f64>> = table
        .iter()
        .map(|r| {
            r[0].map(|_| r.iter().flatten().fold(0.0, |a, b| a + b) / IOU_THRESHOLDS.len() as f64)
        })
        .collect();
    EvalResult {
        mean_ap50: mean(&per_class_ap50),
        mean_ap75: mean(&per_class_ap75),
        mean_ap50_95: mean(&per_class_ap50_95),
        per_class_ap50,
        per_class_ap50_95,
        images: truth.len(),
        detections: detections.len(),
    }
}

/// Evaluates the model's inference head on `data` against the full
/// annotations.
pub fn evaluate<S: Scalar>(
    model: &Detector<S>,
    data: &[ModalitySample],
    config: &DecodeConfig,
) -> Result<EvalResult, TrainError> {
    check_classes(data, model.config.num_classes)?;
    let strides = model.config.backbone.pyramid_strides();
    let mut detections = Vec::new();
    for (chunk_index, chunk) in data.chunks(32).enumerate() {
        let images = [0, 1].map(|m| {
            let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|s| s.image(m)).collect();
            stack::<S>(&imgs)
        });
        let levels = model.predict(&images)?;
        for dets in decode_levels(&levels, strides, chunk_index * 32, config) {
            detections.extend(dets);
        }
    }
    let truth: Vec<Annotation> = data.iter().map(|s| s.annotation()).collect();
    Ok(average_precision(&detections, &truth, model.config.num_classes))
}
