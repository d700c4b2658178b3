use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::{BackboneConfig, DetectorError, HeadOutput, LossWeights};
use crate::scalar::Scalar;

/// Ground truth of one image: boxes as `[x, y, w, h]` in pixels with
/// `(x, y)` the top-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

/// Dense targets for one pyramid level of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets<S> {
    /// One-hot class labels, `[N, classes, h, w]`.
    pub cls: Tensor<S>,
    /// Offsets `(dx, dy, ln(w/stride), ln(h/stride))`, `[N, 4, h, w]`.
    pub boxes: Tensor<S>,
    /// 1 on positive cells, 0 elsewhere, `[N, 4, h, w]`.
    pub mask: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets<S> {
    pub levels: Vec<LevelTargets<S>>,
    pub positives: usize,
}

/// Cell assignment of one box: pyramid level, grid row and column, and
/// the regression target at that cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellAssignment {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub offsets: [f64; 4],
}

/// Picks the finest level whose stride band contains the box size
/// (`max(w, h) < 2 * stride`, the coarsest level takes everything
/// larger) and the cell containing the box center.
pub fn assign_box(bbox: &[f64; 4], strides: [usize; 3], grid: [(usize, usize); 3]) -> CellAssignment {
    let [x, y, w, h] = *bbox;
    let size = w.max(h);
    let level = (0..3)
        .find(|&l| size < 2.0 * strides[l] as f64)
        .unwrap_or(2);
    let s = strides[level] as f64;
    let (gh, gw) = grid[level];
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    let col = ((cx / s).floor().max(0.0) as usize).min(gw - 1);
    let row = ((cy / s).floor().max(0.0) as usize).min(gh - 1);
    CellAssignment {
        level,
        row,
        col,
        offsets: [
            cx / s - col as f64,
            cy / s - row as f64,
            (w / s).ln(),
            (h / s).ln(),
        ],
    }
}

/// Builds dense targets for a batch. A box whose cell is already taken at
/// its level is left unassigned; it still counts at evaluation time.
pub fn assign_targets<S: Scalar>(
    annotations: &[Annotation],
    height: usize,
    width: usize,
    backbone: &BackboneConfig,
    num_classes: usize,
) -> Result<Targets<S>, DetectorError> {
    backbone.check_input(height, width)?;
    let strides = backbone.pyramid_strides();
    let grid = strides.map(|s| (height / s, width / s));
    let n = annotations.len().max(1);
    let mut levels: Vec<LevelTargets<S>> = grid
        .iter()
        .map(|&(gh, gw)| LevelTargets {
            cls: Tensor::zeros(&[n, num_classes, gh, gw]),
            boxes: Tensor::zeros(&[n, 4, gh, gw]),
            mask: Tensor::zeros(&[n, 4, gh, gw]),
        })
        .collect();
    let mut positives = 0;
    for (i, ann) in annotations.iter().enumerate() {
        if ann.boxes.len() != ann.classes.len() {
            return Err(DetectorError::Config(format!(
                "annotation {i}: {} boxes but {} classes",
                ann.boxes.len(),
                ann.classes.len()
            )));
        }
        for (b, &c) in ann.boxes.iter().zip(&ann.classes) {
            if c >= num_classes {
                return Err(DetectorError::Config(format!(
                    "annotation {i}: class {c} out of range for {num_classes} classes"
                )));
            }
            if !(b[2] > 0.0 && b[3] > 0.0) {
                return Err(DetectorError::Config(format!(
                    "annotation {i}: degenerate box {b:?}"
                )));
            }
            let a = assign_box(b, strides, grid);
            let (gh, gw) = grid[a.level];
            let plane = gh * gw;
            let cell = a.row * gw + a.col;
            let lt = &mut levels[a.level];
            if lt.mask.data()[i * 4 * plane + cell] != S::zero() {
                continue;
            }
            positives += 1;
            lt.cls.data_mut()[(i * num_classes + c) * plane + cell] = S::one();
            for k in 0..4 {
                let idx = (i * 4 + k) * plane + cell;
                lt.boxes.data_mut()[idx] = S::of(a.offsets[k]);
                lt.mask.data_mut()[idx] = S::one();
            }
        }
    }
    Ok(Targets { levels, positives })
}

/// Scalar loss of one head together with its unweighted parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<S> {
    pub total: Var,
    pub cls: S,
    pub boxes: S,
}

/// `lambda_cls * BCE + lambda_box * L1`.
///
/// BCE is averaged over every logit of every level (cells times
/// classes). L1 is averaged over the four offsets of positive cells and
/// is zero when there are none.
pub fn detection_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &HeadOutput,
    targets: &Targets<S>,
    weights: &LossWeights,
) -> Result<LossParts<S>, DetectorError> {
    if pred.levels.len() != targets.levels.len() {
        return Err(DetectorError::Config(format!(
            "{} predicted levels vs {} target levels",
            pred.levels.len(),
            targets.levels.len()
        )));
    }
    let mut cls_sum: Option<Var> = None;
    let mut box_sum: Option<Var> = None;
    let mut entries = 0usize;
    for (p, t) in pred.levels.iter().zip(&targets.levels) {
        for (v, want) in [(p.logits, t.cls.shape()), (p.boxes, t.boxes.shape())] {
            if tape.shape(v) != want {
                return Err(DetectorError::Config(format!(
                    "prediction {:?} does not match target {want:?}",
                    tape.shape(v)
                )));
            }
        }
        entries += t.cls.numel();
        let y = tape.constant(t.cls.clone());
        let bce = tape.bce_with_logits(p.logits, y)?;
        let s = tape.sum(bce);
        cls_sum = Some(match cls_sum {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        if targets.positives > 0 {
            let goal = tape.constant(t.boxes.clone());
            let mask = tape.constant(t.mask.clone());
            let d = tape.sub(p.boxes, goal)?;
            let d = tape.abs(d);
            let d = tape.mul(d, mask)?;
            let s = tape.sum(d);
            box_sum = Some(match box_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    let cls_sum = cls_sum.ok_or_else(|| DetectorError::Config("empty prediction".into()))?;
    let cls = tape.scale(cls_sum, S::one() / S::of(entries as f64));
    let cls_value = tape.value(cls).item();
    let mut total = tape.scale(cls, S::of(weights.lambda_cls));
    let mut box_value = S::zero();
    if let Some(bs) = box_sum {
        let mean = tape.scale(bs, S::one() / S::of(4.0 * targets.positives as f64));
        box_value = tape.value(mean).item();
        let weighted = tape.scale(mean, S::of(weights.lambda_box));
        total = tape.add(total, weighted)?;
    }
    Ok(LossParts {
        total,
        cls: cls_value,
        boxes: box_value,
    })
}

/// `alpha * L_fusion + beta * L_aux1 + gamma * L_aux2`. Terms whose
/// weight is zero are left out; a positive weight needs its loss.
pub fn rsc_total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    fusion: Option<Var>,
    aux1: Option<Var>,
    aux2: Option<Var>,
    weights: &LossWeights,
) -> Result<Var, DetectorError> {
    let mut total: Option<Var> = None;
    for (name, loss, w) in [
        ("fusion", fusion, weights.alpha),
        ("aux1", aux1, weights.beta),
        ("aux2", aux2, weights.gamma),
    ] {
        if w == 0.0 {
            continue;
        }
        let loss = loss.ok_or_else(|| {
            DetectorError::Config(format!("{name} loss missing but weighted by {w}"))
        })?;
        let term = tape.scale(loss, S::of(w));
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| DetectorError::Config("all loss weights are zero".into()))
}
