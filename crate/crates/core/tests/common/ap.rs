//! Exhaustive average-precision matcher for small random instances.

use fdl_core::detector::Annotation;
use fdl_core::train::{average_precision, iou, Detection, IOU_THRESHOLDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 2;

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    // coarse grid so that IoU ties and exact threshold hits occur
    let x = rng.random_range(0..6) as f64 * 2.0;
    let y = rng.random_range(0..6) as f64 * 2.0;
    let w = rng.random_range(1..5) as f64 * 2.0;
    let h = rng.random_range(1..5) as f64 * 2.0;
    [x, y, w, h]
}

fn jitter(rng: &mut ChaCha8Rng, b: [f64; 4]) -> [f64; 4] {
    let d = |rng: &mut ChaCha8Rng| rng.random_range(-1..=1) as f64;
    [b[0] + d(rng), b[1] + d(rng), (b[2] + d(rng)).max(1.0), (b[3] + d(rng)).max(1.0)]
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<Annotation>) {
    let images = rng.random_range(1..=3);
    let mut truth = Vec::new();
    let mut dets = Vec::new();
    for image in 0..images {
        let g = rng.random_range(0..=3);
        let mut boxes: Vec<[f64; 4]> = Vec::new();
        for _ in 0..g {
            // crowded objects make one prediction eligible for several
            let b = match boxes.last() {
                Some(&prev) if rng.random_bool(0.5) => jitter(rng, prev),
                _ => random_box(rng),
            };
            boxes.push(b);
        }
        let single_class = rng.random_bool(0.5);
        let ann = Annotation {
            boxes,
            classes: (0..g)
                .map(|_| if single_class { 0 } else { rng.random_range(0..CLASSES) })
                .collect(),
        };
        for _ in 0..rng.random_range(0..=5) {
            let bbox = if g > 0 && rng.random_bool(0.7) {
                let target = ann.boxes[rng.random_range(0..g)];
                jitter(rng, target)
            } else {
                random_box(rng)
            };
            dets.push(Detection {
                image,
                class: rng.random_range(0..CLASSES),
                // few distinct scores, so ranking ties are exercised
                score: rng.random_range(1..=4) as f64 / 4.0,
                bbox,
            });
        }
        truth.push(ann);
    }
    (dets, truth)
}

/// Priority of one prediction's outcome: matched beats unmatched, then
/// higher IoU, then the lower ground-truth index.
type Key = (bool, f64, i64);

/// Enumerates every injective assignment of ranked predictions to
/// eligible ground truths and returns the match flags of the assignment
/// whose outcome keys are lexicographically largest.
fn exhaustive_hits(ranked: &[Detection], truth: &[Annotation], class: usize, thr: f64) -> Vec<bool> {
    #[allow(clippy::too_many_arguments)]
    fn go(
        i: usize,
        ranked: &[Detection],
        truth: &[Annotation],
        class: usize,
        thr: f64,
        taken: &mut Vec<Vec<bool>>,
        keys: &mut Vec<Key>,
        best: &mut Option<Vec<Key>>,
    ) {
        if i == ranked.len() {
            let better = match best {
                None => true,
                Some(b) => keys.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| {
                    x.partial_cmp(y).expect("finite keys").is_gt()
                }),
            };
            if better {
                *best = Some(keys.clone());
            }
            return;
        }
        let d = &ranked[i];
        keys.push((false, 0.0, 0));
        go(i + 1, ranked, truth, class, thr, taken, keys, best);
        keys.pop();
        let ann = &truth[d.image];
        for g in 0..ann.boxes.len() {
            let v = iou(&d.bbox, &ann.boxes[g]);
            if ann.classes[g] != class || taken[d.image][g] || v < thr {
                continue;
            }
            taken[d.image][g] = true;
            keys.push((true, v, -(g as i64)));
            go(i + 1, ranked, truth, class, thr, taken, keys, best);
            keys.pop();
            taken[d.image][g] = false;
        }
    }
    let mut taken: Vec<Vec<bool>> = truth.iter().map(|a| vec![false; a.boxes.len()]).collect();
    let mut best = None;
    go(0, ranked, truth, class, thr, &mut taken, &mut Vec::new(), &mut best);
    best.unwrap().iter().map(|k| k.0).collect()
}

/// All-point interpolated AP as the area under the precision envelope,
/// summed over recall increments.
fn area_under_envelope(hits: &[bool], total: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / total as f64, tp as f64 / (k + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    area
}

pub fn oracle_ap(dets: &[Detection], truth: &[Annotation], class: usize, thr: f64) -> Option<f64> {
    let total = truth
        .iter()
        .flat_map(|a| &a.classes)
        .filter(|&&c| c == class)
        .count();
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Detection)> = dets
        .iter()
        .copied()
        .filter(|d| d.class == class)
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    let ranked: Vec<Detection> = ranked.into_iter().map(|x| x.1).collect();
    let hits = exhaustive_hits(&ranked, truth, class, thr);
    Some(area_under_envelope(&hits, total))
}

/// Worst disagreement between `average_precision` and the exhaustive
/// matcher over `n` instances.
#[derive(Debug, Default)]
pub struct Agreement {
    /// Class instances with ground truth, compared at AP50-95.
    pub compared: usize,
    pub max_error: f64,
    /// Classes where exactly one side reported an AP.
    pub presence_mismatches: usize,
}

pub fn agreement(seed: u64, n: usize) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Agreement::default();
    for _ in 0..n {
        let (dets, truth) = instance(&mut rng);
        let result = average_precision(&dets, &truth, CLASSES);
        for class in 0..CLASSES {
            let per_threshold: Vec<Option<f64>> = IOU_THRESHOLDS
                .iter()
                .map(|&t| oracle_ap(&dets, &truth, class, t))
                .collect();
            let ap50 = per_threshold[0];
            let ap50_95 = ap50.map(|_| {
                per_threshold.iter().flatten().fold(0.0, |a, b| a + b) / IOU_THRESHOLDS.len() as f64
            });
            for (got, want) in [
                (result.per_class_ap50[class], ap50),
                (result.per_class_ap50_95[class], ap50_95),
            ] {
                match (got, want) {
                    (Some(a), Some(b)) => out.max_error = out.max_error.max((a - b).abs()),
                    (None, None) => {}
                    _ => out.presence_mismatches += 1,
                }
            }
            if ap50_95.is_some() && result.per_class_ap50_95[class].is_some() {
                out.compared += 1;
            }
        }
    }
    out
}
