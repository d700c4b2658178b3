//! Closed-form gradient factors for a two-modality sigmoid classifier.
//!
//! A fused logit `l1 + l2 + b` (per-modality contributions plus bias)
//! backpropagates `sigmoid(l1 + l2 + b) - 1` to each branch on a positive
//! sample and `sigmoid(l1 + l2 + b)` on a negative one. The unimodal model
//! sees only `l1 + b`. With a nonnegative partner contribution the fused
//! positive factor is smaller in magnitude and the negative factor larger,
//! and the weaker modality loses more than the stronger one.

use serde::Serialize;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TheoryError {
    #[error("non-finite input `{0}`")]
    NonFinite(&'static str),
    #[error("premise violated: partner logit {0} is negative")]
    PremiseViolation(f64),
    #[error("precondition violated: weak logit {weak} must satisfy 0 <= weak < strong = {strong}")]
    WeakNotBelowStrong { weak: f64, strong: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SampleSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Modality {
    M1,
    M2,
}

/// Per-modality contributions to one class logit, plus the collapsed bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitDecomposition<S> {
    pub m1_logit: S,
    pub m2_logit: S,
    pub bias: S,
}

impl<S: Scalar> LogitDecomposition<S> {
    pub fn new(m1_logit: S, m2_logit: S, bias: S) -> Self {
        Self {
            m1_logit,
            m2_logit,
            bias,
        }
    }

    fn validate(&self) -> Result<(), TheoryError> {
        finite(self.m1_logit, "m1_logit")?;
        finite(self.m2_logit, "m2_logit")?;
        finite(self.bias, "bias")
    }
}

/// Gradient factors reaching branch 1, with the detection-module scale
/// factored out into `detection_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFactors<S> {
    pub multimodal_positive: S,
    pub multimodal_negative: S,
    pub unimodal_positive: S,
    pub unimodal_negative: S,
    pub detection_scale: S,
}

impl<S: Scalar> GradientFactors<S> {
    pub fn compute(ld: &LogitDecomposition<S>) -> Result<Self, TheoryError> {
        Ok(Self {
            multimodal_positive: multimodal_factor(ld, SampleSign::Positive)?,
            multimodal_negative: multimodal_factor(ld, SampleSign::Negative)?,
            unimodal_positive: unimodal_factor(ld.m1_logit, ld.bias, SampleSign::Positive)?,
            unimodal_negative: unimodal_factor(ld.m1_logit, ld.bias, SampleSign::Negative)?,
            detection_scale: S::one(),
        })
    }

    pub fn with_detection_scale(mut self, scale: S) -> Self {
        self.detection_scale = scale;
        self
    }

    /// Factors multiplied by the detection scale, in the order
    /// (multimodal +, multimodal -, unimodal +, unimodal -).
    pub fn scaled(&self) -> [S; 4] {
        let k = self.detection_scale;
        [
            self.multimodal_positive * k,
            self.multimodal_negative * k,
            self.unimodal_positive * k,
            self.unimodal_negative * k,
        ]
    }
}

/// Multimodal gradient factor minus unimodal factor for one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressionGap<S> {
    pub modality: Modality,
    pub gap: S,
}

fn finite<S: Scalar>(x: S, name: &'static str) -> Result<(), TheoryError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(TheoryError::NonFinite(name))
    }
}

/// `sigmoid(z) - 1` on positives, `sigmoid(z)` on negatives, computed
/// through `-sigmoid(-z)` so that saturation does not erase the factor.
fn factor<S: Scalar>(z: S, sign: SampleSign) -> S {
    match sign {
        SampleSign::Positive => -(-z).sigmoid(),
        SampleSign::Negative => z.sigmoid(),
    }
}

pub fn multimodal_factor<S: Scalar>(
    ld: &LogitDecomposition<S>,
    sign: SampleSign,
) -> Result<S, TheoryError> {
    ld.validate()?;
    Ok(factor(ld.m1_logit + ld.m2_logit + ld.bias, sign))
}

pub fn unimodal_factor<S: Scalar>(logit: S, bias: S, sign: SampleSign) -> Result<S, TheoryError> {
    finite(logit, "logit")?;
    finite(bias, "bias")?;
    Ok(factor(logit + bias, sign))
}

/// Signed margins by which the suppression inequalities hold:
/// `|unimodal +| - |multimodal +|` and `multimodal - - unimodal -`.
pub fn suppression_margins<S: Scalar>(ld: &LogitDecomposition<S>) -> Result<(S, S), TheoryError> {
    let f = GradientFactors::compute(ld)?;
    Ok((
        f.unimodal_positive.abs() - f.multimodal_positive.abs(),
        f.multimodal_negative - f.unimodal_negative,
    ))
}

/// Evaluates the suppression inequalities without checking the
/// nonnegativity premise. Both margins must be nonnegative, and strictly
/// positive whenever the partner logit is positive.
pub fn suppression_holds<S: Scalar>(ld: &LogitDecomposition<S>) -> Result<bool, TheoryError> {
    let (pos, neg) = suppression_margins(ld)?;
    let zero = S::zero();
    Ok(if ld.m2_logit > zero {
        pos > zero && neg > zero
    } else {
        pos >= zero && neg >= zero
    })
}

/// Positive-sample suppression plus the negative-sample corollary, under
/// the premise that the partner modality's logit is nonnegative.
pub fn check_suppression<S: Scalar>(ld: &LogitDecomposition<S>) -> Result<bool, TheoryError> {
    ld.validate()?;
    if ld.m2_logit < S::zero() {
        return Err(TheoryError::PremiseViolation(ld.m2_logit.as_f64()));
    }
    suppression_holds(ld)
}

/// Suppression gaps of the weak and strong modality and whether the weak
/// one is larger.
pub fn weak_modality_gap_ordering<S: Scalar>(
    weak_logit: S,
    strong_logit: S,
    bias: S,
) -> Result<(SuppressionGap<S>, SuppressionGap<S>, bool), TheoryError> {
    finite(weak_logit, "weak_logit")?;
    finite(strong_logit, "strong_logit")?;
    finite(bias, "bias")?;
    if weak_logit < S::zero() || weak_logit >= strong_logit {
        return Err(TheoryError::WeakNotBelowStrong {
            weak: weak_logit.as_f64(),
            strong: strong_logit.as_f64(),
        });
    }
    let joint = (weak_logit + strong_logit + bias).sigmoid();
    let weak = SuppressionGap {
        modality: Modality::M1,
        gap: joint - (weak_logit + bias).sigmoid(),
    };
    let strong = SuppressionGap {
        modality: Modality::M2,
        gap: joint - (strong_logit + bias).sigmoid(),
    };
    Ok((weak, strong, weak.gap > strong.gap))
}

const W1: [f64; 3] = [0.8, -0.3, 0.5];
const W2: [f64; 3] = [0.2, 0.6, -0.4];

/// Builds the two-logit sigmoid-BCE graph on a tape and returns the
/// relative error between the tape gradient with respect to the branch-1
/// features and `multimodal_factor * W1`.
pub fn autodiff_crosscheck<S: Scalar>(
    ld: &LogitDecomposition<S>,
    sign: SampleSign,
) -> Result<S, TheoryError> {
    let expected_factor = multimodal_factor(ld, sign)?;
    let w1: Vec<S> = W1.iter().map(|&x| S::of(x)).collect();
    let w2: Vec<S> = W2.iter().map(|&x| S::of(x)).collect();
    // features chosen so that <w, f> reproduces the requested logit
    let feats = |w: &[S], logit: S| -> Vec<S> {
        let nn = w.iter().fold(S::zero(), |a, &x| a + x * x);
        w.iter().map(|&x| x * logit / nn).collect()
    };
    let tensor = |d: Vec<S>| Tensor::new(vec![d.len()], d).expect("vector");
    let mut tape = Tape::new();
    let f1 = tape.constant(tensor(feats(&w1, ld.m1_logit)).with_requires_grad(true));
    let f2 = tape.constant(tensor(feats(&w2, ld.m2_logit)).with_requires_grad(true));
    let w1v = tape.constant(tensor(w1.clone()));
    let w2v = tape.constant(tensor(w2));
    let bias = tape.constant(Tensor::scalar(ld.bias));
    let target = tape.constant(Tensor::scalar(match sign {
        SampleSign::Positive => S::one(),
        SampleSign::Negative => S::zero(),
    }));
    let graph = (|| {
        let p1 = tape.mul(w1v, f1)?;
        let p2 = tape.mul(w2v, f2)?;
        let l1 = tape.sum(p1);
        let l2 = tape.sum(p2);
        let z = tape.add(l1, l2)?;
        let z = tape.add(z, bias)?;
        let loss = tape.bce_with_logits(z, target)?;
        tape.backward(loss, &mut ParamStore::new())
    })();
    graph.expect("fixed-shape graph");
    let got = tape.grad(f1).expect("f1 requires grad").data();
    let mut diff = S::zero();
    let mut norm = S::zero();
    for (g, w) in got.iter().zip(&w1) {
        let e = expected_factor * *w;
        diff += (*g - e) * (*g - e);
        norm += e * e;
    }
    let floor = S::of(1e-300);
    Ok(diff.sqrt() / norm.sqrt().max(floor))
}

/// Evenly spaced values `min, min + step, ..., <= max`. Empty when
/// `max < min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Axis {
    pub fn values(&self) -> Result<Vec<f64>, TheoryError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.step.is_finite()) {
            return Err(TheoryError::InvalidGrid("axis bounds must be finite".into()));
        }
        if self.step <= 0.0 {
            return Err(TheoryError::InvalidGrid(format!(
                "step {} must be positive",
                self.step
            )));
        }
        if self.max < self.min {
            return Ok(Vec::new());
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.min + i as f64 * self.step).collect())
    }
}

/// Verification grid over the two modality logits and a bias set.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryGrid {
    pub m1: Axis,
    pub m2: Axis,
    pub biases: Vec<f64>,
}

impl Default for TheoryGrid {
    fn default() -> Self {
        let axis = Axis {
            min: 0.0,
            max: 5.0,
            step: 0.1,
        };
        Self {
            m1: axis,
            m2: axis,
            biases: vec![-1.0, 0.0, 1.0],
        }
    }
}

/// Largest tolerated relative error between tape and closed form.
pub const CROSSCHECK_TOLERANCE: f64 = 1e-8;

/// One grid point of the sweep, as exported to CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m1_logit: f64,
    pub m2_logit: f64,
    pub bias: f64,
    pub multimodal_positive: f64,
    pub multimodal_negative: f64,
    pub unimodal_positive: f64,
    pub unimodal_negative: f64,
    pub positive_margin: f64,
    pub negative_margin: f64,
    /// Gaps with m1 treated as the weak modality; only when m1 < m2.
    pub gap_weak: Option<f64>,
    pub gap_strong: Option<f64>,
    pub suppression: bool,
    pub negative_corollary: bool,
    pub gap_ordering: Option<bool>,
    pub crosscheck_error: f64,
}

impl SweepRow {
    pub fn is_counterexample(&self) -> bool {
        !self.suppression
            || !self.negative_corollary
            || self.gap_ordering == Some(false)
            || !(self.crosscheck_error <= CROSSCHECK_TOLERANCE)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SweepSummary {
    pub points: usize,
    pub suppression_failures: usize,
    pub negative_failures: usize,
    pub ordering_checked: usize,
    pub ordering_failures: usize,
    pub crosscheck_failures: usize,
}

impl SweepSummary {
    pub fn counterexamples(&self) -> usize {
        self.suppression_failures
            + self.negative_failures
            + self.ordering_failures
            + self.crosscheck_failures
    }
}

/// Evaluates every grid point. Points with a negative partner logit are
/// evaluated without the premise check, so they can surface as
/// counterexamples.
pub fn sweep(grid: &TheoryGrid) -> Result<Vec<SweepRow>, TheoryError> {
    let m1s = grid.m1.values()?;
    let m2s = grid.m2.values()?;
    let mut rows = Vec::with_capacity(m1s.len() * m2s.len() * grid.biases.len());
    for &b in &grid.biases {
        for &m1 in &m1s {
            for &m2 in &m2s {
                rows.push(sweep_point(m1, m2, b)?);
            }
        }
    }
    Ok(rows)
}

fn sweep_point(m1: f64, m2: f64, b: f64) -> Result<SweepRow, TheoryError> {
    let ld = LogitDecomposition::new(m1, m2, b);
    let f = GradientFactors::compute(&ld)?;
    let (pos, neg) = suppression_margins(&ld)?;
    let strict = m2 > 0.0;
    let (gap_weak, gap_strong, gap_ordering) = if m1 >= 0.0 && m1 < m2 {
        let (w, s, ok) = weak_modality_gap_ordering(m1, m2, b)?;
        (Some(w.gap), Some(s.gap), Some(ok))
    } else {
        (None, None, None)
    };
    let crosscheck_error = autodiff_crosscheck(&ld, SampleSign::Positive)?
        .max(autodiff_crosscheck(&ld, SampleSign::Negative)?);
    Ok(SweepRow {
        m1_logit: m1,
        m2_logit: m2,
        bias: b,
        multimodal_positive: f.multimodal_positive,
        multimodal_negative: f.multimodal_negative,
        unimodal_positive: f.unimodal_positive,
        unimodal_negative: f.unimodal_negative,
        positive_margin: pos,
        negative_margin: neg,
        gap_weak,
        gap_strong,
        suppression: if strict { pos > 0.0 } else { pos >= 0.0 },
        negative_corollary: if strict { neg > 0.0 } else { neg >= 0.0 },
        gap_ordering,
        crosscheck_error,
    })
}

pub fn summarize(rows: &[SweepRow]) -> SweepSummary {
    let mut s = SweepSummary {
        points: rows.len(),
        ..Default::default()
    };
    for r in rows {
        s.suppression_failures += usize::from(!r.suppression);
        s.negative_failures += usize::from(!r.negative_corollary);
        if let Some(ok) = r.gap_ordering {
            s.ordering_checked += 1;
            s.ordering_failures += usize::from(!ok);
        }
        s.crosscheck_failures += usize::from(!(r.crosscheck_error <= CROSSCHECK_TOLERANCE));
    }
    s
}

/// Writes sweep rows as CSV with a header line.
pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SWEEP_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

const SWEEP_HEADER: [&str; 15] = [
    "m1_logit",
    "m2_logit",
    "bias",
    "multimodal_positive",
    "multimodal_negative",
    "unimodal_positive",
    "unimodal_negative",
    "positive_margin",
    "negative_margin",
    "gap_weak",
    "gap_strong",
    "suppression",
    "negative_corollary",
    "gap_ordering",
    "crosscheck_error",
];
