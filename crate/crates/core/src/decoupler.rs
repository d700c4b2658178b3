//! Gradient router between the two backbones and their three consumers.
//!
//! Outputs are indexed 0 (auxiliary head 1), 1 (auxiliary head 2) and
//! 2 (fusion). Every output carries an exact copy of its inputs forward;
//! backward, output `j` passes gradient to input `i` iff
//! `pass[j][i] == 1`. Auxiliary head `j` reads only modality `j`, so the
//! off-diagonal entries of rows 0 and 1 have no path to act on.

use serde::{Deserialize, Serialize};

use crate::autodiff::{stop_and_route, Tape, Tensor, ROUTE_INPUTS, ROUTE_OUTPUTS};
use crate::detector::FeaturePyramid;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecouplerError {
    #[error("pass matrix entries must be 0 or 1, got {0} at row {1}, column {2}")]
    NonBinary(u8, usize, usize),
    #[error("gradient shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoutePlan {
    pass: [[u8; ROUTE_INPUTS]; ROUTE_OUTPUTS],
}

impl RoutePlan {
    pub fn new(pass: [[u8; ROUTE_INPUTS]; ROUTE_OUTPUTS]) -> Result<Self, DecouplerError> {
        for (j, row) in pass.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(DecouplerError::NonBinary(v, j, i));
                }
            }
        }
        Ok(Self { pass })
    }

    /// Each auxiliary output feeds its own backbone; fusion feeds neither.
    pub fn modality_decoupled() -> Self {
        let mut pass = [[0; ROUTE_INPUTS]; ROUTE_OUTPUTS];
        for (j, row) in pass.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = stop_and_route(i, j).expect("indices in range");
            }
        }
        Self { pass }
    }

    /// Router disabled: every output feeds every input.
    pub fn all_pass() -> Self {
        Self {
            pass: [[1; ROUTE_INPUTS]; ROUTE_OUTPUTS],
        }
    }

    /// Naive-addition training: only the fusion path reaches the backbones.
    pub fn baseline() -> Self {
        Self {
            pass: [[0, 0], [0, 0], [1, 1]],
        }
    }

    /// Full stop-gradient; backbones receive nothing.
    pub fn blocked() -> Self {
        Self {
            pass: [[0; ROUTE_INPUTS]; ROUTE_OUTPUTS],
        }
    }

    pub fn pass_matrix(&self) -> [[u8; ROUTE_INPUTS]; ROUTE_OUTPUTS] {
        self.pass
    }

    pub fn coefficient(&self, output: usize, input: usize) -> u8 {
        self.pass[output][input]
    }
}

/// Named plan presets accepted in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanPreset {
    Baseline,
    Rsc,
    RscMd,
}

impl PlanPreset {
    pub fn plan(self) -> RoutePlan {
        match self {
            PlanPreset::Baseline => RoutePlan::baseline(),
            PlanPreset::Rsc => RoutePlan::all_pass(),
            PlanPreset::RscMd => RoutePlan::modality_decoupled(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlanPreset::Baseline => "baseline",
            PlanPreset::Rsc => "rsc",
            PlanPreset::RscMd => "rsc-md",
        }
    }

    pub const ALL: [PlanPreset; 3] = [PlanPreset::Baseline, PlanPreset::Rsc, PlanPreset::RscMd];
}

/// A preset name or an explicit 3x2 pass matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanSpec {
    Preset(PlanPreset),
    Matrix([[u8; ROUTE_INPUTS]; ROUTE_OUTPUTS]),
}

impl Default for PlanSpec {
    fn default() -> Self {
        PlanSpec::Preset(PlanPreset::RscMd)
    }
}

impl PlanSpec {
    pub fn resolve(&self) -> Result<RoutePlan, DecouplerError> {
        match self {
            PlanSpec::Preset(p) => Ok(p.plan()),
            PlanSpec::Matrix(m) => RoutePlan::new(*m),
        }
    }
}

/// Router outputs: one view per auxiliary head and a pair for fusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutedViews {
    pub aux1: FeaturePyramid,
    pub aux2: FeaturePyramid,
    pub fusion: (FeaturePyramid, FeaturePyramid),
}

pub fn route_forward<S: Scalar>(
    tape: &mut Tape<S>,
    f1: &FeaturePyramid,
    f2: &FeaturePyramid,
    plan: &RoutePlan,
) -> RoutedViews {
    let mut view = |f: &FeaturePyramid, output: usize, input: usize| FeaturePyramid {
        levels: f
            .levels
            .iter()
            .map(|&v| tape.route(v, S::of(f64::from(plan.coefficient(output, input)))))
            .collect(),
    };
    RoutedViews {
        aux1: view(f1, 0, 0),
        aux2: view(f2, 1, 1),
        fusion: (view(f1, 2, 0), view(f2, 2, 1)),
    }
}

/// Gradients arriving at the router outputs, one tensor per level.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGrads<S> {
    pub aux1: Vec<Tensor<S>>,
    pub aux2: Vec<Tensor<S>>,
    pub fusion: (Vec<Tensor<S>>, Vec<Tensor<S>>),
}

/// Gradients the router hands to backbone 1 and backbone 2.
pub fn effective_gradient<S: Scalar>(
    plan: &RoutePlan,
    upstream: &UpstreamGrads<S>,
) -> Result<(Vec<Tensor<S>>, Vec<Tensor<S>>), DecouplerError> {
    let combine = |own: &[Tensor<S>], fused: &[Tensor<S>], input: usize| {
        if own.len() != fused.len() {
            return Err(DecouplerError::Shape(format!(
                "{} auxiliary levels vs {} fusion levels",
                own.len(),
                fused.len()
            )));
        }
        own.iter()
            .zip(fused)
            .map(|(a, f)| {
                if a.shape() != f.shape() {
                    return Err(DecouplerError::Shape(format!(
                        "{:?} vs {:?}",
                        a.shape(),
                        f.shape()
                    )));
                }
                let ca = S::of(f64::from(plan.coefficient(input, input)));
                let cf = S::of(f64::from(plan.coefficient(2, input)));
                let data = a
                    .data()
                    .iter()
                    .zip(f.data())
                    .map(|(&x, &y)| ca * x + cf * y)
                    .collect();
                Ok(Tensor::new(a.shape().to_vec(), data).expect("same shape"))
            })
            .collect::<Result<Vec<_>, _>>()
    };
    Ok((
        combine(&upstream.aux1, &upstream.fusion.0, 0)?,
        combine(&upstream.aux2, &upstream.fusion.1, 1)?,
    ))
}
