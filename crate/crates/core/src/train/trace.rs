use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::Branch;
use crate::train::TrainError;

/// Gradient and loss measurements of one branch at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub branch: Branch,
    /// L2 norm of the full gradient over the probe-stage parameters.
    pub probe_grad_norm: f64,
    /// L2 norm over the whole backbone of the gradient contributed by the
    /// fusion loss alone.
    pub fusion_grad_norm: f64,
    pub loss_total: f64,
    pub loss_fusion: Option<f64>,
    pub loss_aux1: Option<f64>,
    pub loss_aux2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub records: Vec<TraceRecord>,
}

impl GradientTrace {
    pub fn branches(&self) -> Vec<Branch> {
        let mut out: Vec<Branch> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.branch) {
                out.push(r.branch);
            }
        }
        out.sort_by_key(|b| b.index());
        out
    }

    pub fn mean_probe_norm(&self, branch: Branch) -> Option<f64> {
        let norms: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.branch == branch)
            .map(|r| r.probe_grad_norm)
            .collect();
        (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64)
    }

    pub fn max_fusion_norm(&self, branch: Branch) -> f64 {
        self.records
            .iter()
            .filter(|r| r.branch == branch)
            .map(|r| r.fusion_grad_norm)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(input);
        let records = r.deserialize().collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRatio {
    pub branch: Branch,
    pub mean_a: f64,
    pub mean_b: f64,
    pub ratio: f64,
}

/// Ratio of mean probe-stage gradient norms, `a / b`, per branch.
pub fn gradient_ratio_report(
    a: &GradientTrace,
    b: &GradientTrace,
) -> Result<Vec<BranchRatio>, TrainError> {
    let (ba, bb) = (a.branches(), b.branches());
    if ba != bb || ba.is_empty() {
        return Err(TrainError::Mismatch(format!(
            "trace branches differ: {ba:?} vs {bb:?}"
        )));
    }
    Ok(ba
        .into_iter()
        .map(|branch| {
            let mean_a = a.mean_probe_norm(branch).expect("branch present");
            let mean_b = b.mean_probe_norm(branch).expect("branch present");
            BranchRatio {
                branch,
                mean_a,
                mean_b,
                ratio: mean_a / mean_b,
            }
        })
        .collect())
}
