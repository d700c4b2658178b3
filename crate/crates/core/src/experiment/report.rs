use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Method, RunOutcome};
use crate::detector::Branch;
use crate::theory::{SweepRow, SweepSummary};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Where a number came from: config digest, seeds and tool versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub crate_version: String,
    pub dataset_format_version: u32,
    pub runs: Vec<RunRef>,
}

/// A run directory relative to the report, keyed by method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRef {
    pub id: String,
    pub method: Method,
    pub seed: u64,
    pub dir: String,
}

/// Fusion-head AP of one method, per seed (in `provenance.seeds` order)
/// and as the median over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub ap50: Vec<f64>,
    pub ap75: Vec<f64>,
    pub ap50_95: Vec<f64>,
    pub median_ap50: f64,
    pub median_ap75: f64,
    pub median_ap50_95: f64,
}

/// Mean probe-stage gradient norm of `method` divided by the baseline's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub method: Method,
    pub branch: Branch,
    pub ratio: Vec<f64>,
    pub median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub method: Method,
    pub branch: Branch,
    pub mean_probe_norm: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub method: Method,
    pub branch: Branch,
    pub ap50_95: Vec<f64>,
    pub median_ap50_95: f64,
    pub backbone_digest: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub summary: SweepSummary,
    pub max_crosscheck_error: f64,
    pub passed: bool,
}

impl TheoryReport {
    pub fn from_rows(rows: &[SweepRow]) -> Self {
        let summary = crate::theory::summarize(rows);
        Self {
            max_crosscheck_error: rows.iter().map(|r| r.crosscheck_error).fold(0.0, f64::max),
            passed: summary.counterexamples() == 0,
            summary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub ablation: Vec<AblationRow>,
    pub gradient_ratios: Vec<RatioRow>,
    pub branch_norms: Vec<NormRow>,
    pub probes: Vec<ProbeRow>,
    pub theory: Option<TheoryReport>,
    pub provenance: Provenance,
}

/// Median of a nonempty sample; the mean of the middle pair for even
/// lengths. NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn runs_of(runs: &[RunOutcome], method: Method) -> Vec<&RunOutcome> {
    let mut out: Vec<&RunOutcome> = runs.iter().filter(|r| r.method == method).collect();
    out.sort_by_key(|r| r.seed);
    out
}

fn baseline_norm(runs: &[RunOutcome], seed: u64, branch: Branch) -> Option<f64> {
    runs.iter()
        .find(|r| r.method == Method::Baseline && r.seed == seed)
        .and_then(|r| r.trace.mean_probe_norm(branch))
}

/// Assembles the report from finished runs. Rows follow `Method::ALL`
/// order and skip methods without runs; run directories are named by
/// `RunOutcome::id` under `runs/`.
pub fn build_report(
    config: &ExperimentConfig,
    runs: &[RunOutcome],
    theory: Option<TheoryReport>,
) -> ExperimentReport {
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let mut ablation = Vec::new();
    let mut gradient_ratios = Vec::new();
    let mut branch_norms = Vec::new();
    let mut probes = Vec::new();
    for method in Method::ALL {
        let rs = runs_of(runs, method);
        if rs.is_empty() {
            continue;
        }
        let pick = |f: fn(&RunOutcome) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
        let ap50 = pick(|r| r.eval.mean_ap50);
        let ap75 = pick(|r| r.eval.mean_ap75);
        let ap50_95 = pick(|r| r.eval.mean_ap50_95);
        ablation.push(AblationRow {
            method,
            median_ap50: median(&ap50),
            median_ap75: median(&ap75),
            median_ap50_95: median(&ap50_95),
            ap50,
            ap75,
            ap50_95,
        });
        for branch in method.probe_branches() {
            let norms: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.trace.mean_probe_norm(branch))
                .collect();
            if norms.len() == rs.len() {
                branch_norms.push(NormRow {
                    method,
                    branch,
                    median: median(&norms),
                    mean_probe_norm: norms,
                });
            }
            if matches!(method, Method::Rsc | Method::RscMd) {
                let ratio: Option<Vec<f64>> = rs
                    .iter()
                    .map(|r| {
                        let a = r.trace.mean_probe_norm(branch)?;
                        Some(a / baseline_norm(runs, r.seed, branch)?)
                    })
                    .collect();
                if let Some(ratio) = ratio {
                    gradient_ratios.push(RatioRow {
                        method,
                        branch,
                        median_ratio: median(&ratio),
                        ratio,
                    });
                }
            }
            let found: Vec<_> = rs.iter().filter_map(|r| r.probe(branch)).collect();
            if found.len() == rs.len() {
                let ap: Vec<f64> = found.iter().map(|p| p.ap50_95).collect();
                probes.push(ProbeRow {
                    method,
                    branch,
                    median_ap50_95: median(&ap),
                    ap50_95: ap,
                    backbone_digest: found.iter().map(|p| p.backbone_digest.clone()).collect(),
                });
            }
        }
    }

    let mut refs: Vec<RunRef> = runs
        .iter()
        .map(|r| RunRef {
            id: r.id(),
            method: r.method,
            seed: r.seed,
            dir: format!("runs/{}", r.id()),
        })
        .collect();
    refs.sort_by(|a, b| (a.seed, a.method as u8).cmp(&(b.seed, b.method as u8)));

    ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        ablation,
        gradient_ratios,
        branch_norms,
        probes,
        theory,
        provenance: Provenance {
            config_sha256: config.hash(),
            seeds,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format_version: crate::synthgen::FORMAT_VERSION,
            runs: refs,
        },
    }
}

impl ExperimentReport {
    pub fn row(&self, method: Method) -> Option<&AblationRow> {
        self.ablation.iter().find(|r| r.method == method)
    }

    pub fn probe(&self, method: Method, branch: Branch) -> Option<&ProbeRow> {
        self.probes
            .iter()
            .find(|r| r.method == method && r.branch == branch)
    }

    pub fn ratio(&self, method: Method, branch: Branch) -> Option<&RatioRow> {
        self.gradient_ratios
            .iter()
            .find(|r| r.method == method && r.branch == branch)
    }

    pub fn norm(&self, method: Method, branch: Branch) -> Option<&NormRow> {
        self.branch_norms
            .iter()
            .find(|r| r.method == method && r.branch == branch)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Ablation table as CSV: one line per method with medians.
    pub fn ablation_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "median_ap50", "median_ap75", "median_ap50_95", "seeds"])
            .expect("in-memory csv");
        for r in &self.ablation {
            w.write_record([
                r.method.name().to_string(),
                r.median_ap50.to_string(),
                r.median_ap75.to_string(),
                r.median_ap50_95.to_string(),
                r.ap50_95.len().to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn probe_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "branch", "median_ap50_95"])
            .expect("in-memory csv");
        for r in &self.probes {
            w.write_record([
                r.method.name(),
                r.branch.name(),
                &r.median_ap50_95.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn gradient_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "branch", "median_mean_probe_norm", "median_ratio_vs_baseline"])
            .expect("in-memory csv");
        for r in &self.branch_norms {
            let ratio = match r.method {
                Method::Baseline => "1".to_string(),
                m => self
                    .ratio(m, r.branch)
                    .map(|x| x.median_ratio.to_string())
                    .unwrap_or_default(),
            };
            w.write_record([
                r.method.name(),
                r.branch.name(),
                &r.median.to_string(),
                &ratio,
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}
