//! Experiment configuration, the baseline / RSC / RSC-MD ablation matrix
//! and its report.

mod config;
pub mod plot;
mod report;

pub use config::{parse_json, ConfigError, DatasetConfig, ExperimentConfig};
pub use report::{
    build_report, median, AblationRow, ExperimentReport, NormRow, ProbeRow, Provenance, RatioRow,
    RunRef, TheoryReport, REPORT_SCHEMA_VERSION,
};

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoupler::{PlanPreset, RoutePlan};
use crate::detector::{save_checkpoint, Branch, Detector, DetectorError, LossWeights, ModelKind};
use crate::synthgen::{generate_split, ModalitySample};
use crate::train::{
    evaluate, linear_probe, train, EvalResult, GradientTrace, ProbeResult, TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{method} (seed {seed}): {source}")]
    Run {
        method: Method,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One row of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    Rsc,
    RscMd,
    UnimodalM1,
    UnimodalM2,
}

impl Method {
    pub const ABLATION: [Method; 3] = [Method::Baseline, Method::Rsc, Method::RscMd];
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Rsc,
        Method::RscMd,
        Method::UnimodalM1,
        Method::UnimodalM2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Rsc => "rsc",
            Method::RscMd => "rsc-md",
            Method::UnimodalM1 => "unimodal-m1",
            Method::UnimodalM2 => "unimodal-m2",
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            Method::UnimodalM1 => ModelKind::Unimodal(Branch::M1),
            Method::UnimodalM2 => ModelKind::Unimodal(Branch::M2),
            _ => ModelKind::Multimodal,
        }
    }

    /// Route plan and loss weights of this row given the configured
    /// weights. The baseline drops both auxiliary terms.
    pub fn objective(self, weights: &LossWeights) -> (RoutePlan, LossWeights) {
        match self {
            Method::Baseline => (PlanPreset::Baseline.plan(), weights.baseline()),
            Method::Rsc => (PlanPreset::Rsc.plan(), *weights),
            Method::RscMd => (PlanPreset::RscMd.plan(), *weights),
            Method::UnimodalM1 | Method::UnimodalM2 => (RoutePlan::modality_decoupled(), *weights),
        }
    }

    pub fn probe_branches(self) -> Vec<Branch> {
        match self {
            Method::UnimodalM1 => vec![Branch::M1],
            Method::UnimodalM2 => vec![Branch::M2],
            _ => Branch::BOTH.to_vec(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Train and test splits of one seed.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub seed: u64,
    pub train: Vec<ModalitySample>,
    pub test: Vec<ModalitySample>,
}

impl SplitData {
    /// Training samples take indices `0..train`, test samples follow.
    pub fn generate(config: &ExperimentConfig, seed: u64) -> Self {
        let d = &config.dataset;
        let scene = d.scene(seed);
        Self {
            seed,
            train: generate_split(&scene, &d.profiles, 0, d.train_samples),
            test: generate_split(&scene, &d.profiles, d.train_samples as u64, d.test_samples),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub model: Detector<f64>,
    pub trace: GradientTrace,
    pub eval: EvalResult,
    pub probes: Vec<ProbeResult>,
}

impl RunOutcome {
    pub fn id(&self) -> String {
        format!("{}-seed{}", self.method, self.seed)
    }

    pub fn probe(&self, branch: Branch) -> Option<&ProbeResult> {
        self.probes.iter().find(|p| p.branch == branch)
    }
}

/// Trains, evaluates and probes one row of the matrix.
pub fn run_one(
    config: &ExperimentConfig,
    method: Method,
    data: &SplitData,
) -> Result<RunOutcome, ExperimentError> {
    let seed = data.seed;
    let wrap = |source| ExperimentError::Run {
        method,
        seed,
        source,
    };
    let mut model = Detector::<f64>::new(config.model.clone(), method.kind(), seed)?;
    let (plan, weights) = method.objective(&config.loss);
    let opt = crate::train::OptimizerConfig {
        seed,
        ..config.optimizer.clone()
    };
    log::info!("{method} seed {seed}: training");
    let trace = train(&mut model, &data.train, &plan, &weights, &opt).map_err(wrap)?;
    let eval = evaluate(&model, &data.test, &config.decode).map_err(wrap)?;
    let probe_opt = crate::train::OptimizerConfig {
        seed,
        ..config.probe_optimizer.clone()
    };
    let mut probes = Vec::new();
    for branch in method.probe_branches() {
        log::info!("{method} seed {seed}: probing {}", branch.name());
        probes.push(
            linear_probe(
                &model,
                branch,
                &data.train,
                &data.test,
                &probe_opt,
                &config.loss,
                &config.decode,
            )
            .map_err(wrap)?,
        );
    }
    log::info!(
        "{method} seed {seed}: AP50-95 {:.4}, AP50 {:.4}",
        eval.mean_ap50_95,
        eval.mean_ap50
    );
    Ok(RunOutcome {
        method,
        seed,
        model,
        trace,
        eval,
        probes,
    })
}

/// Runs `methods` for every configured seed on a pool of `workers`
/// threads. Runs of one seed share their data; results come back in
/// (seed, method) order regardless of scheduling.
pub fn run_matrix(
    config: &ExperimentConfig,
    methods: &[Method],
    workers: usize,
) -> Result<Vec<RunOutcome>, ExperimentError> {
    use rayon::prelude::*;
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    pool.install(|| {
        let data: Vec<SplitData> = config
            .seeds()
            .into_iter()
            .map(|s| SplitData::generate(config, s))
            .collect();
        let jobs: Vec<(usize, Method)> = (0..data.len())
            .flat_map(|d| methods.iter().map(move |&m| (d, m)))
            .collect();
        jobs.par_iter()
            .map(|&(d, m)| run_one(config, m, &data[d]))
            .collect()
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes checkpoint, trace CSV, evaluation and probe JSON of one run.
pub fn write_run(dir: &Path, run: &RunOutcome) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    save_checkpoint(&run.model, &dir.join("checkpoint"))?;
    let mut csv = Vec::new();
    run.trace
        .write_csv(&mut csv)
        .map_err(|e| ExperimentError::Io {
            path: dir.join("trace.csv").display().to_string(),
            source: std::io::Error::other(e),
        })?;
    write_file(&dir.join("trace.csv"), &csv)?;
    let eval = serde_json::to_vec_pretty(&run.eval).expect("eval serializes");
    write_file(&dir.join("eval.json"), &eval)?;
    let probes = serde_json::to_vec_pretty(&run.probes).expect("probes serialize");
    write_file(&dir.join("probes.json"), &probes)?;
    Ok(())
}

/// Writes the full report bundle into `dir`: `report.json`, CSV tables,
/// SVG plots derived from them and one directory per run under `runs/`.
pub fn write_bundle(
    dir: &Path,
    report: &ExperimentReport,
    runs: &[RunOutcome],
) -> Result<(), ExperimentError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(dir.join("plots")).map_err(io(dir))?;
    for run in runs {
        write_run(&dir.join("runs").join(run.id()), run)?;
    }
    write_file(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_file(&dir.join("ablation.csv"), report.ablation_csv().as_bytes())?;
    write_file(&dir.join("probes.csv"), report.probe_csv().as_bytes())?;
    write_file(&dir.join("gradients.csv"), report.gradient_csv().as_bytes())?;

    let bars: Vec<(String, f64)> = report
        .ablation
        .iter()
        .map(|r| (r.method.name().to_string(), r.median_ap50_95))
        .collect();
    let svg = plot::bar_chart("Fusion-head AP50-95 (median over seeds)", "AP50-95", &bars);
    write_file(&dir.join("plots/ablation.svg"), svg.as_bytes())?;

    let first_seed = report.provenance.seeds.first().copied();
    for branch in Branch::BOTH {
        let series: Vec<plot::Series> = runs
            .iter()
            .filter(|r| Some(r.seed) == first_seed && r.method.probe_branches().contains(&branch))
            .map(|r| {
                let pts: Vec<(f64, f64)> = r
                    .trace
                    .records
                    .iter()
                    .filter(|t| t.branch == branch)
                    .map(|t| (t.step as f64, t.probe_grad_norm))
                    .collect();
                let window = (pts.len() / 60).max(1);
                plot::Series {
                    label: r.method.name().to_string(),
                    points: plot::smooth(&pts, window),
                }
            })
            .collect();
        let title = format!("Probe-stage gradient norm, branch {}", branch.name());
        let svg = plot::line_chart(&title, "step", "gradient L2 norm", &series);
        let name = format!("plots/gradient_{}.svg", branch.name());
        write_file(&dir.join(name), svg.as_bytes())?;
    }
    Ok(())
}
