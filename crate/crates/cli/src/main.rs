//! `fdl`: theory verification, data generation, training, probing,
//! evaluation and the ablation matrix from one JSON config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fdl_core::detector::{load_checkpoint, save_checkpoint, Branch, Detector};
use fdl_core::experiment::{
    build_report, parse_json, run_matrix, write_bundle, ConfigError, ExperimentConfig, Method,
    SplitData, TheoryReport,
};
use fdl_core::synthgen::{read_dataset, write_dataset, ModalitySample, SynthError};
use fdl_core::theory::{self, TheoryGrid};
use fdl_core::train::{evaluate, linear_probe, train, TrainError};

#[derive(Parser, Debug)]
#[command(name = "fdl", version, about = "Fusion degradation lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON config (a grid for verify-theory, an experiment otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; refused if it exists and is not empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the ablation matrix.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sweep the gradient-theory grid; exit 1 on any counterexample.
    VerifyTheory,
    /// Write train/ and test/ datasets.
    GenData,
    /// Train one model as described by the config's kind, plan and loss.
    Train {
        /// Dataset root written by gen-data; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Retrain a fresh head on one frozen branch of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        branch: BranchArg,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run baseline / rsc / rsc-md for every seed and write the report.
    Ablate {
        /// Also train unimodal reference models (needed for probe ordering).
        #[arg(long)]
        with_unimodal: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BranchArg {
    M1,
    M2,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::M1 => Branch::M1,
            BranchArg::M2 => Branch::M2,
        }
    }
}

/// Failure classes with distinct exit codes.
#[derive(Debug, thiserror::Error)]
enum Failure {
    /// Verification finished and found counterexamples.
    #[error("{0} counterexample(s) found")]
    Counterexamples(usize),
    /// Bad input: config, flags or output directory policy.
    #[error("{0:#}")]
    Input(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Counterexamples(_) => 1,
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn classify(e: anyhow::Error) -> Failure {
    let input = e.chain().any(|c| {
        c.is::<ConfigError>()
            || c.is::<OutputExists>()
            || c.is::<SynthError>()
            || c.is::<BadInput>()
            || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
    });
    if input {
        Failure::Input(e)
    } else {
        Failure::Runtime(e)
    }
}

/// Marks a failure to load a user-supplied file.
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
struct BadInput(anyhow::Error);

fn load_model(checkpoint: &Path) -> Result<Detector<f64>> {
    load_checkpoint(checkpoint)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))
        .map_err(|e| BadInput(e).into())
}

#[derive(Debug, thiserror::Error)]
#[error("output directory {0} exists and is not empty (pass --force to replace it)")]
struct OutputExists(String);

fn init_logging() {
    const LEVELS: [&str; 4] = ["error", "warn", "info", "debug"];
    let requested = std::env::var("FDL_LOG_LEVEL").ok();
    let level = match requested.as_deref() {
        None => "warn",
        Some(l) if LEVELS.contains(&l) => l,
        Some(other) => {
            eprintln!("warning: FDL_LOG_LEVEL={other} is not one of {LEVELS:?}; using warn");
            "warn"
        }
    };
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::VerifyTheory => verify_theory(g),
        Command::GenData => gen_data(g).map_err(classify),
        Command::Train { data } => train_cmd(g, data.as_deref()).map_err(classify),
        Command::Probe {
            checkpoint,
            branch,
            data,
        } => probe_cmd(g, checkpoint, (*branch).into(), data.as_deref()).map_err(classify),
        Command::Eval { checkpoint, data } => {
            eval_cmd(g, checkpoint, data.as_deref()).map_err(classify)
        }
        Command::Ablate { with_unimodal } => ablate(g, *with_unimodal).map_err(classify),
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| BadInput(e).into())
}

fn load_experiment(g: &Global) -> Result<ExperimentConfig> {
    let mut config = match &g.config {
        Some(p) => ExperimentConfig::from_json(&read_config(p)?)
            .with_context(|| format!("config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Resolves `--out` (or the config's `output_dir`) and applies the
/// overwrite policy.
fn prepare_out(g: &Global, config_dir: Option<&str>) -> Result<PathBuf> {
    let out = g
        .out
        .clone()
        .or_else(|| config_dir.map(PathBuf::from))
        .ok_or_else(|| ConfigError {
            pointer: "/output_dir".into(),
            message: "no output directory: pass --out or set output_dir".into(),
        })?;
    if out.exists() {
        let occupied = !out.is_dir()
            || fs::read_dir(&out)
                .with_context(|| format!("listing {}", out.display()))?
                .next()
                .is_some();
        if occupied {
            if !g.force {
                bail!(OutputExists(out.display().to_string()));
            }
            if out.is_dir() {
                fs::remove_dir_all(&out)
            } else {
                fs::remove_file(&out)
            }
            .with_context(|| format!("removing {}", out.display()))?;
        }
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn verify_theory(g: &Global) -> Result<(), Failure> {
    let input = |e: anyhow::Error| Failure::Input(e);
    let grid: TheoryGrid = match &g.config {
        Some(p) => parse_json(&read_config(p).map_err(input)?)
            .with_context(|| format!("grid {}", p.display()))
            .map_err(input)?,
        None => TheoryGrid::default(),
    };
    let rows = theory::sweep(&grid)
        .context("invalid grid")
        .map_err(input)?;
    let mut csv = Vec::new();
    theory::write_csv(&rows, &mut csv)
        .context("formatting CSV")
        .map_err(Failure::Runtime)?;
    match &g.out {
        Some(_) => {
            let out = prepare_out(g, None).map_err(classify)?;
            write(&out.join("theory.csv"), &csv).map_err(Failure::Runtime)?;
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    let report = TheoryReport::from_rows(&rows);
    let bad: Vec<_> = rows.iter().filter(|r| r.is_counterexample()).collect();
    eprintln!(
        "{} points, {} counterexamples, max cross-check error {:.3e}",
        report.summary.points,
        bad.len(),
        report.max_crosscheck_error
    );
    if bad.is_empty() {
        return Ok(());
    }
    for r in bad.iter().take(50) {
        eprintln!(
            "counterexample: m1={} m2={} b={} suppression={} negative={} ordering={:?} crosscheck={:.3e}",
            r.m1_logit,
            r.m2_logit,
            r.bias,
            r.suppression,
            r.negative_corollary,
            r.gap_ordering,
            r.crosscheck_error
        );
    }
    if bad.len() > 50 {
        eprintln!("... {} more", bad.len() - 50);
    }
    Err(Failure::Counterexamples(bad.len()))
}

fn gen_data(g: &Global) -> Result<()> {
    let config = load_experiment(g)?;
    let out = prepare_out(g, config.output_dir.as_deref())?;
    let d = &config.dataset;
    let scene = d.scene(config.seed);
    write_dataset(&out.join("train"), &scene, &d.profiles, 0, d.train_samples)?;
    write_dataset(
        &out.join("test"),
        &scene,
        &d.profiles,
        d.train_samples as u64,
        d.test_samples,
    )?;
    write(&out.join("config.json"), config.to_json())?;
    log::info!("wrote {} + {} samples", d.train_samples, d.test_samples);
    Ok(())
}

/// Train and test splits from a gen-data directory, or generated from
/// the config.
fn load_splits(
    config: &ExperimentConfig,
    data: Option<&Path>,
) -> Result<(Vec<ModalitySample>, Vec<ModalitySample>)> {
    match data {
        Some(root) => {
            let train = read_dataset(&root.join("train"))
                .with_context(|| format!("dataset {}", root.join("train").display()))?;
            let test = read_dataset(&root.join("test"))
                .with_context(|| format!("dataset {}", root.join("test").display()))?;
            Ok((train.samples, test.samples))
        }
        None => {
            let s = SplitData::generate(config, config.seed);
            Ok((s.train, s.test))
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn train_cmd(g: &Global, data: Option<&Path>) -> Result<()> {
    let config = load_experiment(g)?;
    let (train_set, test_set) = load_splits(&config, data)?;
    let out = prepare_out(g, config.output_dir.as_deref())?;
    let plan = config.plan.resolve()?;
    let mut model = Detector::<f64>::new(config.model.clone(), config.kind, config.seed)?;
    let opt = fdl_core::train::OptimizerConfig {
        seed: config.seed,
        ..config.optimizer.clone()
    };
    let trace = train(&mut model, &train_set, &plan, &config.loss, &opt)?;
    save_checkpoint(&model, &out.join("checkpoint"))?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    write(&out.join("trace.csv"), csv)?;
    let eval = evaluate(&model, &test_set, &config.decode)?;
    write(&out.join("eval.json"), to_json(&eval))?;
    write(&out.join("config.json"), config.to_json())?;
    println!("AP50 {:.4}  AP75 {:.4}  AP50-95 {:.4}", eval.mean_ap50, eval.mean_ap75, eval.mean_ap50_95);
    Ok(())
}

fn probe_cmd(g: &Global, checkpoint: &Path, branch: Branch, data: Option<&Path>) -> Result<()> {
    let config = load_experiment(g)?;
    let model = load_model(checkpoint)?;
    let (train_set, test_set) = load_splits(&config, data)?;
    let out = prepare_out(g, config.output_dir.as_deref())?;
    let opt = fdl_core::train::OptimizerConfig {
        seed: config.seed,
        ..config.probe_optimizer.clone()
    };
    let result = linear_probe(
        &model,
        branch,
        &train_set,
        &test_set,
        &opt,
        &config.loss,
        &config.decode,
    )?;
    write(&out.join("probe.json"), to_json(&result))?;
    println!("probe {}: AP50 {:.4}  AP50-95 {:.4}", branch.name(), result.ap50, result.ap50_95);
    Ok(())
}

fn eval_cmd(g: &Global, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let config = load_experiment(g)?;
    let model = load_model(checkpoint)?;
    let (_, test_set) = load_splits(&config, data)?;
    let out = prepare_out(g, config.output_dir.as_deref())?;
    let eval = evaluate(&model, &test_set, &config.decode)?;
    write(&out.join("eval.json"), to_json(&eval))?;
    println!("AP50 {:.4}  AP75 {:.4}  AP50-95 {:.4}", eval.mean_ap50, eval.mean_ap75, eval.mean_ap50_95);
    Ok(())
}

fn ablate(g: &Global, with_unimodal: bool) -> Result<()> {
    let config = load_experiment(g)?;
    config.validate()?;
    let out = prepare_out(g, config.output_dir.as_deref())?;
    let methods: &[Method] = if with_unimodal {
        &Method::ALL
    } else {
        &Method::ABLATION
    };
    let runs = run_matrix(&config, methods, g.workers)?;
    let rows = theory::sweep(&TheoryGrid::default())?;
    let report = build_report(&config, &runs, Some(TheoryReport::from_rows(&rows)));
    write_bundle(&out, &report, &runs)?;
    write(&out.join("config.json"), config.to_json())?;
    for row in &report.ablation {
        println!(
            "{:<12} AP50 {:.4}  AP75 {:.4}  AP50-95 {:.4}  (median of {})",
            row.method.name(),
            row.median_ap50,
            row.median_ap75,
            row.median_ap50_95,
            row.ap50_95.len()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(out: &Path, force: bool) -> Global {
        Global {
            config: None,
            out: Some(out.to_path_buf()),
            seed: None,
            workers: 1,
            force,
        }
    }

    #[test]
    fn empty_output_dir_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(prepare_out(&global(dir.path(), false), None).unwrap(), dir.path());
    }

    #[test]
    fn force_clears_previous_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        fs::create_dir(&out).unwrap();
        fs::write(out.join("stale.txt"), "x").unwrap();
        let err = prepare_out(&global(&out, false), None).unwrap_err();
        assert_eq!(classify(err).code(), 2);
        prepare_out(&global(&out, true), None).unwrap();
        assert!(!out.join("stale.txt").exists());
    }

    #[test]
    fn missing_output_dir_is_a_config_error() {
        let g = Global {
            out: None,
            ..global(Path::new("."), false)
        };
        let err = prepare_out(&g, None).unwrap_err();
        assert!(err.to_string().contains("/output_dir"));
        assert_eq!(classify(err).code(), 2);
        let runtime = anyhow::Error::from(TrainError::EmptyDataset);
        assert_eq!(classify(runtime).code(), 3);
    }
}
