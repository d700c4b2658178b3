//! Exit criteria. Prints one PASS/FAIL line per criterion and a bundle
//! of the full desk-scale matrix under the cargo target tmpdir.
//!
//! Exits nonzero when a criterion fails, unless it is listed in
//! `KNOWN_RED` (a failure with a recorded analysis). Set
//! `FDL_ACCEPTANCE_STRICT=1` to fail on those as well.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fdl_core::autodiff::Tape;
use fdl_core::decoupler::PlanPreset;
use fdl_core::detector::{Branch, Detector, LossWeights, ModelKind};
use fdl_core::experiment::{
    build_report, run_matrix, write_bundle, ExperimentConfig, ExperimentReport, Method,
    TheoryReport,
};
use fdl_core::synthgen::write_dataset;
use fdl_core::theory::{self, TheoryGrid, CROSSCHECK_TOLERANCE};

use common::{batch, fd, grads, max_diff};

/// Criteria that fail at desk scale with the analysis on record.
const KNOWN_RED: &[u8] = &[9];

const MINUTE: Duration = Duration::from_secs(60);

struct Line {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: u8, title: &'static str, pass: bool, detail: String) -> Line {
    let l = Line {
        id,
        title,
        pass,
        detail,
    };
    let tag = match (l.pass, KNOWN_RED.contains(&l.id)) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (known)",
    };
    println!("{tag:<12} [{:>2}] {}: {}", l.id, l.title, l.detail);
    l
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn autodiff() -> Line {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for &(name, op) in fd::OPS {
        for seed in 0..100 {
            let e = op(seed);
            if !(e <= worst.1) {
                worst = (name, e);
            }
        }
    }
    let t = start.elapsed();
    line(
        1,
        "reverse pass vs central differences",
        worst.1 <= fd::TOL && t < MINUTE,
        format!(
            "{} ops x 100 graphs, worst relative error {:.2e} ({}) <= {:.0e}, {} < 60s",
            fd::OPS.len(),
            worst.1,
            worst.0,
            fd::TOL,
            secs(t)
        ),
    )
}

fn theory_lines() -> Vec<Line> {
    let start = Instant::now();
    let grid = TheoryGrid::default();
    let rows = theory::sweep(&grid).expect("default grid is valid");
    let t = start.elapsed();
    let report = TheoryReport::from_rows(&rows);
    let s = report.summary;
    // m1, m2 in [0, 5] step 0.1, b in {-1, 0, 1}
    let full_grid = s.points == 51 * 51 * 3;
    vec![
        line(
            2,
            "suppression on the full grid",
            full_grid
                && s.suppression_failures == 0
                && s.crosscheck_failures == 0
                && report.max_crosscheck_error <= CROSSCHECK_TOLERANCE
                && t < MINUTE,
            format!(
                "{} points, {} counterexamples, max closed-form vs tape error {:.2e} <= 1e-8, {} < 60s",
                s.points,
                s.suppression_failures,
                report.max_crosscheck_error,
                secs(t)
            ),
        ),
        line(
            3,
            "weak-modality gap ordering",
            full_grid && s.ordering_checked > 0 && s.ordering_failures == 0 && t < MINUTE,
            format!(
                "{} points with m1 < m2, {} counterexamples",
                s.ordering_checked, s.ordering_failures
            ),
        ),
        line(
            4,
            "negative samples get larger multimodal factors",
            full_grid && s.negative_failures == 0,
            format!("{} points, {} counterexamples", s.points, s.negative_failures),
        ),
    ]
}

fn decoupling_exact(config: &ExperimentConfig) -> Line {
    let start = Instant::now();
    let weights = LossWeights::default();
    let plan = PlanPreset::RscMd.plan();
    let mut fusion_leak = 0.0f64;
    let mut worst = 0.0f64;
    for k in 0..10 {
        let seed = 40 + k;
        let m = Detector::<f64>::new(config.model.clone(), ModelKind::Multimodal, seed).unwrap();
        let b = batch(seed, 0, 2);

        let mut params = m.params.clone();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b, &plan, &weights).unwrap();
        params.zero_grad();
        let fusion = out.losses[2].expect("fusion loss").total;
        tape.backward(fusion, &mut params).unwrap();
        for br in Branch::BOTH {
            for t in grads(&params, &m.backbone_ids(br).unwrap()) {
                fusion_leak = t.data().iter().fold(fusion_leak, |a, x| a.max(x.abs()));
            }
        }

        params.zero_grad();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b, &plan, &weights).unwrap();
        tape.backward(out.total, &mut params).unwrap();
        for br in Branch::BOTH {
            let uni =
                Detector::<f64>::new(config.model.clone(), ModelKind::Unimodal(br), seed).unwrap();
            let mut up = uni.params.clone();
            let mut ut = Tape::new();
            let uo = uni.forward(&mut ut, &b, &plan, &weights).unwrap();
            up.zero_grad();
            ut.backward(uo.total, &mut up).unwrap();
            let ids = m.backbone_ids(br).unwrap();
            let uni_ids: Vec<_> = ids.iter().map(|&id| up.id(params.name(id)).unwrap()).collect();
            worst = worst.max(max_diff(&grads(&params, &ids), &grads(&up, &uni_ids)));
        }
    }
    let t = start.elapsed();
    line(
        5,
        "decoupled routing is exact",
        fusion_leak == 0.0 && worst <= 1e-12 && t < MINUTE,
        format!(
            "10 models x 2 branches: fusion-loss backbone gradient max |g| = {fusion_leak:e}, \
             branch vs standalone unimodal max diff {worst:.2e} <= 1e-12, {} < 60s",
            secs(t)
        ),
    )
}

fn forward_transparent(config: &ExperimentConfig) -> Line {
    let weights = LossWeights::default();
    let m = Detector::<f64>::new(config.model.clone(), ModelKind::Multimodal, 3).unwrap();
    let mut differing = 0;
    let mut nodes = 0;
    for k in 0..50 {
        let b = batch(100 + k, 0, 2);
        let mut on = Tape::new();
        let lo = m.forward(&mut on, &b, &PlanPreset::RscMd.plan(), &weights).unwrap();
        let mut off = Tape::new();
        let lf = m.forward(&mut off, &b, &PlanPreset::Rsc.plan(), &weights).unwrap();
        let same = on.len() == off.len()
            && on.vars().zip(off.vars()).all(|(a, c)| on.value(a).bit_eq(off.value(c)))
            && on.value(lo.total).item().to_bits() == off.value(lf.total).item().to_bits();
        nodes += on.len();
        differing += usize::from(!same);
    }
    line(
        6,
        "decoupling leaves the forward pass unchanged",
        differing == 0,
        format!("50 batches ({nodes} tape nodes), {differing} with any bit difference"),
    )
}

fn ap_oracle() -> Line {
    let a = common::ap::agreement(2024, 200);
    line(
        10,
        "AP vs exhaustive matcher",
        a.presence_mismatches == 0 && a.max_error <= 1e-12 && a.compared > 0,
        format!(
            "200 instances, {} class comparisons, max |diff| {:.1e}, {} presence mismatches",
            a.compared, a.max_error, a.presence_mismatches
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.image_size = 32;
    c.dataset.object_count = [1, 3];
    c.dataset.train_samples = 8;
    c.dataset.test_samples = 4;
    c.optimizer.epochs = 2;
    c.optimizer.batch_size = 4;
    c.probe_optimizer = c.optimizer.clone();
    c.seed = 21;
    c.replicates = 2;
    c
}

/// Every stage twice from the same config; all written bytes compared.
fn replay() -> Line {
    let config = tiny();
    let stage = |_: usize| {
        let dir = tempfile::tempdir().unwrap();
        let d = &config.dataset;
        let scene = d.scene(config.seed);
        write_dataset(&dir.path().join("data/train"), &scene, &d.profiles, 0, d.train_samples).unwrap();
        let mut csv = Vec::new();
        theory::write_csv(&theory::sweep(&TheoryGrid::default()).unwrap(), &mut csv).unwrap();
        std::fs::write(dir.path().join("theory.csv"), csv).unwrap();
        let runs = run_matrix(&config, &Method::ALL, 2).unwrap();
        let report = build_report(&config, &runs, None);
        write_bundle(&dir.path().join("bundle"), &report, &runs).unwrap();
        let files = files_under(dir.path());
        (dir, files)
    };
    let (_a, first) = stage(0);
    let (_b, second) = stage(1);
    let differing: Vec<_> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let stages = ["manifest.json", "params.bin", "trace.csv", "eval.json", "probes.json", "report.json"];
    let covered = stages
        .iter()
        .all(|s| first.keys().any(|k| k.to_string_lossy().ends_with(s)));
    line(
        11,
        "bit-exact replay of every stage",
        differing.is_empty() && first.len() == second.len() && covered,
        format!(
            "{} files (dataset, sweep, checkpoints, traces, eval, probes, report), {} differ{}",
            first.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(": {}", differing.join(", "))
            }
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt3(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

fn gradient_magnitude(r: &ExperimentReport, elapsed: Duration) -> Line {
    let mut ok = elapsed < 15 * MINUTE;
    let mut parts = Vec::new();
    for b in Branch::BOTH {
        let ratio = &r.ratio(Method::RscMd, b).unwrap().ratio;
        ok &= mean(ratio) > 1.5;
        parts.push(format!("{} ratio mean {:.2} {}", b.name(), mean(ratio), fmt3(ratio)));
    }
    let base = |b| mean(&r.norm(Method::Baseline, b).unwrap().mean_probe_norm);
    let (weak, strong) = (base(Branch::M1), base(Branch::M2));
    ok &= weak <= strong;
    line(
        7,
        "decoupled training amplifies probe-stage gradients",
        ok,
        format!(
            "{} (> 1.5); baseline m1 {weak:.2e} <= m2 {strong:.2e}; {} < 15min",
            parts.join(", "),
            secs(elapsed)
        ),
    )
}

fn probe_ordering(r: &ExperimentReport, config: &ExperimentConfig, elapsed: Duration) -> Line {
    const SLACK: f64 = 0.01;
    let p = |m, b| r.probe(m, b).unwrap().median_ap50_95;
    let uni = |b| match b {
        Branch::M1 => Method::UnimodalM1,
        Branch::M2 => Method::UnimodalM2,
    };
    let mut ok = elapsed < 30 * MINUTE;
    let mut parts = Vec::new();
    for b in Branch::BOTH {
        let chain = [p(uni(b), b), p(Method::RscMd, b), p(Method::Rsc, b), p(Method::Baseline, b)];
        ok &= chain.windows(2).all(|w| w[0] - w[1] >= -SLACK);
        parts.push(format!("{} uni/md/rsc/base {}", b.name(), fmt3(&chain)));
    }
    let q = &config.dataset.profiles;
    let (weak, strong) = if q[0].quality <= q[1].quality {
        (Branch::M1, Branch::M2)
    } else {
        (Branch::M2, Branch::M1)
    };
    let drop = |b| p(uni(b), b) - p(Method::Baseline, b);
    ok &= drop(weak) > drop(strong);
    line(
        8,
        "probe ordering across training regimes",
        ok,
        format!(
            "median over seeds, {}; each step >= -0.01; degradation weak {:.3} > strong {:.3}; {} < 30min",
            parts.join("; "),
            drop(weak),
            drop(strong),
            secs(elapsed)
        ),
    )
}

fn ablation(r: &ExperimentReport, elapsed: Duration) -> Line {
    let ap = |m| r.row(m).unwrap().median_ap50_95;
    let (base, rsc, md) = (ap(Method::Baseline), ap(Method::Rsc), ap(Method::RscMd));
    let each = |m| fmt3(&r.row(m).unwrap().ap50_95);
    line(
        9,
        "ablation direction",
        base < rsc && rsc < md && md - base >= 0.02 && elapsed < 30 * MINUTE,
        format!(
            "median AP50-95 baseline {base:.3} {} < rsc {rsc:.3} {} < rsc-md {md:.3} {}, \
             rsc-md - baseline {:+.3} >= 0.02; {} < 30min",
            each(Method::Baseline),
            each(Method::Rsc),
            each(Method::RscMd),
            md - base,
            secs(elapsed)
        ),
    )
}

fn matrix(config: &ExperimentConfig) -> Vec<Line> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let mut runs = run_matrix(config, &[Method::Baseline, Method::RscMd], workers).unwrap();
    let gradient_time = start.elapsed();
    runs.extend(
        run_matrix(config, &[Method::Rsc, Method::UnimodalM1, Method::UnimodalM2], workers).unwrap(),
    );
    let total = start.elapsed();
    let report = build_report(config, &runs, None);
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-bundle");
    let _ = std::fs::remove_dir_all(&dir);
    match write_bundle(&dir, &report, &runs) {
        Ok(()) => println!("matrix bundle: {}", dir.display()),
        Err(e) => println!("matrix bundle not written: {e}"),
    }
    log_context(&report);
    vec![
        gradient_magnitude(&report, gradient_time),
        probe_ordering(&report, config, total),
        ablation(&report, total),
    ]
}

fn log_context(r: &ExperimentReport) {
    for row in &r.ablation {
        println!(
            "    {:<12} AP50 {:.3}  AP50-95 {:.3} {}",
            row.method.name(),
            row.median_ap50,
            row.median_ap50_95,
            fmt3(&row.ap50_95)
        );
    }
}

fn main() -> ExitCode {
    let config = ExperimentConfig::default();
    let mut lines = vec![autodiff()];
    lines.extend(theory_lines());
    lines.push(decoupling_exact(&config));
    lines.push(forward_transparent(&config));
    lines.push(ap_oracle());
    lines.push(replay());
    lines.extend(matrix(&config));
    lines.sort_by_key(|l| l.id);

    let strict = std::env::var("FDL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    let blocking: Vec<&&Line> = failed
        .iter()
        .filter(|l| strict || !KNOWN_RED.contains(&l.id))
        .collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() {
            String::new()
        } else {
            let ids: Vec<String> = failed.iter().map(|l| format!("{} ({})", l.id, l.title)).collect();
            format!("; failing: {}", ids.join(", "))
        }
    );
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
