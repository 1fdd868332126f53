//! Command dispatch, artifact staging and the run summary.
//!
//! Artifacts are collected in memory, written to a hidden sibling directory
//! and renamed onto `output_dir` once the run is complete. The exit status is
//! recomputed from the written `summary.txt` alone, see [`summary_status`].

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fbsde_core::backward::{dominated_property_check, DominatedConfig, Weighting};
use fbsde_core::bench::{
    blowup_profile, compare_to_reference, get_benchmark_with, write_blowup_profile_csv, BenchmarkCase,
    Comparison, BENCHMARK_NAMES,
};
use fbsde_core::driver::{
    assemble_solution, holder_uniformity_check, run_iteration_with, IterationReport, Verdict,
};
use fbsde_core::fields::{fmt_f64, DecouplingFieldPair, Lattice, OutOfBox};
use fbsde_core::forward::key_lemma_estimate;
use fbsde_core::noise::NoisePlan;
use fbsde_core::problem::{
    audit_assumptions, AffineCoefficients, Dimensions, Interval, ProblemSpec, SamplePlan,
};
use fbsde_core::FbsdeError;
use thiserror::Error;

use crate::config::{Command, InlineProblem, ProblemChoice, RunConfig};

const SUMMARY_MAGIC: &str = "# fbsde-summary";
const FROZEN_TOLERANCE: f64 = 1e-12;
const MONOTONE_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Solver(#[from] FbsdeError),

    #[error("{0}")]
    Usage(String),

    #[error("cannot write artifacts to {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("refusing to replace {0}: it exists and is not an earlier fbsde output directory")]
    Occupied(PathBuf),
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Solver(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        status: if pass { Status::Pass } else { Status::Fail },
        detail: detail.into(),
    }
}

fn warn_unless(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        status: if ok { Status::Pass } else { Status::Warn },
        detail: detail.into(),
    }
}

#[derive(Debug, Default)]
struct Artifacts {
    files: Vec<(PathBuf, Vec<u8>)>,
    metrics: Vec<(String, String)>,
    checks: Vec<Check>,
}

impl Artifacts {
    fn file(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn metric(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metrics.push((key.into(), value.to_string()));
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub output_dir: PathBuf,
    pub summary: String,
    pub exit_code: i32,
}

/// Runs the configured command and commits its artifacts.
pub fn run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let mut art = Artifacts::default();
    match cfg.command {
        Command::Solve => solve(cfg, &mut art)?,
        Command::Verify => verify(cfg, &mut art)?,
        Command::Bench => bench(cfg, &mut art)?,
        Command::Audit => audit(cfg, &mut art)?,
    }
    let summary = render_summary(cfg, &art);
    art.file("summary.txt", summary.clone().into_bytes());
    commit(&cfg.output_dir, &art.files)?;
    Ok(Outcome {
        output_dir: cfg.output_dir.clone(),
        exit_code: summary_status(&summary),
        summary,
    })
}

/// `0` when every check line is PASS (or WARN outside strict mode), `1`
/// otherwise. Only the text is consulted.
pub fn summary_status(summary: &str) -> i32 {
    let strict = summary.lines().any(|l| l.trim() == "strict = true");
    let failed = summary.lines().any(|l| {
        let mut it = l.split_whitespace();
        it.next() == Some("check") && matches!(it.nth(1), Some(s) if s == "FAIL" || (strict && s == "WARN"))
    });
    i32::from(failed)
}

fn render_summary(cfg: &RunConfig, art: &Artifacts) -> String {
    let problem = match &cfg.problem {
        ProblemChoice::Benchmark(n) => n.clone(),
        ProblemChoice::Inline(_) => "inline".into(),
        ProblemChoice::AllBenchmarks => "catalogue".into(),
    };
    let mut s = String::new();
    s.push_str(SUMMARY_MAGIC);
    s.push('\n');
    s.push_str(&format!("command = {}\n", cfg.command.as_str()));
    s.push_str(&format!("problem = {problem}\n"));
    s.push_str(&format!("seed = {}\n", cfg.mc.seed));
    s.push_str(&format!("paths = {}\n", cfg.mc.paths));
    s.push_str(&format!("strict = {}\n", cfg.strict));
    for (k, v) in &art.metrics {
        s.push_str(&format!("{k} = {v}\n"));
    }
    for c in &art.checks {
        s.push_str(&format!("check {} {} {}\n", c.name, c.status.as_str(), c.detail));
    }
    let failed = summary_status(&s) != 0;
    s.push_str(&format!("status = {}\n", if failed { "fail" } else { "pass" }));
    s
}

fn commit(dir: &Path, files: &[(PathBuf, Vec<u8>)]) -> Result<(), RunError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunError::Output { path, source }
    };
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = dir
        .file_name()
        .ok_or_else(|| RunError::Usage(format!("output_dir {} has no final component", dir.display())))?;
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    if dir.exists() && !is_previous_output(dir) {
        return Err(RunError::Occupied(dir.to_path_buf()));
    }
    let staging = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let write_all = || -> io::Result<()> {
        fs::create_dir(&staging)?;
        for (rel, bytes) in files {
            let path = staging.join(rel);
            if let Some(p) = path.parent() {
                fs::create_dir_all(p)?;
            }
            fs::write(path, bytes)?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&staging, dir)
    };
    write_all().map_err(|e| {
        let _ = fs::remove_dir_all(&staging);
        RunError::Output {
            path: dir.to_path_buf(),
            source: e,
        }
    })
}

fn is_previous_output(dir: &Path) -> bool {
    let Ok(mut entries) = fs::read_dir(dir) else {
        return false;
    };
    if entries.next().is_none() {
        return true;
    }
    fs::read_to_string(dir.join("summary.txt")).is_ok_and(|s| s.starts_with(SUMMARY_MAGIC))
}

struct Resolved {
    spec: ProblemSpec,
    lattice: Lattice,
    case: Option<BenchmarkCase>,
    x_init: Vec<f64>,
}

fn intervals(b: &[[f64; 2]]) -> Result<Vec<Interval>, FbsdeError> {
    b.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect()
}

fn inline_spec(p: &InlineProblem) -> Result<ProblemSpec, FbsdeError> {
    let dims = Dimensions::new(p.l, p.m, p.d)?;
    let mut a = AffineCoefficients::zeros(dims);
    let fill = |dst: &mut Vec<f64>, src: &Vec<f64>| {
        if !src.is_empty() {
            dst.clone_from(src);
        }
    };
    fill(&mut a.sigma_x, &p.sigma.x);
    fill(&mut a.sigma_y, &p.sigma.y);
    fill(&mut a.sigma_z, &p.sigma.z);
    fill(&mut a.sigma_offset, &p.sigma.offset);
    fill(&mut a.driver_x, &p.driver.x);
    fill(&mut a.driver_y, &p.driver.y);
    fill(&mut a.driver_z, &p.driver.z);
    fill(&mut a.driver_offset, &p.driver.offset);
    fill(&mut a.terminal_x, &p.terminal.x);
    fill(&mut a.terminal_offset, &p.terminal.offset);
    let coeffs = a
        .into_coefficients(dims)?
        .with_degenerate_candidates(p.degenerate_candidates.clone());
    ProblemSpec::new(dims, coeffs, p.horizon, intervals(&p.space_box)?)
}

fn resolve(cfg: &RunConfig, benchmark: Option<&str>) -> Result<Resolved, RunError> {
    let lc = &cfg.lattice;
    let name = benchmark.or(match &cfg.problem {
        ProblemChoice::Benchmark(n) => Some(n.as_str()),
        _ => None,
    });
    let (mut spec, mut case, defaults) = match (name, &cfg.problem) {
        (Some(name), _) => {
            let case = get_benchmark_with(name, &cfg.benchmark)?;
            let d = (
                case.lattice.time_steps(),
                case.lattice.axes()[0].nodes,
                case.lattice.out_of_box(),
            );
            (case.spec.clone(), Some(case), d)
        }
        (None, ProblemChoice::Inline(p)) => (inline_spec(p)?, None, (32, 33, OutOfBox::Clamp)),
        (None, _) => {
            return Err(RunError::Usage(format!(
                "`{}` needs a problem",
                cfg.command.as_str()
            )))
        }
    };
    if let Some(b) = &lc.space_box {
        spec = spec.with_space_box(intervals(b)?)?;
        if let Some(c) = case.as_mut() {
            c.spec = spec.clone();
        }
    }
    let lattice = Lattice::for_spec(
        &spec,
        lc.time_steps.unwrap_or(defaults.0),
        lc.space_nodes.unwrap_or(defaults.1),
    )?
    .with_out_of_box(lc.out_of_box.unwrap_or(defaults.2));
    if let Some(c) = case.as_mut() {
        c.lattice = lattice.clone();
    }
    let x_init = match (&cfg.mc.x_init, &case) {
        (Some(x), _) => x.clone(),
        (None, Some(c)) => c.x_init.clone(),
        (None, None) => vec![0.0; spec.dims.l],
    };
    check_point(&spec, &x_init, "mc.x_init")?;
    Ok(Resolved {
        spec,
        lattice,
        case,
        x_init,
    })
}

fn check_point(spec: &ProblemSpec, x: &[f64], key: &str) -> Result<(), RunError> {
    if x.len() != spec.dims.l {
        return Err(RunError::Usage(format!(
            "`{key}` has {} components, the problem has {}",
            x.len(),
            spec.dims.l
        )));
    }
    if !spec.in_box(x) {
        return Err(RunError::Usage(format!(
            "`{key}` = {x:?} lies outside the space box"
        )));
    }
    Ok(())
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>, RunError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), FbsdeError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Displays a float in the same form the CSV writers use.
struct N(f64);

impl std::fmt::Display for N {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&fmt_f64(self.0))
    }
}

fn fmt_vec(x: &[f64]) -> String {
    x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

/// Iterates to a verdict, storing `report.csv`, `regularity.csv`,
/// `field_final.csv` and optional snapshots under `prefix`.
fn iterate(
    cfg: &RunConfig,
    r: &Resolved,
    prefix: &Path,
    art: &mut Artifacts,
) -> Result<(DecouplingFieldPair, IterationReport), RunError> {
    let mut snapshots = Vec::new();
    let (field, report) = run_iteration_with(&r.spec, &r.lattice, &cfg.solver, &cfg.stop, |f, rec, _| {
        if cfg.emit_fields {
            let mut buf = Vec::new();
            f.write_csv(&mut buf)?;
            snapshots.push((format!("field_iter_{:03}.csv", rec.n), buf));
        }
        Ok(())
    })?;
    for (name, bytes) in snapshots {
        art.file(prefix.join(name), bytes);
    }
    art.file(prefix.join("report.csv"), csv_bytes(|w| report.write_csv(w))?);
    art.file(prefix.join("field_final.csv"), csv_bytes(|w| field.write_csv(w))?);
    art.file(prefix.join("regularity.csv"), regularity_csv(&report)?);
    Ok((field, report))
}

fn regularity_csv(report: &IterationReport) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "modulus_u", "modulus_v", "growth", "time_modulus"])?;
    for rec in &report.records {
        let g = &rec.regularity;
        w.write_record([
            rec.n.to_string(),
            fmt_f64(g.holder_half_modulus_u),
            fmt_f64(g.holder_half_modulus_v),
            fmt_f64(g.growth_constant),
            fmt_f64(g.time_modulus_u),
        ])?;
    }
    into_bytes(w)
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, RunError> {
    w.into_inner()
        .map_err(|e| RunError::Solver(FbsdeError::Io(e.into_error())))
}

fn iteration_metrics(prefix: &str, report: &IterationReport, art: &mut Artifacts) {
    art.metric(format!("{prefix}verdict"), report.verdict);
    art.metric(format!("{prefix}iterations"), report.records.len());
    if let Some(last) = report.last() {
        art.metric(format!("{prefix}final_delta"), N(last.delta));
        art.metric(
            format!("{prefix}final_growth"),
            N(last.regularity.growth_constant),
        );
        art.metric(format!("{prefix}final_sup_norm_u"), N(last.regularity.sup_norm_u));
    }
}

/// Verdict, frozen-point and monotonicity checks shared by every command
/// that iterates.
fn iteration_checks(prefix: &str, expected: Verdict, report: &IterationReport, art: &mut Artifacts) {
    let got = report.verdict;
    let detail = format!("got {got}, expected {expected}");
    art.checks.push(if got == expected {
        check(format!("{prefix}verdict"), true, detail)
    } else if expected == Verdict::Converged && got == Verdict::MaxIterations {
        warn_unless(format!("{prefix}verdict"), false, detail)
    } else {
        check(format!("{prefix}verdict"), false, detail)
    });
    if !report.frozen_points.is_empty() {
        let r = report.max_frozen_residual();
        art.checks.push(check(
            format!("{prefix}frozen_points"),
            r <= FROZEN_TOLERANCE,
            format!(
                "max residual {r:e} over {} point(s) (<= {FROZEN_TOLERANCE:e})",
                report.frozen_points.len()
            ),
        ));
    }
    if got == Verdict::BlowUp && expected == Verdict::BlowUp {
        let sup: Vec<String> = report
            .records
            .iter()
            .map(|r| format!("{:.4e}", r.regularity.sup_norm_u))
            .collect();
        art.checks.push(check(
            format!("{prefix}monotone_growth"),
            report.sup_norm_monotone(MONOTONE_WINDOW),
            format!("sup |u_n| over iterations: {}", sup.join(" ")),
        ));
    }
}

fn solve(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    let r = resolve(cfg, None)?;
    let (field, report) = iterate(cfg, &r, Path::new(""), art)?;
    iteration_metrics("", &report, art);
    let expected = r.case.as_ref().map_or(Verdict::Converged, |c| c.expected_verdict);
    iteration_checks("", expected, &report, art);
    if report.verdict == Verdict::BlowUp {
        if let Some(case) = &r.case {
            if let Comparison::BlowUpProfile { rows } = blowup_profile(case, &field) {
                art.file(
                    "blowup_profile.csv",
                    csv_bytes(|w| write_blowup_profile_csv(&rows, w))?,
                );
            }
        }
        return Ok(());
    }
    let noise = NoisePlan::new(cfg.mc.seed, cfg.mc.paths, r.lattice.time_steps(), r.spec.dims.d)?;
    let sol = assemble_solution(&r.spec, &field, &r.x_init, &noise)?;
    art.metric("x_init", fmt_vec(&r.x_init));
    art.metric("terminal_residual", N(sol.residuals.terminal));
    art.metric("terminal_residual_stderr", N(sol.residuals.terminal_stderr));
    art.metric("backward_residual", N(sol.residuals.backward_dynamics));
    art.metric(
        "backward_residual_stderr",
        N(sol.residuals.backward_dynamics_stderr),
    );
    art.metric("exited_box_fraction", N(sol.exited_box_fraction));
    art.checks.push(warn_unless(
        "exited_box_fraction",
        sol.exited_box_fraction <= cfg.verify.max_exit_fraction,
        format!(
            "{} (<= {})",
            N(sol.exited_box_fraction),
            N(cfg.verify.max_exit_fraction)
        ),
    ));
    if cfg.emit_paths {
        art.file("paths.csv", csv_bytes(|w| sol.write_paths_csv(w))?);
    }
    Ok(())
}

fn verify(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    let r = resolve(cfg, None)?;
    if r.spec.has_drift() {
        return Err(RunError::Usage(
            "`verify` needs a drift-less problem; the lemmas do not cover a forward drift".into(),
        ));
    }
    let (field, report) = iterate(cfg, &r, Path::new(""), art)?;
    iteration_metrics("", &report, art);
    let expected = r.case.as_ref().map_or(Verdict::Converged, |c| c.expected_verdict);
    iteration_checks("", expected, &report, art);
    let v = &cfg.verify;
    let l = r.spec.dims.l;
    let steps = r.lattice.time_steps();
    let noise = NoisePlan::new(cfg.mc.seed, cfg.mc.paths, steps, r.spec.dims.d)?;

    let x = v.x.clone().unwrap_or_else(|| {
        r.spec
            .space_box
            .iter()
            .map(|iv| 0.5 * (iv.min + iv.max))
            .collect()
    });
    check_point(&r.spec, &x, "verify.x")?;
    art.metric("key_lemma_x", fmt_vec(&x));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "h",
        "estimate",
        "stderr",
        "bound",
        "second_moment",
        "second_moment_stderr",
        "exited_box_fraction",
    ])?;
    let mut worst_exit = 0.0f64;
    for &h in &v.h {
        let hv = vec![h / (l as f64).sqrt(); l];
        let shifted: Vec<f64> = x.iter().zip(&hv).map(|(a, b)| a + b).collect();
        check_point(&r.spec, &shifted, "verify.x + h")?;
        let est = key_lemma_estimate(&r.spec, &field, &x, &hv, &noise)?;
        w.write_record([
            fmt_f64(h),
            fmt_f64(est.estimate),
            fmt_f64(est.stderr),
            fmt_f64(est.bound),
            fmt_f64(est.second_moment),
            fmt_f64(est.second_moment_stderr),
            fmt_f64(est.exited_box_fraction),
        ])?;
        worst_exit = worst_exit.max(est.exited_box_fraction);
        // Interpolated fields are outside the lemma's hypotheses: reported, fatal only under --strict.
        art.checks.push(warn_unless(
            format!("key_lemma[h={}]", N(h)),
            est.within_bound(v.key_lemma_sigmas),
            format!(
                "estimate {} +- {} vs bound {} (k = {})",
                N(est.estimate),
                N(est.stderr),
                N(est.bound),
                N(v.key_lemma_sigmas)
            ),
        ));
    }
    art.file("keylemma.csv", into_bytes(w)?);
    art.checks.push(warn_unless(
        "key_lemma_exited_box_fraction",
        worst_exit <= v.max_exit_fraction,
        format!("{} (<= {})", N(worst_exit), N(v.max_exit_fraction)),
    ));

    let x2 =
        v.x2.clone()
            .unwrap_or_else(|| x.iter().map(|a| a + 0.5).collect());
    check_point(&r.spec, &x2, "verify.x2")?;
    let declared = &r.spec.coeffs.declared;
    let (audited_l_f_y, audited_l_f_z) = if declared.l_f_y.is_none() || declared.l_f_z.is_none() {
        let a = audit_assumptions(&r.spec, &SamplePlan::default())?;
        (Some(a.lipschitz.f_y), Some(a.lipschitz.f_z))
    } else {
        (None, None)
    };
    let dcfg = DominatedConfig {
        epsilon: v.epsilon,
        weighting: v.weighting,
        sigma_margin: v.dominated_sigmas,
        audited_l_f_y,
        audited_l_f_z,
    };
    let dom = dominated_property_check(&r.spec, &field, &x, &x2, &dcfg, &noise)?;
    let weighting = match v.weighting {
        Weighting::Decaying => "decaying",
        Weighting::Growing => "growing",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "x1",
        "x2",
        "weighting",
        "epsilon",
        "rate",
        "lhs",
        "rhs",
        "stderr",
        "satisfied",
    ])?;
    w.write_record([
        fmt_vec(&x),
        fmt_vec(&x2),
        weighting.to_string(),
        fmt_f64(v.epsilon),
        fmt_f64(dom.rate),
        fmt_f64(dom.lhs),
        fmt_f64(dom.rhs),
        fmt_f64(dom.stderr),
        dom.satisfied.to_string(),
    ])?;
    art.file("dominated.csv", into_bytes(w)?);
    art.checks.push(check(
        "dominated_property",
        dom.satisfied,
        format!(
            "lhs {} vs rhs {} + {} x {} ({weighting} weight, L = {})",
            N(dom.lhs),
            N(dom.rhs),
            N(v.dominated_sigmas),
            N(dom.stderr),
            N(dom.rate)
        ),
    ));

    match holder_uniformity_check(&report) {
        Ok(h) => {
            let range = v.holder_ratio_min..=v.holder_ratio_max;
            let finite = h.max_over_n.is_finite() && h.max_over_n_v.is_finite();
            art.checks.push(check(
                "holder_uniformity",
                finite && range.contains(&h.ratio_last_to_first) && range.contains(&h.ratio_last_to_first_v),
                format!(
                    "max modulus u {} v {}, last/first u {} v {} (in [{}, {}])",
                    N(h.max_over_n),
                    N(h.max_over_n_v),
                    N(h.ratio_last_to_first),
                    N(h.ratio_last_to_first_v),
                    N(v.holder_ratio_min),
                    N(v.holder_ratio_max)
                ),
            ));
        }
        Err(_) => art.checks.push(warn_unless(
            "holder_uniformity",
            false,
            "fewer than two iterations; raise stop.min_iter",
        )),
    }
    Ok(())
}

fn bench(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    let names: Vec<&str> = match &cfg.problem {
        ProblemChoice::AllBenchmarks => BENCHMARK_NAMES.to_vec(),
        ProblemChoice::Benchmark(n) => vec![n.as_str()],
        ProblemChoice::Inline(_) => {
            return Err(RunError::Usage("`bench` runs catalogue problems only".into()));
        }
    };
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        "problem",
        "verdict",
        "expected",
        "iterations",
        "final_delta",
        "sup_u_error",
        "sup_u_error_weighted",
        "sup_v_error",
    ])?;
    for name in names {
        let r = resolve(cfg, Some(name))?;
        let case = r.case.as_ref().expect("catalogue problem");
        let dir = Path::new(name);
        let (field, report) = iterate(cfg, &r, dir, art)?;
        let prefix = format!("{name}.");
        iteration_metrics(&prefix, &report, art);
        iteration_checks(&prefix, case.expected_verdict, &report, art);
        let mut errors = [String::new(), String::new(), String::new()];
        if report.verdict == Verdict::BlowUp || case.expected_verdict == Verdict::BlowUp {
            if let Comparison::BlowUpProfile { rows } = blowup_profile(case, &field) {
                art.file(
                    dir.join("blowup_profile.csv"),
                    csv_bytes(|w| write_blowup_profile_csv(&rows, w))?,
                );
            }
        } else {
            art.file(
                dir.join("reference.csv"),
                csv_bytes(|w| case.write_reference_csv(&r.lattice, w))?,
            );
            let noise = NoisePlan::new(cfg.mc.seed, cfg.mc.paths, r.lattice.time_steps(), r.spec.dims.d)?;
            let sol = assemble_solution(&r.spec, &field, &r.x_init, &noise)?;
            if let Comparison::Reference {
                sup_u_error,
                sup_u_error_weighted,
                sup_v_error,
                path_moment_errors,
            } = compare_to_reference(case, &sol)?
            {
                errors = [
                    fmt_f64(sup_u_error),
                    fmt_f64(sup_u_error_weighted),
                    fmt_f64(sup_v_error),
                ];
                art.metric(format!("{prefix}sup_u_error"), N(sup_u_error));
                art.metric(format!("{prefix}sup_v_error"), N(sup_v_error));
                art.checks.push(check(
                    format!("{prefix}sup_u_error"),
                    sup_u_error_weighted <= cfg.bench.u_tolerance,
                    format!(
                        "max |u - u_ref| / (1 + |x|) = {} (<= {})",
                        N(sup_u_error_weighted),
                        N(cfg.bench.u_tolerance)
                    ),
                ));
                for m in path_moment_errors {
                    let k = cfg.bench.moment_sigmas;
                    art.checks.push(check(
                        format!("{prefix}moment[{}]", m.name.replace(' ', "")),
                        m.error() <= k * m.stderr + 1e-12,
                        format!(
                            "{} +- {} vs reference {} (k = {k})",
                            N(m.computed),
                            N(m.stderr),
                            N(m.reference)
                        ),
                    ));
                }
            }
        }
        let last_delta = report.last().map_or(String::new(), |l| fmt_f64(l.delta));
        table.write_record([
            name.to_string(),
            report.verdict.to_string(),
            case.expected_verdict.to_string(),
            report.records.len().to_string(),
            last_delta,
            errors[0].clone(),
            errors[1].clone(),
            errors[2].clone(),
        ])?;
    }
    art.file("bench.csv", into_bytes(table)?);
    Ok(())
}

fn audit(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    let r = resolve(cfg, None)?;
    let a = audit_assumptions(&r.spec, &SamplePlan::default())?;
    let lip = &a.lipschitz;
    let d = &r.spec.coeffs.declared;
    let pairs = [
        ("l_sigma_x", lip.sigma_x, d.l_sigma_x),
        ("l_sigma_y", lip.sigma_y, d.l_sigma_y),
        ("l_sigma_z", lip.sigma_z, d.l_sigma_z),
        ("l_f_x", lip.f_x, None),
        ("l_f_y", lip.f_y, d.l_f_y),
        ("l_f_z", lip.f_z, d.l_f_z),
        ("l_phi_x", lip.phi_x, d.l_phi_x),
    ];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["quantity", "sampled", "declared"])?;
    for (name, sampled, declared) in pairs {
        w.write_record([
            name.to_string(),
            fmt_f64(sampled),
            declared.map_or(String::new(), fmt_f64),
        ])?;
        if let Some(dv) = declared {
            art.checks.push(check(
                format!("declared_{name}"),
                sampled <= dv * (1.0 + 1e-9) + 1e-12,
                format!("sampled lower bound {} vs declared {}", N(sampled), N(dv)),
            ));
        }
    }
    w.write_record([
        "holder_lambda".to_string(),
        fmt_f64(a.holder_lambda),
        String::new(),
    ])?;
    w.write_record([
        "holder_small_h".to_string(),
        fmt_f64(a.holder_small_h),
        String::new(),
    ])?;
    for (x0, res) in &a.degenerate_residuals {
        w.write_record([
            format!("degenerate_residual[{}]", fmt_vec(x0)),
            fmt_f64(*res),
            String::new(),
        ])?;
        art.checks.push(warn_unless(
            format!("degenerate_candidate[{}]", fmt_vec(x0)),
            *res == 0.0,
            format!("residual {}", N(*res)),
        ));
    }
    art.file("audit.csv", into_bytes(w)?);
    art.metric("space_points", a.space_points);
    art.metric("time_points", a.time_points);
    art.metric("h_samples", fmt_vec(&a.h_samples));
    art.checks.push(warn_unless(
        "holder_bound",
        a.holder_bound_growing != Some(true),
        format!(
            "large-step quotient {} (growing: {:?})",
            N(a.holder_lambda),
            a.holder_bound_growing
        ),
    ));
    Ok(())
}
