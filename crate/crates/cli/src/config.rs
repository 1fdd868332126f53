//! Run configuration: a single TOML document plus command-line overrides.
//!
//! ```toml
//! command = "solve"                  # solve | verify | bench | audit
//! problem = "degenerate-y-diffusion" # benchmark name, or an inline [problem] table
//! output_dir = "out"
//! emit_paths = false
//! emit_fields = false
//!
//! [lattice]
//! time_steps = 64
//! space_nodes = 64
//! box = [[-2.0, 2.0]]
//! out_of_box = "linear"
//!
//! [mc]
//! paths = 10000
//! seed = 42
//! x_init = [1.0]
//! ```
//!
//! Every table rejects unknown keys. See [`DEFAULTS_HELP`] for all defaults.

use std::path::PathBuf;

use fbsde_core::backward::{BackwardStepConfig, VMode, Weighting};
use fbsde_core::bench::{BenchParams, BENCHMARK_NAMES};
use fbsde_core::driver::StopRule;
use fbsde_core::fields::OutOfBox;
use fbsde_core::quadrature::QuadratureRule;
use fbsde_core::FbsdeError;
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULTS_HELP: &str = "\
Config keys and defaults (TOML, unknown keys are rejected):
  command            solve | verify | bench | audit       (required, or positional COMMAND)
  problem            benchmark name or [problem] table    (required except for bench, or --problem)
  output_dir         artifact directory                   (required, or --out)
  emit_paths         write paths.csv                      false
  emit_fields        write field_iter_NNN.csv per step    false
  [lattice]          time_steps, space_nodes, box, out_of_box
                     benchmarks: catalogue lattice; inline problems: 32, 33, problem box, clamp
  [mc]               paths 10000, seed 42, x_init (benchmark start point, else the origin)
  [solver]           quadrature_nodes 8, v_mode explicit, implicit_tol 1e-10,
                     implicit_max_iter 200, damping 1.0
  [stop]             tolerance 1e-3, max_iter 50, min_iter 1,
                     blowup_threshold 1e3 x initial growth constant
  [verify]           h [0, 0.01, 0.1, 0.5], x (box centre), x2 (x + 0.5 per axis),
                     key_lemma_sigmas 3, max_exit_fraction 0.01, epsilon 0.5,
                     weighting decaying, dominated_sigmas 3,
                     holder_ratio_min 0.5, holder_ratio_max 2.0
  [bench]            u_tolerance 0.02, moment_sigmas 4
  [benchmark]        a 0.5, b 1.0, c 1.0, exp_l 1.0, fromm_horizon 1.5
  [problem]          l, m, d, horizon 1.0, box, degenerate_candidates [],
                     [problem.sigma] x y z offset, [problem.driver] x y z offset,
                     [problem.terminal] x offset (row-major, missing blocks are zero)";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config syntax error: {0}")]
    Syntax(String),

    #[error("duplicate key `{key}` at lines {}", fmt_lines(.lines))]
    DuplicateKey { key: String, lines: Vec<usize> },

    #[error("missing required key `{0}`")]
    Missing(&'static str),

    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn fmt_lines(lines: &[usize]) -> String {
    lines
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(" and ")
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl From<FbsdeError> for ConfigError {
    fn from(e: FbsdeError) -> Self {
        match e {
            FbsdeError::InvalidParameter { name, reason } => ConfigError::Invalid { key: name, reason },
            other => ConfigError::Invalid {
                key: "config".into(),
                reason: other.to_string(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Verify,
    Bench,
    Audit,
}

impl Command {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "solve" => Some(Command::Solve),
            "verify" => Some(Command::Verify),
            "bench" => Some(Command::Bench),
            "audit" => Some(Command::Audit),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Audit => "audit",
        }
    }
}

/// Affine problem declared in the config. Matrices are row-major with the
/// shapes documented on `AffineCoefficients`.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub l: usize,
    pub m: usize,
    pub d: usize,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(rename = "box")]
    pub space_box: Vec<[f64; 2]>,
    #[serde(default)]
    pub degenerate_candidates: Vec<Vec<f64>>,
    #[serde(default)]
    pub sigma: Block,
    #[serde(default)]
    pub driver: Block,
    #[serde(default)]
    pub terminal: TerminalBlock,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Block {
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(default)]
    pub y: Vec<f64>,
    #[serde(default)]
    pub z: Vec<f64>,
    #[serde(default)]
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TerminalBlock {
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(default)]
    pub offset: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemChoice {
    Benchmark(String),
    Inline(Box<InlineProblem>),
    /// Only for `bench` without a problem: the whole catalogue.
    AllBenchmarks,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatticeConfig {
    pub time_steps: Option<usize>,
    pub space_nodes: Option<usize>,
    pub space_box: Option<Vec<[f64; 2]>>,
    pub out_of_box: Option<OutOfBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    pub x_init: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub h: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub x2: Option<Vec<f64>>,
    pub key_lemma_sigmas: f64,
    pub max_exit_fraction: f64,
    pub epsilon: f64,
    pub weighting: Weighting,
    pub dominated_sigmas: f64,
    pub holder_ratio_min: f64,
    pub holder_ratio_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub u_tolerance: f64,
    pub moment_sigmas: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub problem: ProblemChoice,
    pub benchmark: BenchParams,
    pub lattice: LatticeConfig,
    pub mc: McConfig,
    pub solver: BackwardStepConfig,
    pub stop: StopRule,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
    pub output_dir: PathBuf,
    pub emit_paths: bool,
    pub emit_fields: bool,
    pub strict: bool,
}

/// Command-line values that take precedence over the document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub command: Option<String>,
    pub problem: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub emit_paths: bool,
    pub emit_fields: bool,
    pub strict: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    command: Option<String>,
    problem: Option<toml::Value>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    emit_paths: bool,
    #[serde(default)]
    emit_fields: bool,
    #[serde(default)]
    lattice: RawLattice,
    #[serde(default)]
    mc: RawMc,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    stop: RawStop,
    #[serde(default)]
    verify: RawVerify,
    #[serde(default)]
    bench: RawBench,
    #[serde(default)]
    benchmark: RawBenchParams,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLattice {
    time_steps: Option<i64>,
    space_nodes: Option<i64>,
    #[serde(rename = "box")]
    space_box: Option<Vec<[f64; 2]>>,
    out_of_box: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    paths: Option<i64>,
    seed: Option<i64>,
    x_init: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    quadrature_nodes: Option<i64>,
    v_mode: Option<String>,
    implicit_tol: Option<f64>,
    implicit_max_iter: Option<i64>,
    damping: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStop {
    tolerance: Option<f64>,
    max_iter: Option<i64>,
    min_iter: Option<i64>,
    blowup_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    h: Option<Vec<f64>>,
    x: Option<Vec<f64>>,
    x2: Option<Vec<f64>>,
    key_lemma_sigmas: Option<f64>,
    max_exit_fraction: Option<f64>,
    epsilon: Option<f64>,
    weighting: Option<String>,
    dominated_sigmas: Option<f64>,
    holder_ratio_min: Option<f64>,
    holder_ratio_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBench {
    u_tolerance: Option<f64>,
    moment_sigmas: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBenchParams {
    a: Option<f64>,
    b: Option<f64>,
    c: Option<f64>,
    exp_l: Option<f64>,
    fromm_horizon: Option<f64>,
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_with(text, &Overrides::default())
}

pub fn parse_config_with(text: &str, over: &Overrides) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| syntax_error(text, e))?;

    let command_str = over
        .command
        .clone()
        .or(raw.command)
        .ok_or(ConfigError::Missing("command"))?;
    let command = Command::parse(&command_str).ok_or_else(|| {
        invalid(
            "command",
            format!("`{command_str}` is not one of solve, verify, bench, audit"),
        )
    })?;

    let problem = match (&over.problem, raw.problem) {
        (Some(name), _) => benchmark_choice(name)?,
        (None, Some(toml::Value::String(name))) => benchmark_choice(&name)?,
        (None, Some(v @ toml::Value::Table(_))) => {
            let p: InlineProblem = v
                .try_into()
                .map_err(|e: toml::de::Error| invalid("problem", e.message().to_string()))?;
            ProblemChoice::Inline(Box::new(p))
        }
        (None, Some(other)) => {
            return Err(invalid(
                "problem",
                format!("expected a benchmark name or a table, got {}", other.type_str()),
            ))
        }
        (None, None) if command == Command::Bench => ProblemChoice::AllBenchmarks,
        (None, None) => return Err(ConfigError::Missing("problem")),
    };

    let output_dir = over
        .output_dir
        .clone()
        .or(raw.output_dir)
        .ok_or(ConfigError::Missing("output_dir"))?;

    let benchmark = {
        let d = BenchParams::default();
        let r = raw.benchmark;
        let p = BenchParams {
            a: finite("benchmark.a", r.a.unwrap_or(d.a))?,
            b: finite("benchmark.b", r.b.unwrap_or(d.b))?,
            c: finite("benchmark.c", r.c.unwrap_or(d.c))?,
            exp_l: finite("benchmark.exp_l", r.exp_l.unwrap_or(d.exp_l))?,
            fromm_horizon: positive(
                "benchmark.fromm_horizon",
                r.fromm_horizon.unwrap_or(d.fromm_horizon),
            )?,
        };
        if (p.a * p.b - 1.0).abs() < 1e-12 {
            return Err(invalid("benchmark.a", "a·b = 1 has no decoupling field"));
        }
        p
    };

    let lattice = LatticeConfig {
        time_steps: raw
            .lattice
            .time_steps
            .map(|v| count("lattice.time_steps", v, 1))
            .transpose()?,
        space_nodes: raw
            .lattice
            .space_nodes
            .map(|v| count("lattice.space_nodes", v, 2))
            .transpose()?,
        space_box: match raw.lattice.space_box {
            Some(b) => {
                if b.is_empty() {
                    return Err(invalid("lattice.box", "needs one [min, max] pair per axis"));
                }
                for [lo, hi] in &b {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(invalid("lattice.box", format!("[{lo}, {hi}] is not an interval")));
                    }
                }
                Some(b)
            }
            None => None,
        },
        out_of_box: raw
            .lattice
            .out_of_box
            .map(|s| {
                OutOfBox::parse(&s)
                    .ok_or_else(|| invalid("lattice.out_of_box", format!("`{s}` is not clamp or linear")))
            })
            .transpose()?,
    };

    let mc = McConfig {
        paths: count("mc.paths", raw.mc.paths.unwrap_or(10_000), 1)?,
        seed: match (over.seed, raw.mc.seed) {
            (Some(s), _) => s,
            (None, Some(s)) => u64::try_from(s).map_err(|_| invalid("mc.seed", "must be non-negative"))?,
            (None, None) => 42,
        },
        x_init: raw.mc.x_init.map(|x| finite_vec("mc.x_init", x)).transpose()?,
    };

    let solver = {
        let d = BackwardStepConfig::default();
        let r = raw.solver;
        let q = count("solver.quadrature_nodes", r.quadrature_nodes.unwrap_or(8), 1)?;
        let quadrature = if q == 8 {
            d.quadrature
        } else {
            QuadratureRule::gauss_hermite(q).map_err(|e| match e {
                FbsdeError::InvalidParameter { reason, .. } => invalid("solver.quadrature_nodes", reason),
                other => other.into(),
            })?
        };
        let v_mode = match r.v_mode {
            Some(s) => VMode::parse(&s)
                .ok_or_else(|| invalid("solver.v_mode", format!("`{s}` is not explicit or implicit")))?,
            None => d.v_mode,
        };
        let cfg = BackwardStepConfig {
            quadrature,
            v_mode,
            implicit_tol: r.implicit_tol.unwrap_or(d.implicit_tol),
            implicit_max_iter: count("solver.implicit_max_iter", r.implicit_max_iter.unwrap_or(200), 1)?,
            damping: r.damping.unwrap_or(d.damping),
        };
        cfg.validate()?;
        cfg
    };

    let stop = {
        let d = StopRule::default();
        let r = raw.stop;
        let rule = StopRule {
            tolerance: r.tolerance.unwrap_or(d.tolerance),
            max_iter: count("stop.max_iter", r.max_iter.unwrap_or(d.max_iter as i64), 1)?,
            blowup_threshold: r.blowup_threshold,
            min_iter: count("stop.min_iter", r.min_iter.unwrap_or(d.min_iter as i64), 1)?,
        };
        rule.validate()?;
        rule
    };

    let verify = {
        let r = raw.verify;
        let h = r.h.unwrap_or_else(|| vec![0.0, 0.01, 0.1, 0.5]);
        if h.is_empty() {
            return Err(invalid("verify.h", "needs at least one step"));
        }
        if let Some(bad) = h.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(
                "verify.h",
                format!("steps must be finite and non-negative, got {bad}"),
            ));
        }
        let epsilon = r.epsilon.unwrap_or(0.5);
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(invalid("verify.epsilon", "must lie in (0, 1)"));
        }
        let weighting = match r.weighting.as_deref() {
            None | Some("decaying") => Weighting::Decaying,
            Some("growing") => Weighting::Growing,
            Some(s) => {
                return Err(invalid(
                    "verify.weighting",
                    format!("`{s}` is not decaying or growing"),
                ))
            }
        };
        let v = VerifyConfig {
            h,
            x: r.x.map(|x| finite_vec("verify.x", x)).transpose()?,
            x2: r.x2.map(|x| finite_vec("verify.x2", x)).transpose()?,
            key_lemma_sigmas: non_negative("verify.key_lemma_sigmas", r.key_lemma_sigmas.unwrap_or(3.0))?,
            max_exit_fraction: non_negative("verify.max_exit_fraction", r.max_exit_fraction.unwrap_or(0.01))?,
            epsilon,
            weighting,
            dominated_sigmas: non_negative("verify.dominated_sigmas", r.dominated_sigmas.unwrap_or(3.0))?,
            holder_ratio_min: positive("verify.holder_ratio_min", r.holder_ratio_min.unwrap_or(0.5))?,
            holder_ratio_max: positive("verify.holder_ratio_max", r.holder_ratio_max.unwrap_or(2.0))?,
        };
        if v.holder_ratio_min > v.holder_ratio_max {
            return Err(invalid(
                "verify.holder_ratio_min",
                "exceeds verify.holder_ratio_max",
            ));
        }
        v
    };

    let bench = BenchConfig {
        u_tolerance: positive("bench.u_tolerance", raw.bench.u_tolerance.unwrap_or(0.02))?,
        moment_sigmas: positive("bench.moment_sigmas", raw.bench.moment_sigmas.unwrap_or(4.0))?,
    };

    Ok(RunConfig {
        command,
        problem,
        benchmark,
        lattice,
        mc,
        solver,
        stop,
        verify,
        bench,
        output_dir,
        emit_paths: over.emit_paths || raw.emit_paths,
        emit_fields: over.emit_fields || raw.emit_fields,
        strict: over.strict,
    })
}

fn benchmark_choice(name: &str) -> Result<ProblemChoice, ConfigError> {
    if BENCHMARK_NAMES.contains(&name) {
        Ok(ProblemChoice::Benchmark(name.to_string()))
    } else {
        Err(invalid(
            "problem",
            format!(
                "unknown benchmark `{name}`; valid names: {}",
                BENCHMARK_NAMES.join(", ")
            ),
        ))
    }
}

fn count(key: &str, v: i64, min: usize) -> Result<usize, ConfigError> {
    usize::try_from(v)
        .ok()
        .filter(|c| *c >= min)
        .ok_or_else(|| invalid(key, format!("must be at least {min}, got {v}")))
}

fn finite(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be finite, got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be non-negative, got {v}")))
    }
}

fn finite_vec(key: &str, v: Vec<f64>) -> Result<Vec<f64>, ConfigError> {
    match v.iter().find(|a| !a.is_finite()) {
        Some(bad) => Err(invalid(key, format!("entries must be finite, got {bad}"))),
        None => Ok(v),
    }
}

/// The TOML parser reports a duplicate at its second occurrence only; the
/// first one is recovered by scanning the enclosing table for the same key.
fn syntax_error(text: &str, e: toml::de::Error) -> ConfigError {
    if e.message().starts_with("duplicate key") {
        if let Some(found) = e.span().and_then(|span| duplicate_lines(text, span.start)) {
            return found;
        }
    }
    ConfigError::Syntax(e.to_string().trim_end().to_string())
}

fn duplicate_lines(text: &str, offset: usize) -> Option<ConfigError> {
    let lines: Vec<&str> = text.lines().collect();
    let at = text.get(..offset)?.matches('\n').count();
    let line = lines.get(at)?.trim();
    let is_header = |l: &str| l.trim_start().starts_with('[');
    if is_header(line) {
        let header = line.split('#').next()?.trim();
        let found: Vec<usize> = (0..lines.len())
            .filter(|&i| lines[i].split('#').next().map(str::trim) == Some(header))
            .map(|i| i + 1)
            .collect();
        let key = header.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        return (found.len() >= 2).then_some(ConfigError::DuplicateKey { key, lines: found });
    }
    let key = line.split('=').next()?.trim().trim_matches('"').to_string();
    let first = (0..at).rev().find(|&i| is_header(lines[i])).map_or(0, |i| i + 1);
    let last = (at + 1..lines.len())
        .find(|&i| is_header(lines[i]))
        .unwrap_or(lines.len());
    let found: Vec<usize> = (first..last)
        .filter(|&i| {
            let mut kv = lines[i].splitn(2, '=');
            kv.next().map(|k| k.trim().trim_matches('"')) == Some(key.as_str()) && kv.next().is_some()
        })
        .map(|i| i + 1)
        .collect();
    (found.len() >= 2).then_some(ConfigError::DuplicateKey { key, lines: found })
}
