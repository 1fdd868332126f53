//! The outer Picard loop over decoupling fields, its report, and assembly
//! of the coupled solution along simulated paths.

use std::io::{BufRead, Write};

use crate::backward::{backward_iterate, BackwardStats, BackwardStepConfig};
use crate::error::{FbsdeError, Result};
use crate::fields::csv_io::{fmt_f64, metadata_value, parse_f64};
use crate::fields::{default_offsets, make_initial_field, DecouplingFieldPair, Lattice, RegularityReport};
use crate::forward::{map_paths, ForwardRun};
use crate::linalg::{diff_norm, mean_and_stderr};
use crate::noise::NoisePlan;
use crate::problem::{check_degenerate_point, ProblemSpec};

const MAGIC: &str = "# fbsde-report";

/// When to stop iterating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    /// Converged once `δ_n ≤ tolerance`.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Blow-up once the growth constant exceeds this. `None` means
    /// `10³ ×` the growth constant of the initial field, or `10³` when that
    /// constant is zero.
    pub blowup_threshold: Option<f64>,
    /// Convergence is not declared before this many iterations.
    pub min_iter: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iter: 50,
            blowup_threshold: None,
            min_iter: 1,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(FbsdeError::param("stop.tolerance", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(FbsdeError::param("stop.max_iter", "must be at least 1"));
        }
        if self.min_iter > self.max_iter {
            return Err(FbsdeError::param("stop.min_iter", "exceeds stop.max_iter"));
        }
        if let Some(b) = self.blowup_threshold {
            if b.is_nan() || b <= 0.0 {
                return Err(FbsdeError::param("stop.blowup_threshold", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn threshold_for(&self, initial_growth: f64) -> f64 {
        self.blowup_threshold.unwrap_or(if initial_growth > 0.0 {
            1e3 * initial_growth
        } else {
            1e3
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Converged,
    MaxIterations,
    BlowUp,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::MaxIterations => "max-iterations",
            Verdict::BlowUp => "blow-up",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "converged" => Some(Verdict::Converged),
            "max-iterations" => Some(Verdict::MaxIterations),
            "blow-up" => Some(Verdict::BlowUp),
            _ => None,
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    /// `δ_n = distance(field_n, field_{n−1})`.
    pub delta: f64,
    pub regularity: RegularityReport,
    /// Per frozen point, `max_i |u_n(t_i, x₀) − φ(x₀)| + |v_n(t_i, x₀)|`.
    pub frozen_residuals: Vec<f64>,
    pub clamp_fraction: f64,
    pub implicit_worst_ratio: f64,
    pub mode_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub records: Vec<IterationRecord>,
    pub verdict: Verdict,
    pub stop: StopRule,
    /// Growth constant of the initial field.
    pub initial_growth: f64,
    /// Degenerate points with zero residual, tracked across iterations.
    pub frozen_points: Vec<Vec<f64>>,
}

/// Verdict implied by the recorded sequences; `None` while the run would
/// still continue.
pub fn derive_verdict(
    deltas: &[f64],
    growth: &[f64],
    stop: &StopRule,
    initial_growth: f64,
) -> Option<Verdict> {
    let threshold = stop.threshold_for(initial_growth);
    for (k, (d, g)) in deltas.iter().zip(growth).enumerate() {
        let n = k + 1;
        if g.is_nan() || *g > threshold {
            return Some(Verdict::BlowUp);
        }
        if *d <= stop.tolerance && n >= stop.min_iter {
            return Some(Verdict::Converged);
        }
        if n >= stop.max_iter {
            return Some(Verdict::MaxIterations);
        }
    }
    None
}

impl IterationReport {
    pub fn deltas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta).collect()
    }

    pub fn growth(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.regularity.growth_constant)
            .collect()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Recomputes the verdict from the serialized sequences.
    pub fn rederive_verdict(&self) -> Option<Verdict> {
        derive_verdict(&self.deltas(), &self.growth(), &self.stop, self.initial_growth)
    }

    /// Largest frozen-point residual over all iterations and points.
    pub fn max_frozen_residual(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.frozen_residuals.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Whether `sup |u_n|` is non-decreasing over the last `window`
    /// records (all of them when fewer are available).
    pub fn sup_norm_monotone(&self, window: usize) -> bool {
        let start = self.records.len().saturating_sub(window);
        self.records[start..]
            .windows(2)
            .all(|w| w[1].regularity.sup_norm_u >= w[0].regularity.sup_norm_u)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let points: Vec<String> = self
            .frozen_points
            .iter()
            .map(|p| p.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(":"))
            .collect();
        writeln!(
            w,
            "{MAGIC} verdict={} tolerance={} max_iter={} min_iter={} blowup_threshold={} initial_growth={} frozen_points={}",
            self.verdict,
            fmt_f64(self.stop.tolerance),
            self.stop.max_iter,
            self.stop.min_iter,
            self.stop.blowup_threshold.map_or("default".to_string(), fmt_f64),
            fmt_f64(self.initial_growth),
            if points.is_empty() { "none".to_string() } else { points.join(";") },
        )?;
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = [
            "n",
            "delta",
            "modulus_u",
            "modulus_v",
            "growth",
            "time_modulus",
            "sup_norm_u",
            "clamp_fraction",
            "implicit_worst_ratio",
            "mode_gap",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..self.frozen_points.len()).map(|k| format!("frozen_{k}")));
        out.write_record(&header)?;
        for r in &self.records {
            let g = &r.regularity;
            let mut row = vec![
                r.n.to_string(),
                fmt_f64(r.delta),
                fmt_f64(g.holder_half_modulus_u),
                fmt_f64(g.holder_half_modulus_v),
                fmt_f64(g.growth_constant),
                fmt_f64(g.time_modulus_u),
                fmt_f64(g.sup_norm_u),
                fmt_f64(r.clamp_fraction),
                fmt_f64(r.implicit_worst_ratio),
                r.mode_gap.map_or(String::new(), fmt_f64),
            ];
            row.extend(r.frozen_residuals.iter().map(|v| fmt_f64(*v)));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut r: R) -> Result<Self> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let meta = first
            .trim_end()
            .strip_prefix(MAGIC)
            .ok_or_else(|| FbsdeError::Format("missing report metadata line".into()))?;
        let verdict_s = metadata_value(meta, "verdict")?;
        let verdict = Verdict::parse(verdict_s)
            .ok_or_else(|| FbsdeError::Format(format!("unknown verdict `{verdict_s}`")))?;
        let count = |key: &str| -> Result<usize> {
            metadata_value(meta, key)?
                .parse()
                .map_err(|_| FbsdeError::Format(format!("bad {key}")))
        };
        let threshold = metadata_value(meta, "blowup_threshold")?;
        let stop = StopRule {
            tolerance: parse_f64(metadata_value(meta, "tolerance")?, "tolerance")?,
            max_iter: count("max_iter")?,
            min_iter: count("min_iter")?,
            blowup_threshold: if threshold == "default" {
                None
            } else {
                Some(parse_f64(threshold, "blowup_threshold")?)
            },
        };
        let initial_growth = parse_f64(metadata_value(meta, "initial_growth")?, "initial_growth")?;
        let points = metadata_value(meta, "frozen_points")?;
        let frozen_points = if points == "none" {
            Vec::new()
        } else {
            points
                .split(';')
                .map(|p| p.split(':').map(|v| parse_f64(v, "frozen point")).collect())
                .collect::<Result<Vec<Vec<f64>>>>()?
        };
        let mut reader = csv::Reader::from_reader(r);
        let width = 10 + frozen_points.len();
        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(FbsdeError::Format(format!(
                    "row has {} fields, expected {width}",
                    rec.len()
                )));
            }
            let num = |k: usize, what: &str| parse_f64(&rec[k], what);
            records.push(IterationRecord {
                n: rec[0]
                    .parse()
                    .map_err(|_| FbsdeError::Format(format!("bad iteration index `{}`", &rec[0])))?,
                delta: num(1, "delta")?,
                regularity: RegularityReport {
                    holder_half_modulus_u: num(2, "modulus_u")?,
                    holder_half_modulus_v: num(3, "modulus_v")?,
                    growth_constant: num(4, "growth")?,
                    time_modulus_u: num(5, "time_modulus")?,
                    sup_norm_u: num(6, "sup_norm_u")?,
                },
                clamp_fraction: num(7, "clamp_fraction")?,
                implicit_worst_ratio: num(8, "implicit_worst_ratio")?,
                mode_gap: if rec[9].is_empty() {
                    None
                } else {
                    Some(num(9, "mode_gap")?)
                },
                frozen_residuals: (0..frozen_points.len())
                    .map(|k| num(10 + k, "frozen residual"))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            records,
            verdict,
            stop,
            initial_growth,
            frozen_points,
        })
    }
}

/// Candidate degenerate points of `spec` whose audited residual is exactly
/// zero and that lie in the box.
pub fn frozen_points(spec: &ProblemSpec) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for x0 in &spec.coeffs.degenerate_candidates {
        if spec.in_box(x0) && check_degenerate_point(spec, x0, 9)? == 0.0 {
            out.push(x0.clone());
        }
    }
    Ok(out)
}

fn frozen_residual(spec: &ProblemSpec, field: &DecouplingFieldPair, x0: &[f64]) -> f64 {
    let (m, d) = (field.m(), field.d());
    let mut phi = vec![0.0; m];
    spec.coeffs.terminal(x0, &mut phi);
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; m * d];
    let zero = vec![0.0; m * d];
    (0..=field.lattice().time_steps())
        .map(|i| {
            field.eval_at_index(i, x0, &mut u, &mut v);
            diff_norm(&u, &phi) + diff_norm(&v, &zero)
        })
        .fold(0.0, f64::max)
}

/// The Picard loop `field_n = backward_iterate(field_{n−1})` from
/// `u_0 = φ`, `v_0 = 0`.
pub fn run_iteration(
    spec: &ProblemSpec,
    lattice: &Lattice,
    cfg: &BackwardStepConfig,
    stop: &StopRule,
) -> Result<(DecouplingFieldPair, IterationReport)> {
    run_iteration_with(spec, lattice, cfg, stop, |_, _, _| Ok(()))
}

/// [`run_iteration`] with a hook called after every completed iteration.
pub fn run_iteration_with<F>(
    spec: &ProblemSpec,
    lattice: &Lattice,
    cfg: &BackwardStepConfig,
    stop: &StopRule,
    mut on_iteration: F,
) -> Result<(DecouplingFieldPair, IterationReport)>
where
    F: FnMut(&DecouplingFieldPair, &IterationRecord, &BackwardStats) -> Result<()>,
{
    stop.validate()?;
    cfg.validate()?;
    let offsets = default_offsets(lattice);
    let mut field = make_initial_field(spec, lattice)?;
    let initial_growth = field.measure_regularity(&offsets)?.growth_constant;
    let points = frozen_points(spec)?;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut deltas = Vec::new();
    let mut growth = Vec::new();
    let verdict = loop {
        let n = records.len() + 1;
        let (next, stats) = backward_iterate(spec, &field, cfg).map_err(|e| FbsdeError::AtIteration {
            iteration: n,
            source: Box::new(e),
        })?;
        let regularity = next.measure_regularity(&offsets)?;
        let record = IterationRecord {
            n,
            delta: next.distance(&field)?,
            regularity,
            frozen_residuals: points.iter().map(|x0| frozen_residual(spec, &next, x0)).collect(),
            clamp_fraction: stats.clamp_fraction,
            implicit_worst_ratio: stats.implicit_worst_ratio,
            mode_gap: stats.mode_gap,
        };
        on_iteration(&next, &record, &stats)?;
        deltas.push(record.delta);
        growth.push(regularity.growth_constant);
        records.push(record);
        field = next;
        if let Some(v) = derive_verdict(&deltas, &growth, stop, initial_growth) {
            break v;
        }
    };
    let report = IterationReport {
        records,
        verdict,
        stop: *stop,
        initial_growth,
        frozen_points: points,
    };
    Ok((field, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residuals {
    /// `E|Y(T) − φ(X(T))|`.
    pub terminal: f64,
    pub terminal_stderr: f64,
    /// `E|Y(0) − Y(T) − Σ f Δt + Σ Z ΔW|`.
    pub backward_dynamics: f64,
    pub backward_dynamics_stderr: f64,
}

/// `(X, Y, Z)` along simulated paths with `Y = u(·, X)`, `Z = v(·, X)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FbsdeSolution {
    pub field: DecouplingFieldPair,
    pub x_init: Vec<f64>,
    paths: usize,
    time_nodes: usize,
    dims: (usize, usize, usize),
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    pub residuals: Residuals,
    pub exited_box_fraction: f64,
}

impl FbsdeSolution {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn time_nodes(&self) -> usize {
        self.time_nodes
    }

    pub fn x(&self, path: usize, i: usize) -> &[f64] {
        let l = self.dims.0;
        let at = (path * self.time_nodes + i) * l;
        &self.x[at..at + l]
    }

    pub fn y(&self, path: usize, i: usize) -> &[f64] {
        let m = self.dims.1;
        let at = (path * self.time_nodes + i) * m;
        &self.y[at..at + m]
    }

    pub fn z(&self, path: usize, i: usize) -> &[f64] {
        let md = self.dims.1 * self.dims.2;
        let at = (path * self.time_nodes + i) * md;
        &self.z[at..at + md]
    }

    /// Writes `path_id,time_index,x_*,y_*,z_*` rows.
    pub fn write_paths_csv<W: Write>(&self, w: W) -> Result<()> {
        let (l, m, d) = self.dims;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["path_id".to_string(), "time_index".to_string()];
        header.extend((0..l).map(|a| format!("x_{a}")));
        header.extend((0..m).map(|r| format!("y_{r}")));
        header.extend((0..m).flat_map(|r| (0..d).map(move |c| format!("z_{r}_{c}"))));
        out.write_record(&header)?;
        for p in 0..self.paths {
            for i in 0..self.time_nodes {
                let mut row = vec![p.to_string(), i.to_string()];
                row.extend(self.x(p, i).iter().map(|v| fmt_f64(*v)));
                row.extend(self.y(p, i).iter().map(|v| fmt_f64(*v)));
                row.extend(self.z(p, i).iter().map(|v| fmt_f64(*v)));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Simulates `X` from `x_init` at time zero under `field` and evaluates the
/// residuals of the coupled system along the paths.
pub fn assemble_solution(
    spec: &ProblemSpec,
    field: &DecouplingFieldPair,
    x_init: &[f64],
    noise: &NoisePlan,
) -> Result<FbsdeSolution> {
    let starts = vec![x_init.to_vec()];
    let run = ForwardRun::new(spec, field, 0, &starts, *noise)?;
    let (l, m, d) = (spec.dims.l, spec.dims.m, spec.dims.d);
    let lattice = field.lattice();
    let n = lattice.time_steps();
    let dt = lattice.dt();
    struct PathData {
        x: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        terminal: f64,
        dynamics: f64,
    }
    let per_path = map_paths(&run, |run, p| {
        let mut data = PathData {
            x: Vec::with_capacity((n + 1) * l),
            y: Vec::with_capacity((n + 1) * m),
            z: Vec::with_capacity((n + 1) * m * d),
            terminal: 0.0,
            dynamics: 0.0,
        };
        let mut u = vec![0.0; m];
        let mut v = vec![0.0; m * d];
        let mut f = vec![0.0; m];
        let mut phi = vec![0.0; m];
        // Y(0) − Σ f Δt + Σ Z ΔW, minus Y(T) at the end
        let mut acc = vec![0.0; m];
        let outcome = run.run_path(p, |k, xs, dw| {
            field.eval_at_index(k, xs, &mut u, &mut v);
            data.x.extend_from_slice(xs);
            data.y.extend_from_slice(&u);
            data.z.extend_from_slice(&v);
            if k == 0 {
                acc.copy_from_slice(&u);
            }
            if k < n {
                spec.coeffs.driver(lattice.time(k), xs, &u, &v, &mut f);
                for r in 0..m {
                    let mut zdw = 0.0;
                    for c in 0..d {
                        zdw += v[r * d + c] * dw[c];
                    }
                    acc[r] += -f[r] * dt + zdw;
                }
            } else {
                spec.coeffs.terminal(xs, &mut phi);
                data.terminal = diff_norm(&u, &phi);
                for r in 0..m {
                    acc[r] -= u[r];
                }
                data.dynamics = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
            }
        })?;
        Ok((outcome, data))
    })?;
    let divergent = per_path.iter().filter(|(o, _)| o.divergent).count();
    if divergent > 0 {
        return Err(FbsdeError::Divergent {
            paths: divergent,
            total: noise.paths,
        });
    }
    let terminal: Vec<f64> = per_path.iter().map(|(_, d)| d.terminal).collect();
    let dynamics: Vec<f64> = per_path.iter().map(|(_, d)| d.dynamics).collect();
    if terminal.iter().chain(&dynamics).any(|v| !v.is_finite()) {
        return Err(FbsdeError::EvaluatorFailure {
            evaluator: "driver",
            point: format!("along paths from x = {x_init:?}"),
        });
    }
    let (t_mean, t_se) = mean_and_stderr(&terminal);
    let (b_mean, b_se) = mean_and_stderr(&dynamics);
    let exited = per_path.iter().filter(|(o, _)| o.exited[0]).count() as f64 / noise.paths as f64;
    let mut x = Vec::with_capacity(noise.paths * (n + 1) * l);
    let mut y = Vec::with_capacity(noise.paths * (n + 1) * m);
    let mut z = Vec::with_capacity(noise.paths * (n + 1) * m * d);
    for (_, data) in per_path {
        x.extend(data.x);
        y.extend(data.y);
        z.extend(data.z);
    }
    Ok(FbsdeSolution {
        field: field.clone(),
        x_init: x_init.to_vec(),
        paths: noise.paths,
        time_nodes: n + 1,
        dims: (l, m, d),
        x,
        y,
        z,
        residuals: Residuals {
            terminal: t_mean,
            terminal_stderr: t_se,
            backward_dynamics: b_mean,
            backward_dynamics_stderr: b_se,
        },
        exited_box_fraction: exited,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderUniformity {
    /// `max_n` of the Hölder-1/2 modulus of `u_n`.
    pub max_over_n: f64,
    pub ratio_last_to_first: f64,
    pub max_over_n_v: f64,
    pub ratio_last_to_first_v: f64,
}

/// Moduli at or below this are round-off on a constant-in-space field.
const ZERO_MODULUS: f64 = 1e-12;

fn ratio(last: f64, first: f64) -> f64 {
    if last == first || (last.abs() <= ZERO_MODULUS && first.abs() <= ZERO_MODULUS) {
        1.0
    } else {
        last / first
    }
}

/// Drift of the Hölder-1/2 moduli across the recorded iterations.
pub fn holder_uniformity_check(report: &IterationReport) -> Result<HolderUniformity> {
    let r = &report.records;
    if r.len() < 2 {
        return Err(FbsdeError::param("report", "need at least two iterations"));
    }
    let u: Vec<f64> = r.iter().map(|x| x.regularity.holder_half_modulus_u).collect();
    let v: Vec<f64> = r.iter().map(|x| x.regularity.holder_half_modulus_v).collect();
    Ok(HolderUniformity {
        max_over_n: u.iter().copied().fold(0.0, f64::max),
        ratio_last_to_first: ratio(u[u.len() - 1], u[0]),
        max_over_n_v: v.iter().copied().fold(0.0, f64::max),
        ratio_last_to_first_v: ratio(v[v.len() - 1], v[0]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Axis, OutOfBox};
    use crate::problem::{CoefficientSet, DeclaredConstants, Dimensions, Interval};

    fn decoupled() -> ProblemSpec {
        let coeffs = CoefficientSet::new(
            |_t, x, _y, _z, out| out[0] = 0.5 + 0.2 * x[0].sin(),
            |_t, x, _y, _z, out| out[0] = x[0].cos(),
            |x, out| out[0] = x[0].tanh(),
        )
        .with_declared(DeclaredConstants {
            l_f_y: Some(0.0),
            ..Default::default()
        });
        ProblemSpec::new(
            Dimensions::new(1, 1, 1).unwrap(),
            coeffs,
            1.0,
            vec![Interval::new(-2.0, 2.0).unwrap()],
        )
        .unwrap()
    }

    fn lattice() -> Lattice {
        Lattice::new(
            1.0,
            8,
            vec![Axis {
                min: -2.0,
                max: 2.0,
                nodes: 17,
            }],
        )
        .unwrap()
        .with_out_of_box(OutOfBox::LinearExtrapolate)
    }

    #[test]
    fn decoupled_problem_is_exact_after_one_pass() {
        let spec = decoupled();
        let stop = StopRule {
            tolerance: 1e-12,
            max_iter: 4,
            ..Default::default()
        };
        let (_, report) = run_iteration(&spec, &lattice(), &BackwardStepConfig::default(), &stop).unwrap();
        assert_eq!(report.verdict, Verdict::Converged);
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.records[1].delta, 0.0);
        let h = holder_uniformity_check(&report).unwrap();
        assert_eq!(h.ratio_last_to_first, 1.0);
        assert_eq!(h.ratio_last_to_first_v, 1.0);
    }

    #[test]
    fn verdict_is_a_pure_function_of_the_sequences() {
        let stop = StopRule {
            tolerance: 0.1,
            max_iter: 5,
            blowup_threshold: Some(10.0),
            min_iter: 3,
        };
        assert_eq!(derive_verdict(&[1.0, 0.05], &[1.0, 1.0], &stop, 1.0), None);
        assert_eq!(
            derive_verdict(&[1.0, 0.05, 0.05], &[1.0, 1.0, 1.0], &stop, 1.0),
            Some(Verdict::Converged)
        );
        assert_eq!(
            derive_verdict(&[1.0, 1.0], &[1.0, 11.0], &stop, 1.0),
            Some(Verdict::BlowUp)
        );
        assert_eq!(
            derive_verdict(&[1.0; 5], &[1.0; 5], &stop, 1.0),
            Some(Verdict::MaxIterations)
        );
        assert_eq!(
            derive_verdict(&[1.0], &[f64::NAN], &stop, 1.0),
            Some(Verdict::BlowUp)
        );
        let default = StopRule::default();
        assert_eq!(default.threshold_for(0.0), 1e3);
        assert_eq!(default.threshold_for(4.0), 4e3);
    }

    #[test]
    fn report_round_trips_through_csv() {
        let spec = decoupled().with_horizon(1.0).unwrap();
        let mut spec = spec;
        spec.coeffs.degenerate_candidates = vec![vec![0.3]];
        let stop = StopRule {
            max_iter: 3,
            min_iter: 3,
            ..Default::default()
        };
        let (_, report) = run_iteration(&spec, &lattice(), &BackwardStepConfig::default(), &stop).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let back = IterationReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.rederive_verdict(), Some(report.verdict));
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn rejects_bad_stop_rules() {
        let mut s = StopRule::default();
        s.tolerance = 0.0;
        assert!(s.validate().is_err());
        s.tolerance = 1e-3;
        s.max_iter = 0;
        assert!(s.validate().is_err());
        s.max_iter = 2;
        s.min_iter = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn solution_residuals_are_small_for_a_decoupled_problem() {
        let spec = decoupled();
        let lat = Lattice::new(
            1.0,
            32,
            vec![Axis {
                min: -4.0,
                max: 4.0,
                nodes: 81,
            }],
        )
        .unwrap()
        .with_out_of_box(OutOfBox::LinearExtrapolate);
        let spec = spec
            .with_space_box(vec![Interval::new(-4.0, 4.0).unwrap()])
            .unwrap();
        let stop = StopRule::default();
        let (field, _) = run_iteration(&spec, &lat, &BackwardStepConfig::default(), &stop).unwrap();
        let noise = NoisePlan::new(3, 2000, 32, 1).unwrap();
        let sol = assemble_solution(&spec, &field, &[0.2], &noise).unwrap();
        assert!(sol.residuals.terminal < 5e-3, "{:?}", sol.residuals);
        assert!(sol.residuals.backward_dynamics < 0.1, "{:?}", sol.residuals);
        assert_eq!(sol.x(0, 0), &[0.2]);
        assert_eq!(sol.time_nodes(), 33);
    }
}
