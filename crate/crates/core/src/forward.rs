//! Euler–Maruyama simulation of the forward SDE with a frozen decoupling
//! field plugged into the diffusion, and the common-noise L¹ estimate.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{FbsdeError, Result};
use crate::fields::csv_io::fmt_f64;
use crate::fields::DecouplingFieldPair;
use crate::linalg::{all_finite, mean_and_stderr};
use crate::noise::NoisePlan;
use crate::problem::ProblemSpec;

/// Paths started from one or more points that share every increment.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub start_time_index: usize,
    pub start_points: Vec<Vec<f64>>,
    l: usize,
    paths: usize,
    time_nodes: usize,
    /// `(path, time node, start point, component)`, row-major.
    states: Vec<f64>,
    /// Per start point: fraction of paths that visited a state outside the
    /// box at a node where the field was evaluated.
    pub exited_box_fraction: Vec<f64>,
    /// Paths whose state overflowed; they are frozen at their last finite
    /// state.
    pub divergent_paths: Vec<usize>,
}

impl PathBundle {
    pub fn paths(&self) -> usize {
        self.paths
    }

    /// Number of stored time nodes, `N − start_time_index + 1`.
    pub fn time_nodes(&self) -> usize {
        self.time_nodes
    }

    pub fn dim(&self) -> usize {
        self.l
    }

    pub fn is_divergent(&self) -> bool {
        !self.divergent_paths.is_empty()
    }

    /// State of `path` at lattice time index `start_time_index + k`, for
    /// start point `s`.
    pub fn state(&self, path: usize, k: usize, s: usize) -> &[f64] {
        let np = self.start_points.len();
        let at = ((path * self.time_nodes + k) * np + s) * self.l;
        &self.states[at..at + self.l]
    }

    pub fn terminal(&self, path: usize, s: usize) -> &[f64] {
        self.state(path, self.time_nodes - 1, s)
    }

    /// Writes `path_id,time_index,start,x_1..x_l` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path_id,time_index,start")?;
        for a in 0..self.l {
            write!(w, ",x_{}", a + 1)?;
        }
        writeln!(w)?;
        for p in 0..self.paths {
            for k in 0..self.time_nodes {
                for s in 0..self.start_points.len() {
                    write!(w, "{},{},{}", p, self.start_time_index + k, s)?;
                    for x in self.state(p, k, s) {
                        write!(w, ",{}", fmt_f64(*x))?;
                    }
                    writeln!(w)?;
                }
            }
        }
        Ok(())
    }
}

/// What happened to one path.
#[derive(Clone, Debug, Default)]
pub(crate) struct PathOutcome {
    pub divergent: bool,
    pub exited: Vec<bool>,
}

/// Shared, validated simulation context.
pub(crate) struct ForwardRun<'a> {
    pub spec: &'a ProblemSpec,
    pub field: &'a DecouplingFieldPair,
    pub start_time_index: usize,
    pub start_points: &'a [Vec<f64>],
    pub noise: NoisePlan,
}

impl<'a> ForwardRun<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        field: &'a DecouplingFieldPair,
        start_time_index: usize,
        start_points: &'a [Vec<f64>],
        noise: NoisePlan,
    ) -> Result<Self> {
        let lattice = field.lattice();
        let dims = spec.dims;
        if field.m() != dims.m || field.d() != dims.d || lattice.dim() != dims.l {
            return Err(FbsdeError::ShapeMismatch(
                "field dimensions do not match the problem".into(),
            ));
        }
        if noise.steps != lattice.time_steps() {
            return Err(FbsdeError::param(
                "noise.steps",
                format!(
                    "{} steps but the lattice has {}",
                    noise.steps,
                    lattice.time_steps()
                ),
            ));
        }
        if noise.dim != dims.d {
            return Err(FbsdeError::param(
                "noise.dim",
                format!("{} noise axes but the problem has d = {}", noise.dim, dims.d),
            ));
        }
        if start_time_index > lattice.time_steps() {
            return Err(FbsdeError::param("start_time_index", "beyond the last time node"));
        }
        if start_points.is_empty() {
            return Err(FbsdeError::param("start_points", "need at least one start point"));
        }
        for x in start_points {
            if x.len() != dims.l {
                return Err(FbsdeError::ShapeMismatch(format!(
                    "start point has {} coordinates, expected {}",
                    x.len(),
                    dims.l
                )));
            }
            if !spec.in_box(x) {
                return Err(FbsdeError::param(
                    "start_points",
                    format!("{x:?} lies outside the space box"),
                ));
            }
        }
        Ok(Self {
            spec,
            field,
            start_time_index,
            start_points,
            noise,
        })
    }

    pub fn time_nodes(&self) -> usize {
        self.field.lattice().time_steps() - self.start_time_index + 1
    }

    /// Simulates one path, calling `visit(k, states, dw)` at every stored
    /// node `k` with all start points' states (`S × l`) and the increment
    /// that leaves that node (empty at the last node).
    pub fn run_path<F>(&self, path: usize, mut visit: F) -> Result<PathOutcome>
    where
        F: FnMut(usize, &[f64], &[f64]),
    {
        let lattice = self.field.lattice();
        let dims = self.spec.dims;
        let (l, m, d) = (dims.l, dims.m, dims.d);
        let n_steps = lattice.time_steps();
        let dt = lattice.dt();
        let sq = dt.sqrt();
        let np = self.start_points.len();

        let mut normals = vec![0.0; n_steps * d];
        self.noise.fill_standard_normals(path, &mut normals);
        let mut x: Vec<f64> = self.start_points.iter().flatten().copied().collect();
        let mut next = x.clone();
        let mut u = vec![0.0; m];
        let mut v = vec![0.0; m * d];
        let mut sig = vec![0.0; l * d];
        let mut drift = vec![0.0; l];
        let mut dw = vec![0.0; d];
        let mut outcome = PathOutcome {
            divergent: false,
            exited: vec![false; np],
        };

        for i in self.start_time_index..n_steps {
            let k = i - self.start_time_index;
            for (w, z) in dw.iter_mut().zip(&normals[i * d..(i + 1) * d]) {
                *w = sq * z;
            }
            visit(k, &x, &dw);
            if outcome.divergent {
                continue;
            }
            let t = lattice.time(i);
            for s in 0..np {
                let xs = &x[s * l..(s + 1) * l];
                let inside = self.field.eval_at_index(i, xs, &mut u, &mut v);
                if !inside {
                    outcome.exited[s] = true;
                }
                if !(all_finite(&u) && all_finite(&v)) {
                    outcome.divergent = true;
                    break;
                }
                self.spec.coeffs.sigma(t, xs, &u, &v, &mut sig);
                // NaN is a broken evaluator, ±∞ an overflowing path
                if sig.iter().any(|a| a.is_nan()) {
                    return Err(FbsdeError::EvaluatorFailure {
                        evaluator: "sigma",
                        point: format!("t = {t}, x = {xs:?}"),
                    });
                }
                let has_drift = self.spec.drift(t, xs, &u, &v, &mut drift);
                if has_drift && drift.iter().any(|a| a.is_nan()) {
                    return Err(FbsdeError::EvaluatorFailure {
                        evaluator: "drift",
                        point: format!("t = {t}, x = {xs:?}"),
                    });
                }
                let out = &mut next[s * l..(s + 1) * l];
                for a in 0..l {
                    let mut xa = xs[a];
                    if has_drift {
                        xa += drift[a] * dt;
                    }
                    for c in 0..d {
                        xa += sig[a * d + c] * dw[c];
                    }
                    out[a] = xa;
                }
            }
            if !outcome.divergent && all_finite(&next) {
                x.copy_from_slice(&next);
            } else {
                outcome.divergent = true;
            }
        }
        visit(n_steps - self.start_time_index, &x, &[]);
        Ok(outcome)
    }
}

/// Runs every path in parallel and returns per-path results in path order.
pub(crate) fn map_paths<T, F>(run: &ForwardRun<'_>, per_path: F) -> Result<Vec<(PathOutcome, T)>>
where
    T: Send,
    F: Fn(&ForwardRun<'_>, usize) -> Result<(PathOutcome, T)> + Sync,
{
    (0..run.noise.paths)
        .into_par_iter()
        .map(|p| per_path(run, p))
        .collect()
}

fn exit_fractions(outcomes: &[&PathOutcome], np: usize) -> Vec<f64> {
    let total = outcomes.len().max(1) as f64;
    (0..np)
        .map(|s| outcomes.iter().filter(|o| o.exited[s]).count() as f64 / total)
        .collect()
}

/// Euler–Maruyama from `start_points` at lattice time `start_time_index`,
/// all start points driven by the same increments.
pub fn simulate_forward(
    spec: &ProblemSpec,
    field: &DecouplingFieldPair,
    start_time_index: usize,
    start_points: &[Vec<f64>],
    noise: &NoisePlan,
) -> Result<PathBundle> {
    let run = ForwardRun::new(spec, field, start_time_index, start_points, *noise)?;
    let np = start_points.len();
    let l = spec.dims.l;
    let time_nodes = run.time_nodes();
    let per_path = map_paths(&run, |run, p| {
        let mut states = Vec::with_capacity(time_nodes * np * l);
        let outcome = run.run_path(p, |_, x, _| states.extend_from_slice(x))?;
        Ok((outcome, states))
    })?;
    let outcomes: Vec<&PathOutcome> = per_path.iter().map(|(o, _)| o).collect();
    let exited_box_fraction = exit_fractions(&outcomes, np);
    let divergent_paths = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.divergent)
        .map(|(p, _)| p)
        .collect();
    let states = per_path.into_iter().flat_map(|(_, s)| s).collect();
    Ok(PathBundle {
        start_time_index,
        start_points: start_points.to_vec(),
        l,
        paths: noise.paths,
        time_nodes,
        states,
        exited_box_fraction,
        divergent_paths,
    })
}

/// Common-noise estimate of `E|X^{x+h}(T) − X^x(T)|` from time zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyLemmaEstimate {
    pub h_norm: f64,
    pub estimate: f64,
    pub stderr: f64,
    /// `E|X^{x+h}(T) − X^x(T)|²`.
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    /// `√l · |h|`.
    pub bound: f64,
    /// For `l = 1`: fraction of paths on which the two solutions crossed.
    pub crossing_fraction: Option<f64>,
    /// Largest exit fraction of the two start points.
    pub exited_box_fraction: f64,
}

impl KeyLemmaEstimate {
    pub fn relative_stderr(&self) -> f64 {
        if self.estimate > 0.0 {
            self.stderr / self.estimate
        } else {
            0.0
        }
    }

    /// `estimate ≤ bound · (1 + k · relative SE)`, plus a `10⁻¹²` relative
    /// allowance so deterministic paths with `estimate = bound` pass.
    pub fn within_bound(&self, k: f64) -> bool {
        self.estimate <= self.bound * (1.0 + k * self.relative_stderr() + 1e-12)
    }
}

pub fn key_lemma_estimate(
    spec: &ProblemSpec,
    field: &DecouplingFieldPair,
    x: &[f64],
    h: &[f64],
    noise: &NoisePlan,
) -> Result<KeyLemmaEstimate> {
    if h.len() != x.len() {
        return Err(FbsdeError::ShapeMismatch("h and x differ in length".into()));
    }
    let shifted: Vec<f64> = x.iter().zip(h).map(|(a, b)| a + b).collect();
    let starts = vec![x.to_vec(), shifted];
    let run = ForwardRun::new(spec, field, 0, &starts, *noise)?;
    let l = spec.dims.l;
    let sign = if l == 1 { h[0].signum() } else { 0.0 };
    let per_path = map_paths(&run, |run, p| {
        let mut crossed = false;
        let mut terminal = 0.0;
        let last = run.time_nodes() - 1;
        let outcome = run.run_path(p, |k, xs, _| {
            let (a, b) = xs.split_at(l);
            if l == 1 && (b[0] - a[0]) * sign < 0.0 {
                crossed = true;
            }
            if k == last {
                terminal = crate::linalg::diff_norm(a, b);
            }
        })?;
        Ok((outcome, (terminal, crossed)))
    })?;
    let divergent = per_path.iter().filter(|(o, _)| o.divergent).count();
    if divergent > 0 {
        return Err(FbsdeError::Divergent {
            paths: divergent,
            total: noise.paths,
        });
    }
    let first: Vec<f64> = per_path.iter().map(|(_, (t, _))| *t).collect();
    let second: Vec<f64> = first.iter().map(|t| t * t).collect();
    let (estimate, stderr) = mean_and_stderr(&first);
    let (second_moment, second_moment_stderr) = mean_and_stderr(&second);
    let outcomes: Vec<&PathOutcome> = per_path.iter().map(|(o, _)| o).collect();
    let exited = exit_fractions(&outcomes, 2);
    let h_norm = crate::linalg::norm(h);
    let crossing_fraction =
        (l == 1).then(|| per_path.iter().filter(|(_, (_, c))| *c).count() as f64 / noise.paths as f64);
    Ok(KeyLemmaEstimate {
        h_norm,
        estimate,
        stderr,
        second_moment,
        second_moment_stderr,
        bound: (l as f64).sqrt() * h_norm,
        crossing_fraction,
        exited_box_fraction: exited[0].max(exited[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::make_initial_field;
    use crate::fields::{Lattice, OutOfBox};
    use crate::problem::{CoefficientSet, Dimensions, Interval};

    fn scalar_spec(sigma: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> ProblemSpec {
        let coeffs = CoefficientSet::new(
            move |_t, x, y, _z, out| out[0] = sigma(x[0], y[0], 0.0),
            |_t, _x, _y, _z, out| out[0] = 0.0,
            |x, out| out[0] = x[0],
        );
        ProblemSpec::new(
            Dimensions::new(1, 1, 1).unwrap(),
            coeffs,
            1.0,
            vec![Interval::new(-4.0, 4.0).unwrap()],
        )
        .unwrap()
    }

    fn setup(spec: &ProblemSpec, n: usize) -> DecouplingFieldPair {
        let lat = Lattice::for_spec(spec, n, 33)
            .unwrap()
            .with_out_of_box(OutOfBox::LinearExtrapolate);
        make_initial_field(spec, &lat).unwrap()
    }

    #[test]
    fn zero_diffusion_keeps_paths_constant() {
        let spec = scalar_spec(|_, _, _| 0.0);
        let field = setup(&spec, 8);
        let noise = NoisePlan::new(3, 50, 8, 1).unwrap();
        let b = simulate_forward(&spec, &field, 0, &[vec![0.7], vec![-1.2]], &noise).unwrap();
        for p in 0..b.paths() {
            for k in 0..b.time_nodes() {
                assert_eq!(b.state(p, k, 0), &[0.7]);
                assert_eq!(b.state(p, k, 1), &[-1.2]);
            }
        }
        assert_eq!(b.exited_box_fraction, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_degenerate_point_stays_put() {
        // σ = y with u = φ = identity vanishes at the origin
        let spec = scalar_spec(|_, y, _| y);
        let field = setup(&spec, 16);
        let noise = NoisePlan::new(9, 200, 16, 1).unwrap();
        let b = simulate_forward(&spec, &field, 0, &[vec![0.0]], &noise).unwrap();
        for p in 0..b.paths() {
            for k in 0..b.time_nodes() {
                assert_eq!(b.state(p, k, 0), &[0.0]);
            }
        }
    }

    #[test]
    fn exponential_martingale_keeps_its_mean() {
        let spec = scalar_spec(|x, _, _| x);
        let field = setup(&spec, 32);
        let noise = NoisePlan::new(11, 100_000, 32, 1).unwrap();
        let b = simulate_forward(&spec, &field, 0, &[vec![1.0]], &noise).unwrap();
        let xs: Vec<f64> = (0..b.paths()).map(|p| b.terminal(p, 0)[0]).collect();
        let (mean, se) = mean_and_stderr(&xs);
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn start_index_and_start_points_are_respected() {
        let spec = scalar_spec(|x, _, _| 0.5 * x);
        let field = setup(&spec, 10);
        let noise = NoisePlan::new(1, 4, 10, 1).unwrap();
        let b = simulate_forward(&spec, &field, 6, &[vec![0.3]], &noise).unwrap();
        assert_eq!(b.time_nodes(), 5);
        for p in 0..4 {
            assert_eq!(b.state(p, 0, 0), &[0.3]);
        }
    }

    #[test]
    fn rejects_mismatched_noise_and_outside_starts() {
        let spec = scalar_spec(|x, _, _| x);
        let field = setup(&spec, 10);
        let wrong = NoisePlan::new(1, 4, 11, 1).unwrap();
        assert!(simulate_forward(&spec, &field, 0, &[vec![0.0]], &wrong).is_err());
        let noise = NoisePlan::new(1, 4, 10, 1).unwrap();
        assert!(simulate_forward(&spec, &field, 0, &[vec![5.0]], &noise).is_err());
    }

    #[test]
    fn overflowing_paths_are_flagged() {
        let spec = scalar_spec(|x, _, _| 1e200 * x * x);
        let field = setup(&spec, 10);
        let noise = NoisePlan::new(5, 20, 10, 1).unwrap();
        let b = simulate_forward(&spec, &field, 0, &[vec![1.0]], &noise).unwrap();
        assert!(b.is_divergent());
        assert!(b.states.iter().all(|s| s.is_finite()));
        let err = key_lemma_estimate(&spec, &field, &[1.0], &[0.1], &noise).unwrap_err();
        assert!(matches!(err, FbsdeError::Divergent { .. }));
    }

    #[test]
    fn sigma_failure_names_the_point() {
        let spec = scalar_spec(|x, _, _| if x > 0.5 { f64::NAN } else { 0.0 });
        let field = setup(&spec, 4);
        let noise = NoisePlan::new(5, 2, 4, 1).unwrap();
        let err = simulate_forward(&spec, &field, 0, &[vec![1.0]], &noise).unwrap_err();
        assert!(matches!(
            err,
            FbsdeError::EvaluatorFailure {
                evaluator: "sigma",
                ..
            }
        ));
    }

    #[test]
    fn zero_shift_gives_zero_estimate() {
        let spec = scalar_spec(|x, _, _| (x).sin() + 1.5);
        let field = setup(&spec, 16);
        let noise = NoisePlan::new(2, 1000, 16, 1).unwrap();
        let est = key_lemma_estimate(&spec, &field, &[0.2], &[0.0], &noise).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.second_moment, 0.0);
        assert_eq!(est.crossing_fraction, Some(0.0));
    }

    #[test]
    fn linear_diffusion_moments() {
        // σ = L x: ΔX(r) = h·exp(L W − L² r / 2), so E|ΔX| = |h| and
        // E|ΔX|² = h² e^{L² r}.
        let spec = scalar_spec(|x, _, _| x);
        let field = setup(&spec, 64);
        let noise = NoisePlan::new(42, 100_000, 64, 1).unwrap();
        let h = 0.1;
        let est = key_lemma_estimate(&spec, &field, &[1.0], &[h], &noise).unwrap();
        assert!((est.estimate - h).abs() < 3.0 * est.stderr, "{est:?}");
        let exact = h * h * 1f64.exp();
        // Euler: E Π(1 + ΔW)² = (1 + Δt)^N
        let euler = h * h * (1.0 + 1.0 / 64.0f64).powi(64);
        assert!((est.second_moment - euler).abs() < 3.0 * est.second_moment_stderr);
        assert!((est.second_moment - exact).abs() / exact < 0.03);
        assert_eq!(est.crossing_fraction, Some(0.0));
        assert!(est.within_bound(3.0));
    }

    #[test]
    fn parallel_runs_are_bitwise_reproducible() {
        let spec = scalar_spec(|x, y, _| 0.3 * x + 0.2 * y.cos());
        let field = setup(&spec, 16);
        let noise = NoisePlan::new(77, 500, 16, 1).unwrap();
        let a = simulate_forward(&spec, &field, 0, &[vec![0.1], vec![0.4]], &noise).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool
            .install(|| simulate_forward(&spec, &field, 0, &[vec![0.1], vec![0.4]], &noise))
            .unwrap();
        assert_eq!(a, b);
        let mut out = Vec::new();
        a.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("path_id,time_index,start,x_1\n0,0,0,0.1\n0,0,1,0.4\n"));
    }
}
