//! One outer iteration: `(u_{n−1}, v_{n−1}) ↦ (u_n, v_n)` by backward
//! induction on the lattice, plus the dominated-property check.
//!
//! At every node `(t_i, x)` the diffusion is frozen at
//! `σ(t_i, x, u_{n−1}, v_{n−1})`, the one-step transition
//! `X⁺ = x + b Δt + σ √Δt ξ` is integrated by Gauss–Hermite quadrature and
//!
//! ```text
//! v_n = E[u_n(t_{i+1}, X⁺) ξᵀ] / √Δt                 (explicit)
//! v_n = ∇u_n(t_i, x) σ(t_i, x, u_n, v_n)               (implicit)
//! u_n = E[u_n(t_{i+1}, X⁺)] + f(t_i, x, u_n, v_n) Δt
//! ```
//!
//! with the `y` argument of `f` resolved by a predictor and one corrector.

use rayon::prelude::*;

use crate::error::{FbsdeError, Result};
use crate::fields::{check_lattice_fits, DecouplingFieldPair, Lattice};
use crate::forward::{map_paths, ForwardRun};
use crate::linalg::{all_finite, diff_norm, mean_and_stderr};
use crate::noise::NoisePlan;
use crate::problem::{audit_assumptions, ProblemSpec, SamplePlan};
use crate::quadrature::{QuadratureRule, TensorRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VMode {
    /// Martingale-increment formula `E[u⁺ ΔWᵀ] / Δt`.
    #[default]
    Explicit,
    /// Damped fixed point of `v = ∇u · σ(t, x, u, v)`.
    Implicit,
}

impl VMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            VMode::Explicit => "explicit",
            VMode::Implicit => "implicit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "explicit" => Some(VMode::Explicit),
            "implicit" => Some(VMode::Implicit),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardStepConfig {
    pub quadrature: QuadratureRule,
    pub v_mode: VMode,
    pub implicit_tol: f64,
    pub implicit_max_iter: usize,
    /// In `(0, 1]`; `1` is the undamped fixed-point map.
    pub damping: f64,
}

impl Default for BackwardStepConfig {
    fn default() -> Self {
        Self {
            quadrature: QuadratureRule::gauss_hermite(8).expect("8-point rule"),
            v_mode: VMode::Explicit,
            implicit_tol: 1e-10,
            implicit_max_iter: 200,
            damping: 1.0,
        }
    }
}

impl BackwardStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.implicit_tol > 0.0 && self.implicit_tol.is_finite()) {
            return Err(FbsdeError::param("solver.implicit_tol", "must be positive"));
        }
        if self.implicit_max_iter == 0 {
            return Err(FbsdeError::param(
                "solver.implicit_max_iter",
                "must be at least 1",
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(FbsdeError::param("solver.damping", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Diagnostics of one backward sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackwardStats {
    /// Fraction of quadrature points `X⁺` that fell outside the box.
    pub clamp_fraction: f64,
    pub outside_evaluations: usize,
    pub total_evaluations: usize,
    /// Most fixed-point iterations any implicit solve needed.
    pub implicit_max_iterations: usize,
    /// Largest observed ratio of successive implicit updates; values near
    /// one signal a nearly singular relation.
    pub implicit_worst_ratio: f64,
    /// Implicit mode only: `max |v_implicit − v_explicit|` off the terminal
    /// slice.
    pub mode_gap: Option<f64>,
    /// `Δt · L_{f,y}`.
    pub step_size_product: f64,
}

/// `L_{f,y}`: declared value, else a sampled estimate.
pub fn resolve_l_f_y(spec: &ProblemSpec) -> Result<f64> {
    if let Some(v) = spec.coeffs.declared.l_f_y {
        return Ok(v);
    }
    let plan = SamplePlan {
        points_per_axis: 5,
        h_samples: vec![0.1, 1.0],
    };
    Ok(audit_assumptions(spec, &plan)?.lipschitz.f_y)
}

struct Workspace<'a> {
    spec: &'a ProblemSpec,
    lattice: &'a Lattice,
    rule: TensorRule,
    cfg: &'a BackwardStepConfig,
    l: usize,
    m: usize,
    d: usize,
}

struct NodeExpectation {
    eu: Vec<f64>,
    v: Vec<f64>,
    outside: usize,
}

#[derive(Clone, Copy, Default)]
struct ImplicitTrace {
    iterations: usize,
    ratio: f64,
}

impl Workspace<'_> {
    fn sigma(&self, t: f64, x: &[f64], u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut sig = vec![0.0; self.l * self.d];
        self.spec.coeffs.sigma(t, x, u, v, &mut sig);
        if !all_finite(&sig) {
            return Err(FbsdeError::EvaluatorFailure {
                evaluator: "sigma",
                point: format!("t = {t}, x = {x:?}, y = {u:?}, z = {v:?}"),
            });
        }
        Ok(sig)
    }

    fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m];
        self.spec.coeffs.driver(t, x, y, z, &mut out);
        if !all_finite(&out) {
            return Err(FbsdeError::EvaluatorFailure {
                evaluator: "driver",
                point: format!("t = {t}, x = {x:?}, y = {y:?}, z = {z:?}"),
            });
        }
        Ok(out)
    }

    /// Quadrature over `X⁺` from node `j` at time index `i < N`.
    fn expectation(
        &self,
        prev: &DecouplingFieldPair,
        next_u: &[f64],
        i: usize,
        j: usize,
    ) -> Result<NodeExpectation> {
        let (l, m, d) = (self.l, self.m, self.d);
        let t = self.lattice.time(i);
        let dt = self.lattice.dt();
        let sq = dt.sqrt();
        let x = self.lattice.node_point(j);
        let sig = self.sigma(t, &x, prev.u_node(i, j), prev.v_node(i, j))?;
        let mut base = x.clone();
        let mut drift = vec![0.0; l];
        if self
            .spec
            .drift(t, &x, prev.u_node(i, j), prev.v_node(i, j), &mut drift)
        {
            if !all_finite(&drift) {
                return Err(FbsdeError::EvaluatorFailure {
                    evaluator: "drift",
                    point: format!("t = {t}, x = {x:?}"),
                });
            }
            for a in 0..l {
                base[a] += drift[a] * dt;
            }
        }
        let mut eu = vec![0.0; m];
        let mut v = vec![0.0; m * d];
        let mut xp = vec![0.0; l];
        let mut up = vec![0.0; m];
        let mut outside = 0;
        for k in 0..self.rule.len() {
            let xi = self.rule.point(k);
            let w = self.rule.weights[k];
            for a in 0..l {
                let mut s = 0.0;
                for c in 0..d {
                    s += sig[a * d + c] * xi[c];
                }
                xp[a] = base[a] + sq * s;
            }
            if !self.lattice.interpolate(next_u, m, &xp, &mut up) {
                outside += 1;
            }
            for r in 0..m {
                eu[r] += w * up[r];
                for c in 0..d {
                    v[r * d + c] += w * up[r] * xi[c];
                }
            }
        }
        v.iter_mut().for_each(|a| *a /= sq);
        Ok(NodeExpectation { eu, v, outside })
    }

    /// `E u⁺ + f(t, x, y, v) Δt` with predictor `y_p = E u⁺ + f(E u⁺) Δt`
    /// and one corrector.
    fn corrected_u(&self, t: f64, x: &[f64], eu: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let dt = self.lattice.dt();
        let f0 = self.driver(t, x, eu, v)?;
        let yp: Vec<f64> = eu.iter().zip(&f0).map(|(e, f)| e + f * dt).collect();
        let f1 = self.driver(t, x, &yp, v)?;
        Ok(eu.iter().zip(&f1).map(|(e, f)| e + f * dt).collect())
    }

    /// `∇u` at node `j` as an `m × l` matrix: central differences inside,
    /// one-sided at the edges.
    fn gradient(&self, slice: &[f64], j: usize) -> Vec<f64> {
        let (l, m) = (self.l, self.m);
        let idx = self.lattice.multi_index(j);
        let strides = self.lattice.strides();
        let mut grad = vec![0.0; m * l];
        for (a, axis) in self.lattice.axes().iter().enumerate() {
            let h = axis.spacing();
            let (lo, hi, span) = if idx[a] == 0 {
                (j, j + strides[a], h)
            } else if idx[a] == axis.nodes - 1 {
                (j - strides[a], j, h)
            } else {
                (j - strides[a], j + strides[a], 2.0 * h)
            };
            for r in 0..m {
                grad[r * l + a] = (slice[hi * m + r] - slice[lo * m + r]) / span;
            }
        }
        grad
    }

    /// Damped fixed point of `v = grad · σ(t, x, u, v)`.
    fn implicit_v(
        &self,
        i: usize,
        x: &[f64],
        u: &[f64],
        grad: &[f64],
        init: &[f64],
    ) -> Result<(Vec<f64>, ImplicitTrace)> {
        let (l, m, d) = (self.l, self.m, self.d);
        let t = self.lattice.time(i);
        let theta = self.cfg.damping;
        let mut v = init.to_vec();
        let mut last = f64::NAN;
        let mut ratio = 0.0f64;
        let mut trace = ImplicitTrace::default();
        for k in 1..=self.cfg.implicit_max_iter {
            let sig = self.sigma(t, x, u, &v)?;
            let mut next = vec![0.0; m * d];
            for r in 0..m {
                for c in 0..d {
                    let mut s = 0.0;
                    for a in 0..l {
                        s += grad[r * l + a] * sig[a * d + c];
                    }
                    next[r * d + c] = (1.0 - theta) * v[r * d + c] + theta * s;
                }
            }
            let update = diff_norm(&next, &v);
            v = next;
            if last > 0.0 {
                ratio = update / last;
                trace.ratio = trace.ratio.max(ratio);
            }
            trace.iterations = k;
            if update <= self.cfg.implicit_tol {
                return Ok((v, trace));
            }
            if !update.is_finite() {
                break;
            }
            last = update;
        }
        Err(FbsdeError::ImplicitNotContracting {
            time_index: i,
            node: x.to_vec(),
            iterations: trace.iterations,
            last_update: last,
            ratio,
        })
    }

    fn check_finite(&self, i: usize, j: usize, vals: &[f64]) -> Result<()> {
        if all_finite(vals) {
            Ok(())
        } else {
            Err(FbsdeError::NonFinite {
                time_index: i,
                node: self.lattice.node_point(j),
            })
        }
    }
}

/// One outer iteration of the decoupling-field scheme.
pub fn backward_iterate(
    spec: &ProblemSpec,
    prev: &DecouplingFieldPair,
    cfg: &BackwardStepConfig,
) -> Result<(DecouplingFieldPair, BackwardStats)> {
    cfg.validate()?;
    let lattice = prev.lattice();
    check_lattice_fits(spec, lattice)?;
    let dims = spec.dims;
    if prev.m() != dims.m || prev.d() != dims.d {
        return Err(FbsdeError::ShapeMismatch(
            "previous field dimensions do not match the problem".into(),
        ));
    }
    if dims.l > 2 {
        return Err(FbsdeError::param(
            "dims.l",
            "the lattice backward solver supports l = 1 or l = 2",
        ));
    }
    let l_f_y = resolve_l_f_y(spec)?;
    let product = lattice.dt() * l_f_y;
    if product >= 1.0 {
        return Err(FbsdeError::StepSize { product });
    }

    let ws = Workspace {
        spec,
        lattice,
        rule: cfg.quadrature.tensor(dims.d),
        cfg,
        l: dims.l,
        m: dims.m,
        d: dims.d,
    };
    let (m, md) = (dims.m, dims.m * dims.d);
    let n = lattice.time_steps();
    let space = lattice.space_len();
    let mut u = vec![0.0; (n + 1) * space * m];
    let mut v = vec![0.0; (n + 1) * space * md];
    let mut stats = BackwardStats {
        step_size_product: product,
        ..Default::default()
    };
    let mut traces: Vec<ImplicitTrace> = Vec::new();
    let mut gap = 0.0f64;

    // terminal slice: u = φ, v from the implicit relation with ∇φ
    {
        let t_u = &mut u[n * space * m..];
        let mut phi = vec![0.0; m];
        for j in 0..space {
            let x = lattice.node_point(j);
            spec.coeffs.terminal(&x, &mut phi);
            if !all_finite(&phi) {
                return Err(FbsdeError::EvaluatorFailure {
                    evaluator: "terminal",
                    point: format!("x = {x:?}"),
                });
            }
            t_u[j * m..(j + 1) * m].copy_from_slice(&phi);
        }
        let slice = &u[n * space * m..];
        let solved: Vec<(Vec<f64>, ImplicitTrace)> = (0..space)
            .into_par_iter()
            .map(|j| {
                let x = lattice.node_point(j);
                let grad = ws.gradient(slice, j);
                ws.implicit_v(n, &x, &slice[j * m..(j + 1) * m], &grad, prev.v_node(n, j))
            })
            .collect::<Result<_>>()?;
        for (j, (vj, tr)) in solved.into_iter().enumerate() {
            ws.check_finite(n, j, &vj)?;
            v[(n * space + j) * md..(n * space + j + 1) * md].copy_from_slice(&vj);
            traces.push(tr);
        }
    }

    for i in (0..n).rev() {
        let t = lattice.time(i);
        let (head, tail) = u.split_at_mut((i + 1) * space * m);
        let next_u = &tail[..space * m];
        let nodes: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..space)
            .into_par_iter()
            .map(|j| {
                let e = ws.expectation(prev, next_u, i, j)?;
                let x = lattice.node_point(j);
                let uj = ws.corrected_u(t, &x, &e.eu, &e.v)?;
                ws.check_finite(i, j, &uj)?;
                ws.check_finite(i, j, &e.v)?;
                Ok((uj, e.v, e.outside))
            })
            .collect::<Result<_>>()?;
        let cur_u = &mut head[i * space * m..];
        for (j, (uj, vj, outside)) in nodes.iter().enumerate() {
            cur_u[j * m..(j + 1) * m].copy_from_slice(uj);
            v[(i * space + j) * md..(i * space + j + 1) * md].copy_from_slice(vj);
            stats.outside_evaluations += outside;
        }
        stats.total_evaluations += space * ws.rule.len();

        if cfg.v_mode == VMode::Implicit {
            // v from the gradient of the provisional slice, then u again
            // with that v inside the driver
            let provisional = &head[i * space * m..];
            let solved: Vec<(Vec<f64>, Vec<f64>, ImplicitTrace)> = (0..space)
                .into_par_iter()
                .map(|j| {
                    let x = lattice.node_point(j);
                    let uj = &provisional[j * m..(j + 1) * m];
                    let grad = ws.gradient(provisional, j);
                    let (vj, tr) = ws.implicit_v(i, &x, uj, &grad, &nodes[j].1)?;
                    let e = ws.expectation(prev, next_u, i, j)?;
                    let uj = ws.corrected_u(t, &x, &e.eu, &vj)?;
                    ws.check_finite(i, j, &uj)?;
                    ws.check_finite(i, j, &vj)?;
                    Ok((uj, vj, tr))
                })
                .collect::<Result<_>>()?;
            let cur_u = &mut head[i * space * m..];
            for (j, (uj, vj, tr)) in solved.into_iter().enumerate() {
                gap = gap.max(diff_norm(&vj, &nodes[j].1));
                cur_u[j * m..(j + 1) * m].copy_from_slice(&uj);
                v[(i * space + j) * md..(i * space + j + 1) * md].copy_from_slice(&vj);
                traces.push(tr);
            }
        }
    }

    stats.clamp_fraction = if stats.total_evaluations > 0 {
        stats.outside_evaluations as f64 / stats.total_evaluations as f64
    } else {
        0.0
    };
    stats.implicit_max_iterations = traces.iter().map(|t| t.iterations).max().unwrap_or(0);
    stats.implicit_worst_ratio = traces.iter().map(|t| t.ratio).fold(0.0, f64::max);
    if cfg.v_mode == VMode::Implicit {
        stats.mode_gap = Some(gap);
    }
    let field = DecouplingFieldPair::new(lattice.clone(), m, dims.d, u, v)?;
    Ok((field, stats))
}

/// Time weight in the dominated-property estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `e^{−Ls}` with `L = (1 + L_{f,y}² + ε⁻¹) + (1 − ε)`.
    #[default]
    Decaying,
    /// `e^{+Ls}` with `L = (2 + L_{f,y}² + ε⁻¹ L_{f,z}²) + (1 − ε)`, the
    /// weight and constant an Itô expansion of `|Ȳ|² e^{Ls}` supports.
    Growing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DominatedConfig {
    pub epsilon: f64,
    pub weighting: Weighting,
    /// Standard errors of slack granted to the Monte Carlo comparison.
    pub sigma_margin: f64,
    /// Audited constants, used when the coefficient set declares none.
    pub audited_l_f_y: Option<f64>,
    pub audited_l_f_z: Option<f64>,
}

impl Default for DominatedConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            weighting: Weighting::Decaying,
            sigma_margin: 3.0,
            audited_l_f_y: None,
            audited_l_f_z: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DominatedCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the paired difference `rhs − lhs`.
    pub stderr: f64,
    /// The weight exponent `L`.
    pub rate: f64,
    pub satisfied: bool,
}

/// Monte Carlo evaluation of both sides of
///
/// ```text
/// E|Ȳ(0)|² w(0) + (1 − ε) ∫ E[(|Ȳ|² + |Z̄|²) w] ds
///     ≤ E|δ_X φ(T)|² w(T) + ∫ E[|δ_X f|² w] ds
/// ```
///
/// along `X_1 = X^{0,x1}`, `X_2 = X^{0,x2}` (common noise) with
/// `Y_k = u(·, X_k)`, `Z_k = v(·, X_k)` and
/// `δ_X f = f(X_1, Y_1, Z_1) − f(X_2, Y_1, Z_1)`. Time integrals are
/// left-point sums on the lattice.
pub fn dominated_property_check(
    spec: &ProblemSpec,
    field: &DecouplingFieldPair,
    x1: &[f64],
    x2: &[f64],
    cfg: &DominatedConfig,
    noise: &NoisePlan,
) -> Result<DominatedCheck> {
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(FbsdeError::param("epsilon", "must lie in (0, 1)"));
    }
    let declared = &spec.coeffs.declared;
    let l_f_y = declared
        .l_f_y
        .or(cfg.audited_l_f_y)
        .ok_or(FbsdeError::MissingConstant("L_f_y"))?;
    let rate = match cfg.weighting {
        Weighting::Decaying => -((1.0 + l_f_y * l_f_y + 1.0 / eps) + (1.0 - eps)),
        Weighting::Growing => {
            let l_f_z = declared
                .l_f_z
                .or(cfg.audited_l_f_z)
                .ok_or(FbsdeError::MissingConstant("L_f_z"))?;
            (2.0 + l_f_y * l_f_y + l_f_z * l_f_z / eps) + (1.0 - eps)
        }
    };

    let starts = vec![x1.to_vec(), x2.to_vec()];
    let run = ForwardRun::new(spec, field, 0, &starts, *noise)?;
    let lattice = field.lattice();
    let (l, m, d) = (spec.dims.l, spec.dims.m, spec.dims.d);
    let n = lattice.time_steps();
    let dt = lattice.dt();
    let per_path = map_paths(&run, |run, p| {
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        let mut failure = None;
        let mut y = [vec![0.0; m], vec![0.0; m]];
        let mut z = [vec![0.0; m * d], vec![0.0; m * d]];
        let mut f1 = vec![0.0; m];
        let mut f2 = vec![0.0; m];
        let outcome = run.run_path(p, |k, xs, _| {
            let (a, b) = xs.split_at(l);
            let t = lattice.time(k);
            let w = (rate * t).exp();
            if k == n {
                let mut p1 = vec![0.0; m];
                let mut p2 = vec![0.0; m];
                spec.coeffs.terminal(a, &mut p1);
                spec.coeffs.terminal(b, &mut p2);
                rhs += diff_norm(&p1, &p2).powi(2) * w;
                return;
            }
            let [y1, y2] = &mut y;
            let [z1, z2] = &mut z;
            field.eval_at_index(k, a, y1, z1);
            field.eval_at_index(k, b, y2, z2);
            let ybar = diff_norm(y1, y2).powi(2);
            let zbar = diff_norm(z1, z2).powi(2);
            if k == 0 {
                lhs += ybar;
            }
            lhs += (1.0 - eps) * (ybar + zbar) * w * dt;
            spec.coeffs.driver(t, a, y1, z1, &mut f1);
            spec.coeffs.driver(t, b, y1, z1, &mut f2);
            if !(all_finite(&f1) && all_finite(&f2)) {
                failure.get_or_insert_with(|| format!("t = {t}, x = {a:?}"));
            }
            rhs += diff_norm(&f1, &f2).powi(2) * w * dt;
        })?;
        if let Some(point) = failure {
            return Err(FbsdeError::EvaluatorFailure {
                evaluator: "driver",
                point,
            });
        }
        Ok((outcome, (lhs, rhs)))
    })?;
    let divergent = per_path.iter().filter(|(o, _)| o.divergent).count();
    if divergent > 0 {
        return Err(FbsdeError::Divergent {
            paths: divergent,
            total: noise.paths,
        });
    }
    let lhs_s: Vec<f64> = per_path.iter().map(|(_, (a, _))| *a).collect();
    let rhs_s: Vec<f64> = per_path.iter().map(|(_, (_, b))| *b).collect();
    let diff: Vec<f64> = lhs_s.iter().zip(&rhs_s).map(|(a, b)| b - a).collect();
    let (lhs, _) = mean_and_stderr(&lhs_s);
    let (rhs, _) = mean_and_stderr(&rhs_s);
    let (_, stderr) = mean_and_stderr(&diff);
    Ok(DominatedCheck {
        lhs,
        rhs,
        stderr,
        rate: rate.abs(),
        satisfied: lhs <= rhs + cfg.sigma_margin * stderr,
    })
}
