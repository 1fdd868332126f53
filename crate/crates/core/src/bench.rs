//! Built-in problems with closed-form references, and seeded random smooth
//! problems for statistical checks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::{FbsdeSolution, IterationReport, Verdict};
use crate::error::{FbsdeError, Result};
use crate::fields::csv_io::fmt_f64;
use crate::fields::{check_lattice_fits, DecouplingFieldPair, Lattice, OutOfBox};
use crate::linalg::mean_and_stderr;
use crate::problem::{CoefficientSet, DeclaredConstants, Dimensions, Interval, ProblemSpec};

pub const BENCHMARK_NAMES: [&str; 4] = [
    "degenerate-y-diffusion",
    "fromm-drift",
    "linear-z-diffusion",
    "exponential-martingale-decoupled",
];

/// Tunable constants of the catalogue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchParams {
    /// `σ = a z + c`, `φ = b x` in the linear example.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `σ = L x` in the exponential-martingale example.
    pub exp_l: f64,
    pub fromm_horizon: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 1.0,
            c: 1.0,
            exp_l: 1.0,
            fromm_horizon: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BenchKind {
    /// `σ = y`, `f = 0`, `φ = x`.
    DegenerateYDiffusion,
    /// Drift `b = y`, `σ = 0`, `f = 0`, `φ = x`.
    FrommDrift,
    /// `σ = a z + c`, `f = 0`, `φ = b x`.
    LinearZDiffusion { a: f64, b: f64, c: f64 },
    /// `σ = L x`, `f = 0`, `φ = x`.
    ExponentialMartingale { l: f64 },
}

#[derive(Clone, Debug)]
pub struct BenchmarkCase {
    pub name: &'static str,
    pub kind: BenchKind,
    pub spec: ProblemSpec,
    /// Default lattice for runs of this case.
    pub lattice: Lattice,
    pub expected_verdict: Verdict,
    /// Default start point for path assembly.
    pub x_init: Vec<f64>,
}

pub fn get_benchmark(name: &str) -> Result<BenchmarkCase> {
    get_benchmark_with(name, &BenchParams::default())
}

fn unit_box(half: f64) -> Vec<Interval> {
    vec![Interval {
        min: -half,
        max: half,
    }]
}

pub fn get_benchmark_with(name: &str, p: &BenchParams) -> Result<BenchmarkCase> {
    let dims = Dimensions::new(1, 1, 1)?;
    let identity = |x: &[f64], out: &mut [f64]| out[0] = x[0];
    let zero = |_t: f64, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]| out[0] = 0.0;
    let (name, kind, spec, time_steps, nodes, expected) = match name {
        "degenerate-y-diffusion" => {
            let coeffs = CoefficientSet::new(|_t, _x, y, _z, out| out[0] = y[0], zero, identity)
                .with_declared(DeclaredConstants {
                    l_sigma_x: Some(0.0),
                    l_sigma_y: Some(1.0),
                    l_sigma_z: Some(0.0),
                    l_f_y: Some(0.0),
                    l_f_z: Some(0.0),
                    l_phi_x: Some(1.0),
                    lambda: None,
                })
                .with_degenerate_candidates(vec![vec![0.0]]);
            let spec = ProblemSpec::new(dims, coeffs, 1.0, unit_box(2.0))?;
            (
                BENCHMARK_NAMES[0],
                BenchKind::DegenerateYDiffusion,
                spec,
                64,
                64,
                Verdict::Converged,
            )
        }
        "fromm-drift" => {
            let coeffs = CoefficientSet::new(zero, zero, identity)
                .with_declared(DeclaredConstants {
                    l_sigma_x: Some(0.0),
                    l_sigma_y: Some(0.0),
                    l_sigma_z: Some(0.0),
                    l_f_y: Some(0.0),
                    l_f_z: Some(0.0),
                    l_phi_x: Some(1.0),
                    lambda: None,
                })
                .with_degenerate_candidates(vec![vec![0.0]]);
            let spec = ProblemSpec::new(dims, coeffs, p.fromm_horizon, unit_box(2.0))?
                .with_drift(|_t, _x, y, _z, out| out[0] = y[0]);
            (
                BENCHMARK_NAMES[1],
                BenchKind::FrommDrift,
                spec,
                64,
                33,
                Verdict::BlowUp,
            )
        }
        "linear-z-diffusion" => {
            let (a, b, c) = (p.a, p.b, p.c);
            if (a * b - 1.0).abs() < 1e-12 {
                return Err(FbsdeError::param("a, b", "a·b = 1 has no decoupling field"));
            }
            let coeffs = CoefficientSet::new(
                move |_t, _x, _y, z, out| out[0] = a * z[0] + c,
                zero,
                move |x, out| out[0] = b * x[0],
            )
            .with_declared(DeclaredConstants {
                l_sigma_x: Some(0.0),
                l_sigma_y: Some(0.0),
                l_sigma_z: Some(a.abs()),
                l_f_y: Some(0.0),
                l_f_z: Some(0.0),
                l_phi_x: Some(b.abs()),
                lambda: None,
            });
            let spec = ProblemSpec::new(dims, coeffs, 1.0, unit_box(2.0))?;
            (
                BENCHMARK_NAMES[2],
                BenchKind::LinearZDiffusion { a, b, c },
                spec,
                32,
                33,
                Verdict::Converged,
            )
        }
        "exponential-martingale-decoupled" => {
            let l = p.exp_l;
            let coeffs = CoefficientSet::new(move |_t, x, _y, _z, out| out[0] = l * x[0], zero, identity)
                .with_declared(DeclaredConstants {
                    l_sigma_x: Some(l.abs()),
                    l_sigma_y: Some(0.0),
                    l_sigma_z: Some(0.0),
                    l_f_y: Some(0.0),
                    l_f_z: Some(0.0),
                    l_phi_x: Some(1.0),
                    lambda: None,
                })
                .with_degenerate_candidates(vec![vec![0.0]]);
            let spec = ProblemSpec::new(dims, coeffs, 1.0, unit_box(3.0))?;
            (
                BENCHMARK_NAMES[3],
                BenchKind::ExponentialMartingale { l },
                spec,
                64,
                61,
                Verdict::Converged,
            )
        }
        other => {
            return Err(FbsdeError::UnknownBenchmark {
                name: other.to_string(),
                valid: BENCHMARK_NAMES.join(", "),
            })
        }
    };
    let lattice = Lattice::for_spec(&spec, time_steps, nodes)?.with_out_of_box(OutOfBox::LinearExtrapolate);
    Ok(BenchmarkCase {
        name,
        kind,
        spec,
        lattice,
        expected_verdict: expected,
        x_init: vec![1.0],
    })
}

impl BenchmarkCase {
    /// Closed-form `(u, v)(t, x)`. For the blow-up example only the local
    /// solution on `T − t < 1` exists.
    pub fn reference_field(&self, t: f64, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let x = x[0];
        match self.kind {
            BenchKind::DegenerateYDiffusion => Some((vec![x], vec![x])),
            BenchKind::FrommDrift => {
                let rest = self.spec.horizon - t;
                (rest < 1.0).then(|| (vec![x / (1.0 - rest)], vec![0.0]))
            }
            BenchKind::LinearZDiffusion { a, b, c } => Some((vec![b * x], vec![b * c / (1.0 - a * b)])),
            BenchKind::ExponentialMartingale { l } => Some((vec![x], vec![l * x])),
        }
    }

    /// `(X, Y, Z)(r)` from `x` at time zero given `W(r)`.
    pub fn reference_path(&self, r: f64, x: f64, w: f64) -> Option<(f64, f64, f64)> {
        match self.kind {
            BenchKind::DegenerateYDiffusion => {
                let xr = x * (w - 0.5 * r).exp();
                Some((xr, xr, xr))
            }
            BenchKind::ExponentialMartingale { l } => {
                let xr = x * (l * w - 0.5 * l * l * r).exp();
                Some((xr, xr, l * xr))
            }
            BenchKind::LinearZDiffusion { a, b, c } => {
                let z = b * c / (1.0 - a * b);
                let xr = x + (a * z + c) * w;
                Some((xr, b * xr, z))
            }
            BenchKind::FrommDrift => {
                let t_end = self.spec.horizon;
                (t_end < 1.0).then(|| {
                    let k = 1.0 / (1.0 - t_end);
                    (x + x * r * k, x * k, 0.0)
                })
            }
        }
    }

    /// `(E X(t), E X(t)²)` from `x` at time zero.
    pub fn reference_moments(&self, t: f64, x: f64) -> Option<(f64, f64)> {
        match self.kind {
            BenchKind::DegenerateYDiffusion => Some((x, x * x * t.exp())),
            BenchKind::ExponentialMartingale { l } => Some((x, x * x * (l * l * t).exp())),
            BenchKind::LinearZDiffusion { a, b, c } => {
                let s = a * b * c / (1.0 - a * b) + c;
                Some((x, x * x + s * s * t))
            }
            BenchKind::FrommDrift => None,
        }
    }

    /// Reference field sampled on `lattice`.
    pub fn reference_field_pair(&self, lattice: &Lattice) -> Result<DecouplingFieldPair> {
        if self.expected_verdict == Verdict::BlowUp {
            return Err(FbsdeError::ExpectedBlowUp(self.name.to_string()));
        }
        DecouplingFieldPair::from_fn(lattice.clone(), 1, 1, |t, x, u, v| {
            let (ur, vr) = self.reference_field(t, x).expect("global reference");
            u.copy_from_slice(&ur);
            v.copy_from_slice(&vr);
        })
    }

    /// Writes the reference in the field CSV format.
    pub fn write_reference_csv<W: Write>(&self, lattice: &Lattice, w: W) -> Result<()> {
        self.reference_field_pair(lattice)?.write_csv(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentError {
    pub name: String,
    pub computed: f64,
    pub stderr: f64,
    pub reference: f64,
}

impl MomentError {
    pub fn error(&self) -> f64 {
        (self.computed - self.reference).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Comparison {
    Reference {
        /// `max |u − u_ref|` over lattice nodes.
        sup_u_error: f64,
        /// `max |u − u_ref| / (1 + |x|)`.
        sup_u_error_weighted: f64,
        sup_v_error: f64,
        path_moment_errors: Vec<MomentError>,
    },
    /// For blow-up cases: computed slope of `u(t, ·)` against the local
    /// solution's `1 / (1 − (T − t))`, which exists only for `T − t < 1`.
    BlowUpProfile { rows: Vec<(f64, f64, Option<f64>)> },
}

pub fn compare_to_reference(case: &BenchmarkCase, solution: &FbsdeSolution) -> Result<Comparison> {
    let field = &solution.field;
    check_lattice_fits(&case.spec, field.lattice())?;
    if field.m() != 1 || field.d() != 1 || field.lattice().dim() != 1 {
        return Err(FbsdeError::ShapeMismatch("benchmarks are scalar".into()));
    }
    let lat = field.lattice();
    if case.expected_verdict == Verdict::BlowUp {
        return Ok(blowup_profile(case, field));
    }
    let mut sup = 0.0f64;
    let mut weighted = 0.0f64;
    let mut sup_v = 0.0f64;
    for i in 0..=lat.time_steps() {
        let t = lat.time(i);
        for j in 0..lat.space_len() {
            let x = lat.node_point(j);
            let (ur, vr) = case.reference_field(t, &x).expect("global reference");
            let e = (field.u_node(i, j)[0] - ur[0]).abs();
            sup = sup.max(e);
            weighted = weighted.max(e / (1.0 + x[0].abs()));
            if i < lat.time_steps() {
                sup_v = sup_v.max((field.v_node(i, j)[0] - vr[0]).abs());
            }
        }
    }
    let mut moments = Vec::new();
    let last = solution.time_nodes() - 1;
    let t_end = lat.time(last);
    let x0 = solution.x_init[0];
    if let Some((mean, second)) = case.reference_moments(t_end, x0) {
        let ys: Vec<f64> = (0..solution.paths()).map(|p| solution.y(p, last)[0]).collect();
        let xs: Vec<f64> = (0..solution.paths()).map(|p| solution.x(p, last)[0]).collect();
        let x2: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let (ym, yse) = mean_and_stderr(&ys);
        let (xm, xse) = mean_and_stderr(&xs);
        let (x2m, x2se) = mean_and_stderr(&x2);
        let phi_mean = match case.kind {
            BenchKind::LinearZDiffusion { b, .. } => b * mean,
            _ => mean,
        };
        moments.push(MomentError {
            name: "E Y(T)".into(),
            computed: ym,
            stderr: yse,
            reference: phi_mean,
        });
        moments.push(MomentError {
            name: "E X(T)".into(),
            computed: xm,
            stderr: xse,
            reference: mean,
        });
        moments.push(MomentError {
            name: "E X(T)^2".into(),
            computed: x2m,
            stderr: x2se,
            reference: second,
        });
    }
    Ok(Comparison::Reference {
        sup_u_error: sup,
        sup_u_error_weighted: weighted,
        sup_v_error: sup_v,
        path_moment_errors: moments,
    })
}

/// Slope `u(t, x_max) / x_max` at every time node next to the local
/// solution's slope.
pub fn blowup_profile(case: &BenchmarkCase, field: &DecouplingFieldPair) -> Comparison {
    let lat = field.lattice();
    let j = lat.space_len() - 1;
    let x = lat.node_point(j)[0];
    let rows = (0..=lat.time_steps())
        .map(|i| {
            let t = lat.time(i);
            let reference = case.reference_field(t, &[x]).map(|(u, _)| u[0] / x);
            (t, field.u_node(i, j)[0] / x, reference)
        })
        .collect();
    Comparison::BlowUpProfile { rows }
}

/// `sup_x |u_n(0, x)|` growth of a blow-up run next to the local solution
/// at the latest time it exists.
pub fn write_blowup_profile_csv<W: Write>(rows: &[(f64, f64, Option<f64>)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "slope", "reference_slope"])?;
    for (t, s, r) in rows {
        out.write_record([fmt_f64(*t), fmt_f64(*s), r.map_or(String::new(), fmt_f64)])?;
    }
    out.flush()?;
    Ok(())
}

/// Whether a finished run matches the case's expected verdict.
pub fn verdict_matches(case: &BenchmarkCase, report: &IterationReport) -> bool {
    report.verdict == case.expected_verdict
}

/// A seeded smooth problem with `l = d ∈ {1, 2}`, `m = 1`, `T = 1`, box
/// `[−3, 3]^l`:
///
/// ```text
/// σ_jk = a_j δ_jk + b_jk sin(ω_jk · x + p_jk) + c_jk tanh(y) + e_jk tanh(z_k)
/// f    = f1 sin(x_1 + t) + f2 y + f3 tanh(z_1)
/// φ    = p1 sin(x_1) + p2 cos(w · x)
/// ```
///
/// With `coupled = false` the `y`, `z` terms of `σ` vanish.
pub fn random_smooth_problem(seed: u64, coupled: bool) -> Result<ProblemSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l: usize = if rng.random_bool(0.5) { 1 } else { 2 };
    random_smooth_problem_dim(&mut rng, l, coupled)
}

/// As [`random_smooth_problem`] with a fixed dimension.
pub fn random_smooth_problem_with_dim(seed: u64, l: usize, coupled: bool) -> Result<ProblemSpec> {
    if !(1..=2).contains(&l) {
        return Err(FbsdeError::param("l", "random problems have l ∈ {1, 2}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_smooth_problem_dim(&mut rng, l, coupled)
}

#[allow(clippy::needless_range_loop)]
fn random_smooth_problem_dim(rng: &mut ChaCha8Rng, l: usize, coupled: bool) -> Result<ProblemSpec> {
    let d = l;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let diag: Vec<f64> = (0..l).map(|_| u(0.3, 0.8)).collect();
    let b: Vec<f64> = (0..l * d).map(|_| u(-0.3, 0.3)).collect();
    let omega: Vec<f64> = (0..l * d * l).map(|_| u(-1.0, 1.0)).collect();
    let phase: Vec<f64> = (0..l * d).map(|_| u(0.0, std::f64::consts::TAU)).collect();
    let (cy, ez): (Vec<f64>, Vec<f64>) = if coupled {
        (
            (0..l * d).map(|_| u(-0.2, 0.2)).collect(),
            (0..l * d).map(|_| u(-0.1, 0.1)).collect(),
        )
    } else {
        (vec![0.0; l * d], vec![0.0; l * d])
    };
    let (f1, f2, f3) = (u(-1.0, 1.0), u(-0.5, 0.5), u(-0.5, 0.5));
    let (p1, p2) = (u(-1.0, 1.0), u(-1.0, 1.0));
    let w: Vec<f64> = (0..l).map(|_| u(-1.0, 1.0)).collect();

    // Frobenius-norm Lipschitz constants of the closed forms above
    let l_sigma_x = (0..l * d)
        .map(|jk| {
            let om: f64 = omega[jk * l..(jk + 1) * l].iter().map(|o| o * o).sum();
            b[jk] * b[jk] * om
        })
        .sum::<f64>()
        .sqrt();
    let l_sigma_y = cy.iter().map(|c| c * c).sum::<f64>().sqrt();
    let l_sigma_z = ez.iter().map(|e| e * e).sum::<f64>().sqrt();
    let l_phi_x = p1.abs() + p2.abs() * w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let declared = DeclaredConstants {
        l_sigma_x: Some(l_sigma_x),
        l_sigma_y: Some(l_sigma_y),
        l_sigma_z: Some(l_sigma_z),
        l_f_y: Some(f2.abs()),
        l_f_z: Some(f3.abs()),
        l_phi_x: Some(l_phi_x),
        lambda: None,
    };

    let coeffs = CoefficientSet::new(
        move |_t, x, y, z, out| {
            for j in 0..l {
                for k in 0..d {
                    let jk = j * d + k;
                    let arg: f64 = omega[jk * l..(jk + 1) * l]
                        .iter()
                        .zip(x)
                        .map(|(o, xi)| o * xi)
                        .sum();
                    let mut s = b[jk] * (arg + phase[jk]).sin() + cy[jk] * y[0].tanh() + ez[jk] * z[k].tanh();
                    if j == k {
                        s += diag[j];
                    }
                    out[jk] = s;
                }
            }
        },
        move |t, x, y, z, out| out[0] = f1 * (x[0] + t).sin() + f2 * y[0] + f3 * z[0].tanh(),
        move |x, out| {
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            out[0] = p1 * x[0].sin() + p2 * dot.cos();
        },
    )
    .with_declared(declared);
    ProblemSpec::new(
        Dimensions::new(l, 1, d)?,
        coeffs,
        1.0,
        vec![Interval { min: -3.0, max: 3.0 }; l],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{backward_iterate, BackwardStepConfig};
    use crate::problem::{audit_assumptions, check_degenerate_point, SamplePlan};

    #[test]
    fn catalogue_lookup() {
        for name in BENCHMARK_NAMES {
            let case = get_benchmark(name).unwrap();
            assert_eq!(case.name, name);
        }
        match get_benchmark("nope").unwrap_err() {
            FbsdeError::UnknownBenchmark { valid, .. } => assert!(valid.contains("fromm-drift")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn references_at_documented_points() {
        let deg = get_benchmark("degenerate-y-diffusion").unwrap();
        assert_eq!(deg.reference_field(0.3, &[1.7]).unwrap().0, vec![1.7]);
        let lin = get_benchmark("linear-z-diffusion").unwrap();
        assert_eq!(lin.reference_field(0.5, &[0.2]).unwrap().1, vec![2.0]);
        let fromm = get_benchmark("fromm-drift").unwrap();
        for t in [0.6, 1.0, 1.4] {
            assert_eq!(fromm.reference_field(t, &[0.0]).unwrap().0, vec![0.0]);
        }
        assert!(fromm.reference_field(0.2, &[1.0]).is_none());
        assert!(fromm.reference_field_pair(&fromm.lattice).is_err());
    }

    #[test]
    fn degenerate_point_has_zero_residual() {
        let deg = get_benchmark("degenerate-y-diffusion").unwrap();
        assert_eq!(check_degenerate_point(&deg.spec, &[0.0], 9).unwrap(), 0.0);
    }

    #[test]
    fn references_are_discrete_fixed_points() {
        for name in [
            "degenerate-y-diffusion",
            "linear-z-diffusion",
            "exponential-martingale-decoupled",
        ] {
            let case = get_benchmark(name).unwrap();
            let reference = case.reference_field_pair(&case.lattice).unwrap();
            let (next, _) = backward_iterate(&case.spec, &reference, &BackwardStepConfig::default()).unwrap();
            let lat = &case.lattice;
            let bound = lat.dt() + lat.axes()[0].spacing().powi(2);
            let d = next.distance(&reference).unwrap();
            assert!(d <= bound, "{name}: {d} > {bound}");
        }
    }

    #[test]
    fn near_singular_linear_case_is_diagnosed() {
        let p = BenchParams {
            a: 0.999,
            ..Default::default()
        };
        let case = get_benchmark_with("linear-z-diffusion", &p).unwrap();
        let field = crate::fields::make_initial_field(&case.spec, &case.lattice).unwrap();
        let err = backward_iterate(&case.spec, &field, &BackwardStepConfig::default()).unwrap_err();
        assert!(matches!(err, FbsdeError::ImplicitNotContracting { .. }), "{err}");
        let exact = BenchParams {
            a: 1.0,
            ..Default::default()
        };
        assert!(get_benchmark_with("linear-z-diffusion", &exact).is_err());
    }

    #[test]
    fn random_problems_are_seeded_and_declare_honest_constants() {
        for seed in 0..6 {
            let a = random_smooth_problem(seed, true).unwrap();
            let b = random_smooth_problem(seed, true).unwrap();
            assert_eq!(a.dims, b.dims);
            let x = vec![0.3; a.dims.l];
            let y = [0.2];
            let z = vec![0.1; a.dims.d];
            let mut sa = vec![0.0; a.dims.sigma_len()];
            let mut sb = sa.clone();
            a.coeffs.sigma(0.1, &x, &y, &z, &mut sa);
            b.coeffs.sigma(0.1, &x, &y, &z, &mut sb);
            assert_eq!(sa, sb);
            let audit = audit_assumptions(&a, &SamplePlan::default()).unwrap();
            let dc = &a.coeffs.declared;
            let tol = 1e-6;
            assert!(audit.lipschitz.f_y <= dc.l_f_y.unwrap() + tol);
            assert!(audit.lipschitz.f_z <= dc.l_f_z.unwrap() + tol);
            assert!(audit.lipschitz.sigma_x <= dc.l_sigma_x.unwrap() + tol);
            assert!(audit.lipschitz.phi_x <= dc.l_phi_x.unwrap() + tol);
        }
        let dims: Vec<usize> = (0..20)
            .map(|s| random_smooth_problem(s, false).unwrap().dims.l)
            .collect();
        assert!(dims.contains(&1) && dims.contains(&2));
    }
}
