//! Finite-sample audit of the smoothness, Hölder and degeneracy assumptions.
//!
//! Every number reported here is a supremum over an explicit finite sample
//! set, so it is a lower bound for the true constant and can only grow when
//! the sample set grows. The audit never rejects a problem.

use super::{fmt_point, ProblemSpec};
use crate::error::{FbsdeError, Result};
use crate::linalg::{all_finite, diff_norm, norm};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    /// Grid points per space axis; the same count is used for time samples.
    pub points_per_axis: usize,
    /// Finite-difference steps. Steps `≤ 1` feed the Lipschitz regime, steps
    /// `> 1` the large-increment Hölder bound; all feed Lipschitz estimates.
    pub h_samples: Vec<f64>,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            points_per_axis: 9,
            h_samples: vec![0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LipschitzEstimates {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub f_x: f64,
    pub f_y: f64,
    pub f_z: f64,
    pub phi_x: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionAudit {
    pub lipschitz: LipschitzEstimates,
    /// `sup |g(x+h) − g(x)| / |h|^{1/2}` over `|h| > 1`, `g ∈ {φ, f(t,·,y,z)}`.
    pub holder_lambda: f64,
    /// The same quotient restricted to `|h| ≤ 1`, reported separately.
    pub holder_small_h: f64,
    /// `Some(true)` when the large-step quotient keeps increasing with `|h|`,
    /// i.e. the sampled data contradict a uniform bound. `None` with fewer
    /// than two steps above 1.
    pub holder_bound_growing: Option<bool>,
    /// `(x0, residual)` for every declared degenerate candidate.
    pub degenerate_residuals: Vec<(Vec<f64>, f64)>,
    pub space_points: usize,
    pub time_points: usize,
    pub h_samples: Vec<f64>,
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

struct Evaluator<'a> {
    spec: &'a ProblemSpec,
}

impl Evaluator<'_> {
    fn sigma(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.spec.dims.sigma_len()];
        self.spec.coeffs.sigma(t, x, y, z, &mut out);
        check("sigma", &out, || fmt_point(Some(t), x, y, z))?;
        Ok(out)
    }

    fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.spec.dims.m];
        self.spec.coeffs.driver(t, x, y, z, &mut out);
        check("driver", &out, || fmt_point(Some(t), x, y, z))?;
        Ok(out)
    }

    fn terminal(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.spec.dims.m];
        self.spec.coeffs.terminal(x, &mut out);
        check("terminal", &out, || fmt_point(None, x, &[], &[]))?;
        Ok(out)
    }
}

fn check(evaluator: &'static str, out: &[f64], point: impl FnOnce() -> String) -> Result<()> {
    if all_finite(out) {
        Ok(())
    } else {
        Err(FbsdeError::EvaluatorFailure {
            evaluator,
            point: point(),
        })
    }
}

fn shifted(base: &[f64], axis: usize, step: f64) -> Vec<f64> {
    let mut p = base.to_vec();
    p[axis] += step;
    p
}

pub fn audit_assumptions(spec: &ProblemSpec, plan: &SamplePlan) -> Result<AssumptionAudit> {
    if plan.points_per_axis == 0 {
        return Err(FbsdeError::param("points_per_axis", "must be at least 1"));
    }
    if plan.h_samples.is_empty() || plan.h_samples.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(FbsdeError::param(
            "h_samples",
            "need a nonempty list of positive steps",
        ));
    }
    if !plan.h_samples.iter().any(|h| *h <= 1.0) || !plan.h_samples.iter().any(|h| *h > 1.0) {
        return Err(FbsdeError::param(
            "h_samples",
            "must contain steps both <= 1 and > 1",
        ));
    }
    let dims = spec.dims;
    let ev = Evaluator { spec };
    let n = plan.points_per_axis;
    let axes: Vec<Vec<f64>> = spec.space_box.iter().map(|iv| grid(iv.min, iv.max, n)).collect();
    let xs = cartesian(&axes);
    let times = grid(0.0, spec.horizon, n.max(2));
    let mut large_steps: Vec<f64> = plan.h_samples.iter().copied().filter(|h| *h > 1.0).collect();
    large_steps.sort_by(f64::total_cmp);
    large_steps.dedup();
    let mut large_quotient = vec![0.0f64; large_steps.len()];

    let mut lip = LipschitzEstimates::default();
    let mut holder_small = 0.0f64;
    let signed_steps: Vec<f64> = plan.h_samples.iter().flat_map(|h| [*h, -*h]).collect();

    for x in &xs {
        let phi = ev.terminal(x)?;
        for axis in 0..dims.l {
            for &h in &signed_steps {
                let q = diff_norm(&ev.terminal(&shifted(x, axis, h))?, &phi);
                lip.phi_x = lip.phi_x.max(q / h.abs());
                record_holder(h, q, &large_steps, &mut large_quotient, &mut holder_small);
            }
        }
        let ys = [
            phi.clone(),
            phi.iter().map(|v| v + 1.0).collect::<Vec<_>>(),
            phi.iter().map(|v| v - 1.0).collect::<Vec<_>>(),
        ];
        let zl = dims.z_len();
        let zs = [vec![0.0; zl], vec![1.0; zl], vec![-1.0; zl]];
        for &t in &times {
            for y in &ys {
                for z in &zs {
                    let s0 = ev.sigma(t, x, y, z)?;
                    let f0 = ev.driver(t, x, y, z)?;
                    for &h in &signed_steps {
                        let a = h.abs();
                        for axis in 0..dims.l {
                            let xp = shifted(x, axis, h);
                            lip.sigma_x = lip.sigma_x.max(diff_norm(&ev.sigma(t, &xp, y, z)?, &s0) / a);
                            let q = diff_norm(&ev.driver(t, &xp, y, z)?, &f0);
                            lip.f_x = lip.f_x.max(q / a);
                            record_holder(h, q, &large_steps, &mut large_quotient, &mut holder_small);
                        }
                        for axis in 0..dims.m {
                            let yp = shifted(y, axis, h);
                            lip.sigma_y = lip.sigma_y.max(diff_norm(&ev.sigma(t, x, &yp, z)?, &s0) / a);
                            lip.f_y = lip.f_y.max(diff_norm(&ev.driver(t, x, &yp, z)?, &f0) / a);
                        }
                        for axis in 0..zl {
                            let zp = shifted(z, axis, h);
                            lip.sigma_z = lip.sigma_z.max(diff_norm(&ev.sigma(t, x, y, &zp)?, &s0) / a);
                            lip.f_z = lip.f_z.max(diff_norm(&ev.driver(t, x, y, &zp)?, &f0) / a);
                        }
                    }
                }
            }
        }
    }

    let holder_lambda = large_quotient.iter().copied().fold(0.0, f64::max);
    let holder_bound_growing = (large_quotient.len() >= 2).then(|| {
        let first = large_quotient[0];
        let last = large_quotient[large_quotient.len() - 1];
        last > first * (1.0 + 1e-9) && last > 0.0
    });

    let degenerate_residuals = spec
        .coeffs
        .degenerate_candidates
        .iter()
        .map(|x0| Ok((x0.clone(), check_degenerate_point(spec, x0, n.max(2))?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(AssumptionAudit {
        lipschitz: lip,
        holder_lambda,
        holder_small_h: holder_small,
        holder_bound_growing,
        degenerate_residuals,
        space_points: xs.len(),
        time_points: times.len(),
        h_samples: plan.h_samples.clone(),
    })
}

fn record_holder(h: f64, diff: f64, large_steps: &[f64], large: &mut [f64], small: &mut f64) {
    let a = h.abs();
    let q = diff / a.sqrt();
    if a > 1.0 {
        if let Some(k) = large_steps.iter().position(|s| *s == a) {
            large[k] = large[k].max(q);
        }
    } else {
        *small = small.max(q);
    }
}

/// `max_s |σ(s, x0, φ(x0), 0)| + |f(s, x0, φ(x0), 0)|` over `time_samples`
/// equally spaced times in `[0, T]`.
pub fn check_degenerate_point(spec: &ProblemSpec, x0: &[f64], time_samples: usize) -> Result<f64> {
    if time_samples < 2 {
        return Err(FbsdeError::param("time_samples", "must be at least 2"));
    }
    if x0.len() != spec.dims.l {
        return Err(FbsdeError::param(
            "x0",
            format!("expected length {}, got {}", spec.dims.l, x0.len()),
        ));
    }
    let ev = Evaluator { spec };
    let phi = ev.terminal(x0)?;
    let zero_z = vec![0.0; spec.dims.z_len()];
    let mut worst = 0.0f64;
    for s in grid(0.0, spec.horizon, time_samples) {
        let sig = ev.sigma(s, x0, &phi, &zero_z)?;
        let f = ev.driver(s, x0, &phi, &zero_z)?;
        worst = worst.max(norm(&sig) + norm(&f));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{AffineCoefficients, CoefficientSet, Dimensions, Interval};

    fn scalar_spec(
        sigma: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        candidates: Vec<Vec<f64>>,
    ) -> ProblemSpec {
        let coeffs = CoefficientSet::new(
            move |t, x, y, z, o| o[0] = sigma(t, x[0], y[0], z[0]),
            |_, _, _, _, o| o[0] = 0.0,
            move |x, o| o[0] = phi(x[0]),
        )
        .with_degenerate_candidates(candidates);
        ProblemSpec::new(
            Dimensions::new(1, 1, 1).unwrap(),
            coeffs,
            1.0,
            vec![Interval::new(-2.0, 2.0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_example_has_zero_residual() {
        let spec = scalar_spec(|_, _, y, _| y, |x| x, vec![vec![0.0]]);
        let audit = audit_assumptions(&spec, &SamplePlan::default()).unwrap();
        assert_eq!(audit.degenerate_residuals, vec![(vec![0.0], 0.0)]);
        assert_eq!(check_degenerate_point(&spec, &[0.0], 5).unwrap(), 0.0);
    }

    #[test]
    fn constant_diffusion_is_not_degenerate() {
        let spec = scalar_spec(|_, _, _, _| 1.0, |x| x, vec![]);
        assert_eq!(check_degenerate_point(&spec, &[0.7], 4).unwrap(), 1.0);
        assert!(check_degenerate_point(&spec, &[0.7], 1).is_err());
    }

    #[test]
    fn zero_terminal_has_zero_constants() {
        let spec = scalar_spec(|_, _, _, _| 1.0, |_| 0.0, vec![]);
        let audit = audit_assumptions(&spec, &SamplePlan::default()).unwrap();
        assert_eq!(audit.holder_lambda, 0.0);
        assert_eq!(audit.lipschitz.phi_x, 0.0);
    }

    #[test]
    fn identity_terminal_constants() {
        let spec = scalar_spec(|_, _, _, _| 1.0, |x| x, vec![]);
        let plan = SamplePlan {
            points_per_axis: 5,
            h_samples: vec![0.5, 2.0],
        };
        let audit = audit_assumptions(&spec, &plan).unwrap();
        assert!((audit.lipschitz.phi_x - 1.0).abs() < 1e-15);
        assert!((audit.holder_lambda - 2.0f64.sqrt()).abs() < 1e-15);
        // a single large step cannot show growth
        assert_eq!(audit.holder_bound_growing, None);
        let plan = SamplePlan {
            points_per_axis: 5,
            h_samples: vec![0.5, 2.0, 8.0],
        };
        let audit = audit_assumptions(&spec, &plan).unwrap();
        assert_eq!(audit.holder_bound_growing, Some(true));
    }

    #[test]
    fn bounded_terminal_does_not_flag_growth() {
        let spec = scalar_spec(|_, _, _, _| 1.0, |x: f64| x.sin(), vec![]);
        let audit = audit_assumptions(&spec, &SamplePlan::default()).unwrap();
        assert_eq!(audit.holder_bound_growing, Some(false));
    }

    #[test]
    fn plan_must_cover_both_regimes() {
        let spec = scalar_spec(|_, _, _, _| 1.0, |x| x, vec![]);
        for h in [vec![0.1, 0.5], vec![2.0], vec![]] {
            let plan = SamplePlan {
                points_per_axis: 3,
                h_samples: h,
            };
            assert!(audit_assumptions(&spec, &plan).is_err());
        }
    }

    #[test]
    fn evaluator_failure_names_the_point() {
        let spec = scalar_spec(|_, x, _, _| if x > 1.5 { f64::NAN } else { 1.0 }, |x| x, vec![]);
        let err = audit_assumptions(&spec, &SamplePlan::default()).unwrap_err();
        match err {
            FbsdeError::EvaluatorFailure { evaluator, point } => {
                assert_eq!(evaluator, "sigma");
                assert!(point.contains("x=["), "{point}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn affine_lipschitz_estimates_are_exact() {
        let dims = Dimensions::new(1, 1, 1).unwrap();
        let mut a = AffineCoefficients::zeros(dims);
        a.sigma_x = vec![0.7];
        a.sigma_y = vec![-1.3];
        a.sigma_z = vec![0.25];
        a.driver_y = vec![0.4];
        a.driver_z = vec![-0.6];
        a.terminal_x = vec![1.5];
        let coeffs = a.into_coefficients(dims).unwrap();
        let spec = ProblemSpec::new(dims, coeffs, 2.0, vec![Interval::new(-3.0, 1.0).unwrap()]).unwrap();
        for plan in [
            SamplePlan {
                points_per_axis: 2,
                h_samples: vec![0.3, 1.7],
            },
            SamplePlan::default(),
        ] {
            let lip = audit_assumptions(&spec, &plan).unwrap().lipschitz;
            let tol = 1e-12;
            assert!((lip.sigma_x - 0.7).abs() < tol);
            assert!((lip.sigma_y - 1.3).abs() < tol);
            assert!((lip.sigma_z - 0.25).abs() < tol);
            assert!((lip.f_y - 0.4).abs() < tol);
            assert!((lip.f_z - 0.6).abs() < tol);
            assert!((lip.phi_x - 1.5).abs() < tol);
            assert!(lip.f_x.abs() < tol);
        }
    }

    #[test]
    fn estimates_grow_with_the_sample_set() {
        let spec = scalar_spec(
            |t, x: f64, y: f64, _| (x * 1.3).sin() * (1.0 + t) + 0.2 * y.tanh(),
            |x: f64| (2.0 * x).cos() + 0.1 * x * x,
            vec![],
        );
        let small = SamplePlan {
            points_per_axis: 3,
            h_samples: vec![0.5, 2.0],
        };
        let large = SamplePlan {
            points_per_axis: 5,
            h_samples: vec![0.1, 0.5, 2.0, 3.0],
        };
        let a = audit_assumptions(&spec, &small).unwrap();
        let b = audit_assumptions(&spec, &large).unwrap();
        assert!(b.lipschitz.sigma_x >= a.lipschitz.sigma_x);
        assert!(b.lipschitz.sigma_y >= a.lipschitz.sigma_y);
        assert!(b.lipschitz.phi_x >= a.lipschitz.phi_x);
        assert!(b.holder_lambda >= a.holder_lambda);
        assert!(b.holder_small_h >= a.holder_small_h);
    }
}
