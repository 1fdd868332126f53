//! Lattice samples of the decoupling field pair `(u, v)`.
//!
//! `u` is `ℝ^m`-valued and `v` is `ℝ^{m×d}`-valued (row-major). Values are
//! stored per time node as contiguous space slices, so the backward solver
//! can interpolate the slice at `t_{i+1}` while it fills the slice at `t_i`.

pub(crate) mod csv_io;
mod lattice;
mod regularity;

pub use csv_io::fmt_f64;
pub use lattice::{Axis, Lattice, OutOfBox};
pub use regularity::{default_offsets, RegularityReport};

use crate::error::{FbsdeError, Result};
use crate::linalg::{all_finite, diff_norm};
use crate::problem::ProblemSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingFieldPair {
    lattice: Lattice,
    m: usize,
    d: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl DecouplingFieldPair {
    pub fn new(lattice: Lattice, m: usize, d: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let slots = (lattice.time_steps() + 1) * lattice.space_len();
        if m == 0 || d == 0 {
            return Err(FbsdeError::param("m/d", "value dimensions must be at least 1"));
        }
        if u.len() != slots * m || v.len() != slots * m * d {
            return Err(FbsdeError::ShapeMismatch(format!(
                "expected {} u and {} v values, got {} and {}",
                slots * m,
                slots * m * d,
                u.len(),
                v.len()
            )));
        }
        let field = Self { lattice, m, d, u, v };
        field.check_finite()?;
        Ok(field)
    }

    /// Samples `(u, v)` from a function of `(t, x)` at every lattice node.
    pub fn from_fn<F>(lattice: Lattice, m: usize, d: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(f64, &[f64], &mut [f64], &mut [f64]),
    {
        let s = lattice.space_len();
        let n = lattice.time_steps() + 1;
        let mut u = vec![0.0; n * s * m];
        let mut v = vec![0.0; n * s * m * d];
        let mut x = vec![0.0; lattice.dim()];
        for i in 0..n {
            let t = lattice.time(i);
            for j in 0..s {
                lattice.node_coords(j, &mut x);
                let k = i * s + j;
                f(
                    t,
                    &x,
                    &mut u[k * m..(k + 1) * m],
                    &mut v[k * m * d..(k + 1) * m * d],
                );
            }
        }
        Self::new(lattice, m, d, u, v)
    }

    fn check_finite(&self) -> Result<()> {
        let s = self.lattice.space_len();
        let bad = self
            .u
            .chunks(self.m)
            .position(|c| !all_finite(c))
            .or_else(|| self.v.chunks(self.m * self.d).position(|c| !all_finite(c)));
        match bad {
            None => Ok(()),
            Some(k) => Err(FbsdeError::NonFinite {
                time_index: k / s,
                node: self.lattice.node_point(k % s),
            }),
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn u_values(&self) -> &[f64] {
        &self.u
    }

    pub fn v_values(&self) -> &[f64] {
        &self.v
    }

    /// All `u` values at time node `i`.
    pub fn u_slice(&self, i: usize) -> &[f64] {
        let n = self.lattice.space_len() * self.m;
        &self.u[i * n..(i + 1) * n]
    }

    pub fn v_slice(&self, i: usize) -> &[f64] {
        let n = self.lattice.space_len() * self.m * self.d;
        &self.v[i * n..(i + 1) * n]
    }

    pub fn u_node(&self, i: usize, j: usize) -> &[f64] {
        let k = i * self.lattice.space_len() + j;
        &self.u[k * self.m..(k + 1) * self.m]
    }

    pub fn v_node(&self, i: usize, j: usize) -> &[f64] {
        let md = self.m * self.d;
        let k = i * self.lattice.space_len() + j;
        &self.v[k * md..(k + 1) * md]
    }

    /// Interpolates at time node `i`. Returns whether `x` was inside the box.
    #[inline]
    pub fn eval_at_index(&self, i: usize, x: &[f64], u: &mut [f64], v: &mut [f64]) -> bool {
        self.lattice.interpolate(self.v_slice(i), self.m * self.d, x, v);
        self.lattice.interpolate(self.u_slice(i), self.m, x, u)
    }

    /// `(u, v)(t, x)`: multilinear in space at the left time node.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.lattice.dim() {
            return Err(FbsdeError::ShapeMismatch(format!(
                "point has {} coordinates, lattice has {} axes",
                x.len(),
                self.lattice.dim()
            )));
        }
        let i = self.lattice.time_index(t)?;
        let mut u = vec![0.0; self.m];
        let mut v = vec![0.0; self.m * self.d];
        self.eval_at_index(i, x, &mut u, &mut v);
        Ok((u, v))
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.lattice != other.lattice || self.m != other.m || self.d != other.d {
            return Err(FbsdeError::ShapeMismatch(
                "fields live on different lattices or value dimensions".into(),
            ));
        }
        Ok(())
    }

    /// `max` over nodes of `|u_a − u_b| + |v_a − v_b|` (Frobenius norms).
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let md = self.m * self.d;
        let worst = self
            .u
            .chunks(self.m)
            .zip(other.u.chunks(self.m))
            .zip(self.v.chunks(md).zip(other.v.chunks(md)))
            .map(|((ua, ub), (va, vb))| diff_norm(ua, ub) + diff_norm(va, vb))
            .fold(0.0, f64::max);
        Ok(worst)
    }

    /// A copy with a different out-of-box rule.
    pub fn with_out_of_box(mut self, rule: OutOfBox) -> Self {
        self.lattice = self.lattice.with_out_of_box(rule);
        self
    }
}

/// `u_0(t, x) = φ(x)`, `v_0 ≡ 0`.
pub fn make_initial_field(spec: &ProblemSpec, lattice: &Lattice) -> Result<DecouplingFieldPair> {
    check_lattice_fits(spec, lattice)?;
    let (m, d) = (spec.dims.m, spec.dims.d);
    let mut failure = None;
    let field = DecouplingFieldPair::from_fn(lattice.clone(), m, d, |_, x, u, v| {
        spec.coeffs.terminal(x, u);
        if !all_finite(u) && failure.is_none() {
            failure = Some(x.to_vec());
        }
        v.iter_mut().for_each(|a| *a = 0.0);
    });
    if let Some(x) = failure {
        return Err(FbsdeError::EvaluatorFailure {
            evaluator: "terminal",
            point: format!("x={x:?}"),
        });
    }
    field
}

/// The lattice must sit inside the problem box and span its horizon.
pub fn check_lattice_fits(spec: &ProblemSpec, lattice: &Lattice) -> Result<()> {
    if lattice.dim() != spec.dims.l {
        return Err(FbsdeError::ShapeMismatch(format!(
            "lattice has {} axes, problem has l = {}",
            lattice.dim(),
            spec.dims.l
        )));
    }
    if (lattice.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(FbsdeError::ShapeMismatch(format!(
            "lattice horizon {} differs from problem horizon {}",
            lattice.horizon(),
            spec.horizon
        )));
    }
    for (ax, iv) in lattice.axes().iter().zip(&spec.space_box) {
        if ax.min < iv.min || ax.max > iv.max {
            return Err(FbsdeError::ShapeMismatch(format!(
                "lattice axis [{}, {}] leaves the space box [{}, {}]",
                ax.min, ax.max, iv.min, iv.max
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CoefficientSet, Dimensions, Interval};
    use proptest::prelude::*;

    fn spec_with_phi(phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ProblemSpec {
        let coeffs = CoefficientSet::new(
            |_, _, y, _, o| o[0] = y[0],
            |_, _, _, _, o| o[0] = 0.0,
            move |x, o| o[0] = phi(x[0]),
        );
        ProblemSpec::new(
            Dimensions::new(1, 1, 1).unwrap(),
            coeffs,
            1.0,
            vec![Interval::new(-2.0, 2.0).unwrap()],
        )
        .unwrap()
    }

    fn lattice(nodes: usize) -> Lattice {
        Lattice::new(
            1.0,
            4,
            vec![Axis {
                min: -2.0,
                max: 2.0,
                nodes,
            }],
        )
        .unwrap()
    }

    #[test]
    fn initial_field_copies_terminal() {
        let spec = spec_with_phi(|x| x);
        let lat = lattice(5);
        let f = make_initial_field(&spec, &lat).unwrap();
        for i in 0..=4 {
            for j in 0..5 {
                assert_eq!(f.u_node(i, j)[0], lat.node_point(j)[0]);
                assert_eq!(f.v_node(i, j)[0], 0.0);
            }
        }
        let f = make_initial_field(&spec_with_phi(|_| 3.0), &lat).unwrap();
        assert!(f.u_values().iter().all(|u| *u == 3.0));
        let lat3 = Lattice::new(
            1.0,
            4,
            vec![Axis {
                min: -1.0,
                max: 1.0,
                nodes: 3,
            }],
        )
        .unwrap();
        let f = make_initial_field(&spec_with_phi(|x| x * x), &lat3).unwrap();
        assert_eq!(f.u_slice(2), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn initial_field_reports_terminal_failure() {
        let spec = spec_with_phi(|x| if x > 1.0 { f64::INFINITY } else { x });
        assert!(matches!(
            make_initial_field(&spec, &lattice(5)),
            Err(FbsdeError::EvaluatorFailure {
                evaluator: "terminal",
                ..
            })
        ));
    }

    #[test]
    fn lattice_must_fit_box() {
        let spec = spec_with_phi(|x| x);
        let wide = Lattice::new(
            1.0,
            4,
            vec![Axis {
                min: -3.0,
                max: 2.0,
                nodes: 5,
            }],
        )
        .unwrap();
        assert!(make_initial_field(&spec, &wide).is_err());
    }

    #[test]
    fn eval_rules() {
        let lat = lattice(5);
        let f = DecouplingFieldPair::from_fn(lat, 1, 1, |t, x, u, v| {
            u[0] = 3.0 * x[0] + t;
            v[0] = -x[0];
        })
        .unwrap();
        // node value exactly
        let (u, v) = f.eval(0.25, &[1.0]).unwrap();
        assert_eq!((u[0], v[0]), (3.25, -1.0));
        // midpoint of linear data
        let (u, _) = f.eval(0.25, &[0.5]).unwrap();
        assert!((u[0] - 1.75).abs() < 1e-15);
        // left rule in time
        let (u, _) = f.eval(0.49, &[0.0]).unwrap();
        assert_eq!(u[0], 0.25);
        // clamp
        let (u, v) = f.eval(1.0, &[7.0]).unwrap();
        assert_eq!((u[0], v[0]), (7.0, -2.0));
        assert!(matches!(
            f.eval(1.5, &[0.0]),
            Err(FbsdeError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let lat = lattice(9);
        let base = DecouplingFieldPair::from_fn(lat.clone(), 1, 1, |_, x, u, v| {
            u[0] = x[0];
            v[0] = 0.0;
        })
        .unwrap();
        assert_eq!(base.distance(&base).unwrap(), 0.0);
        let shifted = DecouplingFieldPair::from_fn(lat.clone(), 1, 1, |_, x, u, v| {
            u[0] = x[0] + 1.0;
            v[0] = 0.0;
        })
        .unwrap();
        assert_eq!(base.distance(&shifted).unwrap(), 1.0);
        let doubled = DecouplingFieldPair::from_fn(lat, 1, 1, |_, x, u, v| {
            u[0] = 2.0 * x[0];
            v[0] = 0.0;
        })
        .unwrap();
        assert_eq!(base.distance(&doubled).unwrap(), 2.0);
        let other = make_initial_field(&spec_with_phi(|x| x), &lattice(5)).unwrap();
        assert!(matches!(base.distance(&other), Err(FbsdeError::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_non_finite_values() {
        let lat = lattice(3);
        let err = DecouplingFieldPair::from_fn(lat, 1, 1, |t, x, u, v| {
            u[0] = if t > 0.5 && x[0] == 0.0 { f64::NAN } else { 0.0 };
            v[0] = 0.0;
        })
        .unwrap_err();
        assert!(matches!(err, FbsdeError::NonFinite { time_index: 3, .. }));
    }

    fn random_field(vals: &[f64], lat: &Lattice) -> DecouplingFieldPair {
        let s = lat.space_len() * (lat.time_steps() + 1);
        let u: Vec<f64> = (0..s).map(|k| vals[k % vals.len()]).collect();
        let v: Vec<f64> = (0..s).map(|k| vals[(3 * k + 1) % vals.len()]).collect();
        DecouplingFieldPair::new(lat.clone(), 1, 1, u, v).unwrap()
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in prop::collection::vec(-5.0f64..5.0, 7),
            b in prop::collection::vec(-5.0f64..5.0, 11),
            c in prop::collection::vec(-5.0f64..5.0, 13),
        ) {
            let lat = lattice(5);
            let (fa, fb, fc) = (random_field(&a, &lat), random_field(&b, &lat), random_field(&c, &lat));
            let ab = fa.distance(&fb).unwrap();
            prop_assert_eq!(ab, fb.distance(&fa).unwrap());
            prop_assert_eq!(fa.distance(&fa).unwrap(), 0.0);
            prop_assert!(ab <= fa.distance(&fc).unwrap() + fc.distance(&fb).unwrap() + 1e-12);
            if fa != fb {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn interpolation_stays_in_neighbor_hull(
            vals in prop::collection::vec(-5.0f64..5.0, 25),
            x in -2.5f64..2.5,
            y in -1.5f64..1.5,
        ) {
            let lat = Lattice::new(1.0, 2, vec![
                Axis { min: -2.0, max: 2.0, nodes: 5 },
                Axis { min: -1.0, max: 1.0, nodes: 5 },
            ]).unwrap();
            let mut out = [0.0];
            lat.interpolate(&vals, 1, &[x, y], &mut out);
            let cx = ((x.clamp(-2.0, 2.0) + 2.0).floor() as usize).min(3);
            let cy = (((y.clamp(-1.0, 1.0) + 1.0) * 2.0).floor() as usize).min(3);
            let corners = [vals[cx * 5 + cy], vals[cx * 5 + cy + 1], vals[(cx + 1) * 5 + cy], vals[(cx + 1) * 5 + cy + 1]];
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[0] >= lo - 1e-12 && out[0] <= hi + 1e-12);
        }

        #[test]
        fn interpolation_reproduces_nodes(vals in prop::collection::vec(-5.0f64..5.0, 15)) {
            let lat = Lattice::new(1.0, 2, vec![
                Axis { min: -1.3, max: 2.9, nodes: 3 },
                Axis { min: 0.1, max: 0.7, nodes: 5 },
            ]).unwrap();
            let mut out = [0.0];
            for j in 0..15 {
                lat.interpolate(&vals, 1, &lat.node_point(j), &mut out);
                prop_assert_eq!(out[0], vals[j]);
            }
        }
    }
}
