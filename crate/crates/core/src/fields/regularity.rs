use super::{DecouplingFieldPair, Lattice};
use crate::error::{FbsdeError, Result};
use crate::linalg::{diff_norm, norm};

/// Node-based regularity measurements of a field pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularityReport {
    /// `sup |u(t,x+h) − u(t,x)| / |h|^{1/2}`.
    pub holder_half_modulus_u: f64,
    pub holder_half_modulus_v: f64,
    /// Smallest `C` with `|u| + |v| ≤ C (1 + |x|)` at every node.
    pub growth_constant: f64,
    /// `sup |u(t+h,x) − u(t,x)| / h^{1/2}` over dyadic time shifts.
    pub time_modulus_u: f64,
    /// `max |u|` over nodes.
    pub sup_norm_u: f64,
}

impl RegularityReport {
    pub fn is_finite(&self) -> bool {
        [
            self.holder_half_modulus_u,
            self.holder_half_modulus_v,
            self.growth_constant,
            self.time_modulus_u,
            self.sup_norm_u,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn non_finite() -> Self {
        Self {
            holder_half_modulus_u: f64::INFINITY,
            holder_half_modulus_v: f64::INFINITY,
            growth_constant: f64::INFINITY,
            time_modulus_u: f64::INFINITY,
            sup_norm_u: f64::INFINITY,
        }
    }
}

/// Offsets of 1, 2, 4, … grid cells along each axis.
pub fn default_offsets(lattice: &Lattice) -> Vec<Vec<f64>> {
    let l = lattice.dim();
    let mut out = Vec::new();
    for (a, ax) in lattice.axes().iter().enumerate() {
        let mut k = 1;
        while k < ax.nodes {
            let mut h = vec![0.0; l];
            h[a] = k as f64 * ax.spacing();
            out.push(h);
            k *= 2;
        }
    }
    out
}

impl DecouplingFieldPair {
    /// Regularity suprema over lattice nodes. Offsets are snapped to whole
    /// grid shifts; offsets that snap to zero are sub-grid and skipped.
    pub fn measure_regularity(&self, offsets: &[Vec<f64>]) -> Result<RegularityReport> {
        let lat = self.lattice();
        let l = lat.dim();
        let shifts: Vec<(Vec<isize>, f64)> = offsets
            .iter()
            .filter(|h| h.len() == l)
            .filter_map(|h| {
                let k: Vec<isize> = h
                    .iter()
                    .zip(lat.axes())
                    .map(|(hv, ax)| (hv / ax.spacing()).round() as isize)
                    .collect();
                if k.iter().all(|v| *v == 0) {
                    return None;
                }
                let len = k
                    .iter()
                    .zip(lat.axes())
                    .map(|(kv, ax)| (*kv as f64 * ax.spacing()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                Some((k, len))
            })
            .collect();
        if shifts.is_empty() {
            return Err(FbsdeError::param(
                "offsets",
                "every offset is below the grid spacing (or has the wrong dimension)",
            ));
        }

        let s = lat.space_len();
        let mut hu = 0.0f64;
        let mut hv = 0.0f64;
        let mut growth = 0.0f64;
        let mut sup_u = 0.0f64;
        let mut x = vec![0.0; l];
        for i in 0..=lat.time_steps() {
            for j in 0..s {
                let (u0, v0) = (self.u_node(i, j), self.v_node(i, j));
                lat.node_coords(j, &mut x);
                growth = growth.max((norm(u0) + norm(v0)) / (1.0 + norm(&x)));
                sup_u = sup_u.max(norm(u0));
                let idx = lat.multi_index(j);
                for (k, len) in &shifts {
                    let Some(jj) = shifted_index(lat, &idx, k) else {
                        continue;
                    };
                    let scale = len.sqrt();
                    hu = hu.max(diff_norm(self.u_node(i, jj), u0) / scale);
                    hv = hv.max(diff_norm(self.v_node(i, jj), v0) / scale);
                }
            }
        }

        let mut tm = 0.0f64;
        let n = lat.time_steps();
        let mut shift = 1;
        while shift <= n {
            let scale = (shift as f64 * lat.dt()).sqrt();
            for i in 0..=(n - shift) {
                for j in 0..s {
                    tm = tm.max(diff_norm(self.u_node(i + shift, j), self.u_node(i, j)) / scale);
                }
            }
            shift *= 2;
        }

        Ok(RegularityReport {
            holder_half_modulus_u: hu,
            holder_half_modulus_v: hv,
            growth_constant: growth,
            time_modulus_u: tm,
            sup_norm_u: sup_u,
        })
    }
}

fn shifted_index(lat: &Lattice, idx: &[usize], k: &[isize]) -> Option<usize> {
    let mut flat = 0;
    for (a, ax) in lat.axes().iter().enumerate() {
        let p = idx[a] as isize + k[a];
        if p < 0 || p >= ax.nodes as isize {
            return None;
        }
        flat += p as usize * lat.strides()[a];
    }
    Some(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_initial_field, Axis};
    use crate::problem::{CoefficientSet, Dimensions, Interval, ProblemSpec};

    fn lat(nodes: usize) -> Lattice {
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

    fn field(nodes: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> DecouplingFieldPair {
        DecouplingFieldPair::from_fn(lat(nodes), 1, 1, |t, x, u, v| {
            let (a, b) = f(t, x[0]);
            u[0] = a;
            v[0] = b;
        })
        .unwrap()
    }

    #[test]
    fn constant_field_has_zero_modulus() {
        let r = field(9, |_, _| (2.5, 0.0))
            .measure_regularity(&[vec![0.5]])
            .unwrap();
        assert_eq!(r.holder_half_modulus_u, 0.0);
        assert_eq!(r.holder_half_modulus_v, 0.0);
        assert_eq!(r.time_modulus_u, 0.0);
    }

    #[test]
    fn identity_field_unit_offset() {
        let r = field(5, |_, x| (x, 0.0))
            .measure_regularity(&[vec![1.0]])
            .unwrap();
        assert_eq!(r.holder_half_modulus_u, 1.0);
    }

    #[test]
    fn growth_of_u_and_v_equal_identity() {
        let r = field(5, |_, x| (x, x)).measure_regularity(&[vec![1.0]]).unwrap();
        assert!((r.growth_constant - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn time_modulus_of_linear_in_time() {
        // u = t: quotient h / sqrt(h) is largest for the longest shift (h = 1)
        let r = field(5, |t, _| (t, 0.0))
            .measure_regularity(&[vec![1.0]])
            .unwrap();
        assert!((r.time_modulus_u - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sub_grid_offsets_are_rejected() {
        let f = field(5, |_, x| (x, 0.0));
        assert!(f.measure_regularity(&[vec![0.2]]).is_err());
        assert!(f.measure_regularity(&[]).is_err());
    }

    #[test]
    fn initial_field_modulus_matches_terminal() {
        let coeffs = CoefficientSet::new(
            |_, _, _, _, o| o[0] = 1.0,
            |_, _, _, _, o| o[0] = 0.0,
            |x, o| o[0] = (1.7 * x[0]).sin(),
        );
        let spec = ProblemSpec::new(
            Dimensions::new(1, 1, 1).unwrap(),
            coeffs,
            1.0,
            vec![Interval::new(-2.0, 2.0).unwrap()],
        )
        .unwrap();
        let lattice = lat(17);
        let f = make_initial_field(&spec, &lattice).unwrap();
        let offsets = default_offsets(&lattice);
        let r = f.measure_regularity(&offsets).unwrap();
        // independent sampled modulus of φ over the same node pairs
        let mut expect = 0.0f64;
        for h in &offsets {
            for j in 0..17 {
                let x = -2.0 + 0.25 * j as f64;
                if x + h[0] <= 2.0 + 1e-12 {
                    let q = ((1.7 * (x + h[0])).sin() - (1.7 * x).sin()).abs() / h[0].sqrt();
                    expect = expect.max(q);
                }
            }
        }
        assert!((r.holder_half_modulus_u - expect).abs() < 1e-12);
        assert_eq!(r.holder_half_modulus_v, 0.0);
        assert_eq!(r.time_modulus_u, 0.0);
    }
}
