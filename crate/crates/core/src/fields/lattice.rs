use crate::error::{FbsdeError, Result};
use crate::problem::ProblemSpec;

/// What interpolation does with points outside the space box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutOfBox {
    /// Clamp each coordinate to the box before interpolating.
    #[default]
    Clamp,
    /// Extend the boundary cell's multilinear interpolant past the box.
    LinearExtrapolate,
}

impl OutOfBox {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutOfBox::Clamp => "clamp",
            OutOfBox::LinearExtrapolate => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clamp" => Some(OutOfBox::Clamp),
            "linear" | "linear-extrapolate" => Some(OutOfBox::LinearExtrapolate),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.nodes {
            self.max
        } else {
            self.min + j as f64 * self.spacing()
        }
    }

    /// Cell index and local coordinate of `x`, honoring the out-of-box rule.
    /// Node positions snap to weight exactly 0 so stored values come back
    /// bit-for-bit.
    #[inline]
    fn locate(&self, x: f64, rule: OutOfBox) -> (usize, f64) {
        let last = (self.nodes - 1) as f64;
        let mut s = (x - self.min) / self.spacing();
        if rule == OutOfBox::Clamp {
            s = s.clamp(0.0, last);
        }
        let k = s.round();
        if (s - k).abs() <= 64.0 * f64::EPSILON * k.abs().max(1.0) {
            s = k;
        }
        let cell = s.floor().clamp(0.0, last - 1.0);
        (cell as usize, s - cell)
    }
}

/// Uniform space-time lattice: `N + 1` time nodes on `[0, T]` and a tensor
/// grid over the space box.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    horizon: f64,
    time_steps: usize,
    axes: Vec<Axis>,
    strides: Vec<usize>,
    out_of_box: OutOfBox,
}

impl Lattice {
    pub fn new(horizon: f64, time_steps: usize, axes: Vec<Axis>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(FbsdeError::param(
                "horizon",
                format!("must be positive, got {horizon}"),
            ));
        }
        if time_steps < 2 {
            return Err(FbsdeError::param("time_steps", "need at least 2 time steps"));
        }
        if axes.is_empty() {
            return Err(FbsdeError::param("axes", "need at least one space axis"));
        }
        for (a, ax) in axes.iter().enumerate() {
            if ax.nodes < 3 {
                return Err(FbsdeError::param(
                    format!("axes[{a}].nodes"),
                    "need at least 3 nodes",
                ));
            }
            if !(ax.min.is_finite() && ax.max.is_finite() && ax.min < ax.max) {
                return Err(FbsdeError::param(
                    format!("axes[{a}]"),
                    format!("need finite min < max, got [{}, {}]", ax.min, ax.max),
                ));
            }
        }
        // Row-major with the last axis fastest.
        let mut strides = vec![1; axes.len()];
        for a in (0..axes.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].nodes;
        }
        Ok(Self {
            horizon,
            time_steps,
            axes,
            strides,
            out_of_box: OutOfBox::Clamp,
        })
    }

    /// Lattice covering `spec`'s box and horizon with `nodes_per_axis` nodes
    /// on every axis.
    pub fn for_spec(spec: &ProblemSpec, time_steps: usize, nodes_per_axis: usize) -> Result<Self> {
        let axes = spec
            .space_box
            .iter()
            .map(|iv| Axis {
                min: iv.min,
                max: iv.max,
                nodes: nodes_per_axis,
            })
            .collect();
        Self::new(spec.horizon, time_steps, axes)
    }

    pub fn with_out_of_box(mut self, rule: OutOfBox) -> Self {
        self.out_of_box = rule;
        self
    }

    pub fn out_of_box(&self) -> OutOfBox {
        self.out_of_box
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.time_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.time_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Number of space nodes.
    pub fn space_len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.axes)
            .map(|(s, a)| (flat / s) % a.nodes)
            .collect()
    }

    pub fn node_coords(&self, flat: usize, out: &mut [f64]) {
        for (a, ax) in self.axes.iter().enumerate() {
            out[a] = ax.node((flat / self.strides[a]) % ax.nodes);
        }
    }

    pub fn node_point(&self, flat: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.node_coords(flat, &mut p);
        p
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.axes).all(|(v, a)| a.min <= *v && *v <= a.max)
    }

    /// Left-rule time index: the node `t_i` with `t_i ≤ t < t_{i+1}`;
    /// `t = T` maps to `N`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(FbsdeError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let s = t / self.dt();
        let k = s.round();
        let i = if (s - k).abs() <= 64.0 * f64::EPSILON * k.max(1.0) {
            k
        } else {
            s.floor()
        };
        Ok((i as usize).min(self.time_steps))
    }

    /// Multilinear interpolation of a space slice holding `comps` values per
    /// node. Returns whether `x` lies inside the box.
    pub fn interpolate(&self, slice: &[f64], comps: usize, x: &[f64], out: &mut [f64]) -> bool {
        let l = self.dim();
        debug_assert!(l <= 8);
        let mut cells = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for a in 0..l {
            let (c, w) = self.axes[a].locate(x[a], self.out_of_box);
            cells[a] = c;
            weights[a] = w;
        }
        out[..comps].iter_mut().for_each(|o| *o = 0.0);
        for mask in 0..(1usize << l) {
            let mut weight = 1.0;
            let mut flat = 0;
            for a in 0..l {
                let upper = (mask >> a) & 1 == 1;
                weight *= if upper { weights[a] } else { 1.0 - weights[a] };
                flat += (cells[a] + upper as usize) * self.strides[a];
            }
            if weight == 0.0 {
                continue;
            }
            let vals = &slice[flat * comps..(flat + 1) * comps];
            for (o, v) in out.iter_mut().zip(vals) {
                *o += weight * v;
            }
        }
        self.contains(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(min: f64, max: f64, nodes: usize) -> Lattice {
        Lattice::new(1.0, 4, vec![Axis { min, max, nodes }]).unwrap()
    }

    #[test]
    fn rejects_small_grids() {
        assert!(Lattice::new(
            1.0,
            1,
            vec![Axis {
                min: 0.0,
                max: 1.0,
                nodes: 3
            }]
        )
        .is_err());
        assert!(Lattice::new(
            1.0,
            2,
            vec![Axis {
                min: 0.0,
                max: 1.0,
                nodes: 2
            }]
        )
        .is_err());
        assert!(Lattice::new(
            0.0,
            2,
            vec![Axis {
                min: 0.0,
                max: 1.0,
                nodes: 3
            }]
        )
        .is_err());
        assert!(Lattice::new(
            1.0,
            2,
            vec![Axis {
                min: 1.0,
                max: 1.0,
                nodes: 3
            }]
        )
        .is_err());
    }

    #[test]
    fn time_index_uses_left_rule() {
        let lat = Lattice::new(
            1.0,
            10,
            vec![Axis {
                min: 0.0,
                max: 1.0,
                nodes: 3,
            }],
        )
        .unwrap();
        assert_eq!(lat.time_index(0.0).unwrap(), 0);
        assert_eq!(lat.time_index(0.3).unwrap(), 3);
        assert_eq!(lat.time_index(0.35).unwrap(), 3);
        assert_eq!(lat.time_index(0.999).unwrap(), 9);
        assert_eq!(lat.time_index(1.0).unwrap(), 10);
        assert!(lat.time_index(1.0 + 1e-9).is_err());
        assert!(lat.time_index(-1e-12).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        let lat = Lattice::new(
            1.0,
            2,
            vec![
                Axis {
                    min: 0.0,
                    max: 1.0,
                    nodes: 3,
                },
                Axis {
                    min: 0.0,
                    max: 2.0,
                    nodes: 5,
                },
            ],
        )
        .unwrap();
        assert_eq!(lat.strides(), &[5, 1]);
        assert_eq!(lat.multi_index(7), vec![1, 2]);
        assert_eq!(lat.node_point(7), vec![0.5, 1.0]);
    }

    #[test]
    fn clamp_and_extrapolate() {
        let vals = [0.0, 1.0, 4.0];
        let mut out = [0.0];
        let lat = line(0.0, 2.0, 3);
        assert!(!lat.interpolate(&vals, 1, &[3.0], &mut out));
        assert_eq!(out[0], 4.0);
        let lat = lat.with_out_of_box(OutOfBox::LinearExtrapolate);
        lat.interpolate(&vals, 1, &[3.0], &mut out);
        assert_eq!(out[0], 7.0);
        lat.interpolate(&vals, 1, &[-1.0], &mut out);
        assert_eq!(out[0], -1.0);
    }
}
