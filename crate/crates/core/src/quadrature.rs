//! Gauss–Hermite rules for expectations against the standard normal law.

use crate::error::{FbsdeError, Result};

/// A `q`-point Gauss–Hermite rule for `E[g(ξ)]`, `ξ ~ N(0, 1)`.
///
/// Exact for polynomials of degree `≤ 2q − 1`. Weights are normalized to
/// sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    abscissae: Vec<f64>,
    weights: Vec<f64>,
}

/// Tensor product of a 1-D rule over `d` independent normal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRule {
    pub dim: usize,
    /// `len × dim`, row-major.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TensorRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }
}

impl QuadratureRule {
    /// Nodes by Newton iteration on the orthonormal Hermite recurrence.
    pub fn gauss_hermite(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(FbsdeError::param("quadrature.nodes", "need at least one node"));
        }
        if q > 100 {
            return Err(FbsdeError::param(
                "quadrature.nodes",
                "at most 100 nodes are supported",
            ));
        }
        // π^{-1/4}
        const PIM4: f64 = 0.751_125_544_464_942_5;
        let n = q;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => {
                    let nf = (2 * n + 1) as f64;
                    nf.sqrt() - 1.855_75 * nf.powf(-0.166_67)
                }
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        // physicists' weight e^{-x²} → standard normal: ξ = √2 x
        let total: f64 = w.iter().sum();
        let mut pairs: Vec<(f64, f64)> = x
            .iter()
            .zip(&w)
            .map(|(xi, wi)| (xi * std::f64::consts::SQRT_2, wi / total))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            abscissae: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    /// Rule from explicit nodes and weights (weights are renormalized).
    pub fn from_nodes(abscissae: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if abscissae.is_empty() || abscissae.len() != weights.len() {
            return Err(FbsdeError::param(
                "quadrature",
                "need matching nonempty nodes and weights",
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(FbsdeError::param("quadrature", "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            abscissae,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn abscissae(&self) -> &[f64] {
        &self.abscissae
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.abscissae
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * g(*x))
            .sum()
    }

    pub fn tensor(&self, dim: usize) -> TensorRule {
        let q = self.len();
        let count = q.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        for k in 0..count {
            let mut rest = k;
            let mut w = 1.0;
            for _ in 0..dim {
                let idx = rest % q;
                rest /= q;
                points.push(self.abscissae[idx]);
                w *= self.weights[idx];
            }
            weights.push(w);
        }
        TensorRule { dim, points, weights }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        (1..k).step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn three_point_rule_matches_closed_form() {
        let r = QuadratureRule::gauss_hermite(3).unwrap();
        let s3 = 3f64.sqrt();
        for (a, b) in r.abscissae().iter().zip([-s3, 0.0, s3]) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in r.weights().iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_on_polynomials_up_to_degree_2q_minus_1() {
        for q in [1, 2, 3, 5, 8, 12, 20] {
            let r = QuadratureRule::gauss_hermite(q).unwrap();
            assert!(r.weights().iter().all(|w| *w > 0.0));
            assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for k in 0..(2 * q as u32) {
                let got = r.expect(|x| x.powi(k as i32));
                let want = double_factorial_moment(k);
                let scale = double_factorial_moment(k + k % 2);
                assert!(
                    (got - want).abs() <= 1e-11 * scale,
                    "q={q} k={k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn tensor_rule_covers_cross_moments() {
        let r = QuadratureRule::gauss_hermite(4).unwrap().tensor(2);
        assert_eq!(r.len(), 16);
        let mut e = [0.0; 3];
        for k in 0..r.len() {
            let p = r.point(k);
            e[0] += r.weights[k] * p[0] * p[1];
            e[1] += r.weights[k] * p[0] * p[0] * p[1] * p[1];
            e[2] += r.weights[k];
        }
        assert!(e[0].abs() < 1e-14);
        assert!((e[1] - 1.0).abs() < 1e-13);
        assert!((e[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_rules() {
        assert!(QuadratureRule::gauss_hermite(0).is_err());
        assert!(QuadratureRule::from_nodes(vec![0.0], vec![-1.0]).is_err());
        assert!(QuadratureRule::from_nodes(vec![0.0, 1.0], vec![1.0]).is_err());
    }
}
