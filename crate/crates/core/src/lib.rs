//! Decoupling-field Picard iteration for fully coupled drift-less
//! forward-backward SDEs
//!
//! ```text
//! X(r) = x + ∫ σ(s, X, Y, Z) dW
//! Y(r) = φ(X(T)) + ∫_r^T f(s, X, Y, Z) ds − ∫_r^T Z dW
//! ```
//!
//! The coupled system is attacked through a sequence of decoupling fields
//! `(u_n, v_n)` with `Y = u_n(·, X)` and `Z = v_n(·, X)`. Each outer step
//! freezes `(u_{n−1}, v_{n−1})` inside the diffusion, solves the resulting
//! decoupled BSDE on a space-time lattice by Gauss–Hermite backward
//! induction, and measures the stability quantities the construction relies
//! on: sup-distance between successive fields, Hölder-1/2 moduli, linear
//! growth, frozen degenerate points, the common-noise L¹ bound and the
//! dominated-property estimate.
//!
//! Module map:
//! - [`problem`]: problem instances, affine coefficient tables and the
//!   numerical assumption audit.
//! - [`fields`]: lattices, the field pair, interpolation, distance,
//!   regularity and CSV I/O.
//! - [`quadrature`]: Gauss–Hermite rules.
//! - [`noise`]: reproducible per-path Gaussian increments.
//! - [`forward`]: Euler–Maruyama under a frozen field, key-lemma estimate.
//! - [`backward`]: one outer iteration, dominated-property check.
//! - [`driver`]: the outer Picard loop, reports and solution assembly.
//! - [`bench`]: closed-form benchmark catalogue and random smooth problems.

pub mod backward;
pub mod bench;
pub mod driver;
pub mod error;
pub mod fields;
pub mod forward;
pub mod noise;
pub mod problem;
pub mod quadrature;

pub use error::{FbsdeError, Result};

pub(crate) mod linalg {
    /// Euclidean / Frobenius norm of a flat slice.
    pub fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(v: &[f64]) -> bool {
        v.iter().all(|a| a.is_finite())
    }

    /// Mean and standard error of a sample, summed in index order.
    pub fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
        let n = samples.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return (mean, 0.0);
        }
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }
}
