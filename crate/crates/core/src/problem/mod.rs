//! FBSDE problem instances.
//!
//! Vectors are flat `f64` slices. `z` values are `m × d` and `σ` values are
//! `l × d`, both row-major; their size is the Frobenius norm.

mod affine;
mod audit;

pub use affine::AffineCoefficients;
pub use audit::{audit_assumptions, check_degenerate_point, AssumptionAudit, LipschitzEstimates, SamplePlan};

use std::fmt;
use std::sync::Arc;

use crate::error::{FbsdeError, Result};

/// `(t, x, y, z, out)`: writes `σ(t, x, y, z)` (`l × d`) into `out`.
pub type SigmaFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, y, z, out)`: writes `f(t, x, y, z)` (`m`) into `out`.
pub type DriverFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(x, out)`: writes `φ(x)` (`m`) into `out`.
pub type TerminalFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
/// `(t, x, y, z, out)`: writes the optional drift `b(t, x, y, z)` (`l`) into `out`.
pub type DriftFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dimensions {
    /// Forward state dimension.
    pub l: usize,
    /// Backward value dimension.
    pub m: usize,
    /// Noise dimension.
    pub d: usize,
}

impl Dimensions {
    pub fn new(l: usize, m: usize, d: usize) -> Result<Self> {
        for (name, v) in [("l", l), ("m", m), ("d", d)] {
            if v == 0 {
                return Err(FbsdeError::param(name, "dimension must be at least 1"));
            }
        }
        Ok(Self { l, m, d })
    }

    pub fn sigma_len(&self) -> usize {
        self.l * self.d
    }

    pub fn z_len(&self) -> usize {
        self.m * self.d
    }
}

/// Lipschitz and Hölder constants a user may declare for a coefficient set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeclaredConstants {
    pub l_sigma_x: Option<f64>,
    pub l_sigma_y: Option<f64>,
    pub l_sigma_z: Option<f64>,
    pub l_f_y: Option<f64>,
    pub l_f_z: Option<f64>,
    pub l_phi_x: Option<f64>,
    pub lambda: Option<f64>,
}

impl DeclaredConstants {
    fn validate(&self) -> Result<()> {
        let entries = [
            ("L_sigma_x", self.l_sigma_x),
            ("L_sigma_y", self.l_sigma_y),
            ("L_sigma_z", self.l_sigma_z),
            ("L_f_y", self.l_f_y),
            ("L_f_z", self.l_f_z),
            ("L_phi_x", self.l_phi_x),
            ("Lambda", self.lambda),
        ];
        for (name, value) in entries {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(FbsdeError::param(
                        name,
                        format!("must be finite and nonnegative, got {v}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Pointwise evaluators for `σ`, `f`, `φ` plus declared constants and
/// user-declared degenerate candidates.
#[derive(Clone)]
pub struct CoefficientSet {
    sigma: Arc<SigmaFn>,
    driver: Arc<DriverFn>,
    terminal: Arc<TerminalFn>,
    pub declared: DeclaredConstants,
    pub degenerate_candidates: Vec<Vec<f64>>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("declared", &self.declared)
            .field("degenerate_candidates", &self.degenerate_candidates)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn new<S, F, P>(sigma: S, driver: F, terminal: P) -> Self
    where
        S: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        F: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        P: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            sigma: Arc::new(sigma),
            driver: Arc::new(driver),
            terminal: Arc::new(terminal),
            declared: DeclaredConstants::default(),
            degenerate_candidates: Vec::new(),
        }
    }

    pub fn with_declared(mut self, declared: DeclaredConstants) -> Self {
        self.declared = declared;
        self
    }

    pub fn with_degenerate_candidates(mut self, candidates: Vec<Vec<f64>>) -> Self {
        self.degenerate_candidates = candidates;
        self
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.sigma)(t, x, y, z, out)
    }

    #[inline]
    pub fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.driver)(t, x, y, z, out)
    }

    #[inline]
    pub fn terminal(&self, x: &[f64], out: &mut [f64]) {
        (self.terminal)(x, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(FbsdeError::param(
                "space_box",
                format!("need finite x_min < x_max, got [{min}, {max}]"),
            ));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.min <= x && x <= self.max
    }
}

/// A drift-less FBSDE instance on `[0, T]` with a computational box.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub dims: Dimensions,
    pub coeffs: CoefficientSet,
    pub horizon: f64,
    pub space_box: Vec<Interval>,
    drift: Option<DriftHandle>,
}

#[derive(Clone)]
struct DriftHandle(Arc<DriftFn>);

impl fmt::Debug for DriftHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DriftFn")
    }
}

impl ProblemSpec {
    pub fn new(
        dims: Dimensions,
        coeffs: CoefficientSet,
        horizon: f64,
        space_box: Vec<Interval>,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(FbsdeError::param(
                "horizon",
                format!("must be positive, got {horizon}"),
            ));
        }
        if space_box.len() != dims.l {
            return Err(FbsdeError::param(
                "space_box",
                format!("expected {} axes, got {}", dims.l, space_box.len()),
            ));
        }
        coeffs.declared.validate()?;
        for c in &coeffs.degenerate_candidates {
            if c.len() != dims.l {
                return Err(FbsdeError::param(
                    "degenerate_candidates",
                    format!("candidate {c:?} does not have length {}", dims.l),
                ));
            }
        }
        Ok(Self {
            dims,
            coeffs,
            horizon,
            space_box,
            drift: None,
        })
    }

    /// Adds a forward drift `b(t, x, y, z)`. Only the blow-up demonstration
    /// uses this; the main construction is drift-less.
    pub fn with_drift<B>(mut self, drift: B) -> Self
    where
        B: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift = Some(DriftHandle(Arc::new(drift)));
        self
    }

    pub fn has_drift(&self) -> bool {
        self.drift.is_some()
    }

    /// Writes the drift into `out`; returns false when the problem is drift-less.
    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> bool {
        match &self.drift {
            Some(b) => {
                (b.0)(t, x, y, z, out);
                true
            }
            None => false,
        }
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.space_box).all(|(xi, iv)| iv.contains(*xi))
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(FbsdeError::param(
                "horizon",
                format!("must be positive, got {horizon}"),
            ));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_space_box(mut self, space_box: Vec<Interval>) -> Result<Self> {
        if space_box.len() != self.dims.l {
            return Err(FbsdeError::param(
                "space_box",
                format!("expected {} axes, got {}", self.dims.l, space_box.len()),
            ));
        }
        self.space_box = space_box;
        Ok(self)
    }
}

pub(crate) fn fmt_point(t: Option<f64>, x: &[f64], y: &[f64], z: &[f64]) -> String {
    match t {
        Some(t) => format!("t={t}, x={x:?}, y={y:?}, z={z:?}"),
        None => format!("x={x:?}"),
    }
}
