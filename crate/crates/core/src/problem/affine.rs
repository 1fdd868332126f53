use super::{CoefficientSet, DeclaredConstants, Dimensions};
use crate::error::{FbsdeError, Result};

/// Affine coefficient tables.
///
/// Matrices are row-major. `σ` is flattened to its `l·d` entries and `z` to
/// its `m·d` entries, so for instance `sigma_z` has shape `(l·d) × (m·d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoefficients {
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub sigma_z: Vec<f64>,
    pub sigma_offset: Vec<f64>,
    pub driver_x: Vec<f64>,
    pub driver_y: Vec<f64>,
    pub driver_z: Vec<f64>,
    pub driver_offset: Vec<f64>,
    pub terminal_x: Vec<f64>,
    pub terminal_offset: Vec<f64>,
}

impl AffineCoefficients {
    /// All-zero tables of the right shapes.
    pub fn zeros(dims: Dimensions) -> Self {
        let (l, m) = (dims.l, dims.m);
        let (sl, zl) = (dims.sigma_len(), dims.z_len());
        Self {
            sigma_x: vec![0.0; sl * l],
            sigma_y: vec![0.0; sl * m],
            sigma_z: vec![0.0; sl * zl],
            sigma_offset: vec![0.0; sl],
            driver_x: vec![0.0; m * l],
            driver_y: vec![0.0; m * m],
            driver_z: vec![0.0; m * zl],
            driver_offset: vec![0.0; m],
            terminal_x: vec![0.0; m * l],
            terminal_offset: vec![0.0; m],
        }
    }

    fn check_shapes(&self, dims: Dimensions) -> Result<()> {
        let (l, m) = (dims.l, dims.m);
        let (sl, zl) = (dims.sigma_len(), dims.z_len());
        let expected = [
            ("sigma.x", self.sigma_x.len(), sl * l),
            ("sigma.y", self.sigma_y.len(), sl * m),
            ("sigma.z", self.sigma_z.len(), sl * zl),
            ("sigma.offset", self.sigma_offset.len(), sl),
            ("driver.x", self.driver_x.len(), m * l),
            ("driver.y", self.driver_y.len(), m * m),
            ("driver.z", self.driver_z.len(), m * zl),
            ("driver.offset", self.driver_offset.len(), m),
            ("terminal.x", self.terminal_x.len(), m * l),
            ("terminal.offset", self.terminal_offset.len(), m),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(FbsdeError::param(
                    name,
                    format!("expected {want} entries for dims {dims:?}, got {got}"),
                ));
            }
        }
        if let Some(bad) = self.all_entries().find(|v| !v.is_finite()) {
            return Err(FbsdeError::param("affine", format!("non-finite entry {bad}")));
        }
        Ok(())
    }

    fn all_entries(&self) -> impl Iterator<Item = &f64> {
        self.sigma_x
            .iter()
            .chain(&self.sigma_y)
            .chain(&self.sigma_z)
            .chain(&self.sigma_offset)
            .chain(&self.driver_x)
            .chain(&self.driver_y)
            .chain(&self.driver_z)
            .chain(&self.driver_offset)
            .chain(&self.terminal_x)
            .chain(&self.terminal_offset)
    }

    /// Builds the evaluators. Declared constants are the Frobenius norms of
    /// the linear blocks, which bound the operator norms from above.
    pub fn into_coefficients(self, dims: Dimensions) -> Result<CoefficientSet> {
        self.check_shapes(dims)?;
        let fro = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let declared = DeclaredConstants {
            l_sigma_x: Some(fro(&self.sigma_x)),
            l_sigma_y: Some(fro(&self.sigma_y)),
            l_sigma_z: Some(fro(&self.sigma_z)),
            l_f_y: Some(fro(&self.driver_y)),
            l_f_z: Some(fro(&self.driver_z)),
            l_phi_x: Some(fro(&self.terminal_x)),
            lambda: None,
        };
        let (sx, sy, sz, s0) = (self.sigma_x, self.sigma_y, self.sigma_z, self.sigma_offset);
        let (fx, fy, fz, f0) = (self.driver_x, self.driver_y, self.driver_z, self.driver_offset);
        let (px, p0) = (self.terminal_x, self.terminal_offset);
        let set = CoefficientSet::new(
            move |_t, x, y, z, out| affine_apply(&[(&sx, x), (&sy, y), (&sz, z)], &s0, out),
            move |_t, x, y, z, out| affine_apply(&[(&fx, x), (&fy, y), (&fz, z)], &f0, out),
            move |x, out| affine_apply(&[(&px, x)], &p0, out),
        );
        Ok(set.with_declared(declared))
    }
}

fn affine_apply(blocks: &[(&Vec<f64>, &[f64])], offset: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = offset[r];
        for (mat, arg) in blocks {
            let cols = arg.len();
            let row = &mat[r * cols..(r + 1) * cols];
            acc += row.iter().zip(arg.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        *o = acc;
    }
}
