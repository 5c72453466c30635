//! Conductivity tensors and per-element conductivity fields.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fem::grid::{ellipsoid_point, StructuredGrid};

/// Symmetric `dim × dim` tensor stored in the top-left block of a 3×3 array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tensor {
    pub dim: usize,
    pub m: [[f64; 3]; 3],
}

impl Tensor {
    pub fn zeros(dim: usize) -> Self {
        Tensor { dim, m: [[0.0; 3]; 3] }
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            t.m[i][i] = s;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut t = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            t.m[i][i] = v;
        }
        t
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut t = *self;
        for row in t.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        t
    }

    /// `D g` for a gradient `g` (only the first `dim` entries are used).
    pub fn apply(&self, g: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[i] += self.m[i][j] * g[j];
            }
        }
        out
    }

    fn to_matrix(self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.m[i][j])
    }

    fn from_matrix(mat: &DMatrix<f64>) -> Self {
        let mut t = Self::zeros(mat.nrows());
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                t.m[i][j] = mat[(i, j)];
            }
        }
        t
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.to_matrix().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut a: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                a = a.max((self.m[i][j] - self.m[j][i]).abs());
            }
        }
        a
    }

    fn max_abs(&self) -> f64 {
        self.m.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// `σ_t I + (σ_l − σ_t) a aᵀ` for a unit fiber direction `a` (length = dim).
pub fn transverse_iso_tensor(sigma_l: f64, sigma_t: f64, fiber: &[f64]) -> Result<Tensor> {
    let dim = fiber.len();
    if dim != 2 && dim != 3 {
        return Err(Error::invalid(format!("fiber must have 2 or 3 components, got {dim}")));
    }
    if !(sigma_l > 0.0 && sigma_t > 0.0) {
        return Err(Error::invalid("conductivities must be positive"));
    }
    let norm = fiber.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("fiber direction is not unit length (|a| = {norm})")));
    }
    let mut t = Tensor::scalar(dim, sigma_t);
    for i in 0..dim {
        for j in 0..dim {
            t.m[i][j] += (sigma_l - sigma_t) * fiber[i] * fiber[j];
        }
    }
    Ok(t)
}

/// Harmonic combination `D_i (D_i + D_e)^{-1} D_e`.
///
/// Evaluated in the eigenframe shared by both tensors, where each eigenvalue is
/// `σ_i σ_e / (σ_i + σ_e)`. Falls back to the direct product when the frames
/// do not coincide.
pub fn monodomain_tensor(di: &Tensor, de: &Tensor) -> Result<Tensor> {
    if di.dim != de.dim {
        return Err(Error::invalid("tensor dimensions differ"));
    }
    let dim = di.dim;
    let (mi, me) = (di.to_matrix(), de.to_matrix());
    let sum = &mi + &me;
    let scale = di.max_abs().max(de.max_abs());
    let det = sum.determinant();
    if !det.is_finite() || det.abs() <= 1e-300 || det.abs() < (1e-14 * scale).powi(dim as i32) {
        return Err(Error::numeric("D_i + D_e is singular"));
    }

    // Frame from the more anisotropic tensor, so a degenerate partner stays diagonal in it.
    let spread = |t: &Tensor| {
        let ev = t.eigenvalues();
        ev[ev.len() - 1] - ev[0]
    };
    let frame_src = if spread(di) >= spread(de) { &mi } else { &me };
    let q = frame_src.clone().symmetric_eigen().eigenvectors;
    let ri = q.transpose() * &mi * &q;
    let re = q.transpose() * &me * &q;
    let off = |m: &DMatrix<f64>| {
        let mut o: f64 = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    o = o.max(m[(i, j)].abs());
                }
            }
        }
        o
    };
    let result = if off(&ri) <= 1e-12 * scale && off(&re) <= 1e-12 * scale {
        let mut d = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let (si, se) = (ri[(k, k)], re[(k, k)]);
            if si + se <= 0.0 {
                return Err(Error::numeric("D_i + D_e has a non-positive eigenvalue"));
            }
            d[(k, k)] = si * se / (si + se);
        }
        &q * d * q.transpose()
    } else {
        let inv = sum
            .try_inverse()
            .ok_or_else(|| Error::numeric("D_i + D_e is singular"))?;
        let p = &mi * inv * &me;
        (&p + p.transpose()) * 0.5
    };
    let mut t = Tensor::from_matrix(&result);
    // Symmetrize exactly.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (t.m[i][j] + t.m[j][i]);
            t.m[i][j] = v;
            t.m[j][i] = v;
        }
    }
    Ok(t)
}

/// One constant tensor per element, plus the fiber used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    pub tensors: Vec<Tensor>,
    pub fibers: Vec<[f64; 3]>,
}

impl ConductivityField {
    pub fn uniform(grid: &StructuredGrid, t: Tensor) -> Self {
        ConductivityField {
            tensors: vec![t; grid.n_elements()],
            fibers: vec![[1.0, 0.0, 0.0]; grid.n_elements()],
        }
    }

    pub fn transversely_isotropic(
        grid: &StructuredGrid,
        sigma_l: f64,
        sigma_t: f64,
        fibers: &[[f64; 3]],
    ) -> Result<Self> {
        if fibers.len() != grid.n_elements() {
            return Err(Error::invalid("one fiber per element required"));
        }
        let dim = grid.dim();
        let tensors = fibers
            .iter()
            .map(|f| transverse_iso_tensor(sigma_l, sigma_t, &f[..dim]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConductivityField {
            tensors,
            fibers: fibers.to_vec(),
        })
    }

    pub fn monodomain(di: &Self, de: &Self) -> Result<Self> {
        if di.tensors.len() != de.tensors.len() {
            return Err(Error::invalid("field lengths differ"));
        }
        let tensors = di
            .tensors
            .iter()
            .zip(&de.tensors)
            .map(|(a, b)| monodomain_tensor(a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConductivityField {
            tensors,
            fibers: di.fibers.clone(),
        })
    }

    pub fn scaled(&self, s: f64) -> Self {
        ConductivityField {
            tensors: self.tensors.iter().map(|t| t.scaled(s)).collect(),
            fibers: self.fibers.clone(),
        }
    }
}

/// Default fibers: along x in 2D, tangent to the φ coordinate lines on the shell.
pub fn default_fibers(grid: &StructuredGrid) -> Vec<[f64; 3]> {
    let n = grid.n_elements();
    match (grid.geometry(), grid.curvilinear_coords()) {
        (Some(geom), Some(curv)) => (0..n)
            .map(|e| {
                let ids = grid.element(e);
                let mut c = [0.0; 3];
                for &id in ids {
                    for d in 0..3 {
                        c[d] += curv[id][d] / ids.len() as f64;
                    }
                }
                let [theta, r, phi] = c;
                let eps = 1e-6;
                let p1 = ellipsoid_point(r, theta, phi + eps, geom);
                let p0 = ellipsoid_point(r, theta, phi - eps, geom);
                let t = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                [t[0] / norm, t[1] / norm, t[2] / norm]
            })
            .collect(),
        _ => vec![[1.0, 0.0, 0.0]; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn intracellular_tensor_along_x() {
        let t = transverse_iso_tensor(3e-3, 3.1525e-4, &[1.0, 0.0]).unwrap();
        assert_eq!(t.m[0][0], 3e-3);
        assert_eq!(t.m[1][1], 3.1525e-4);
        assert_eq!(t.m[0][1], 0.0);
    }

    #[test]
    fn isotropic_limit_and_rotated_fiber() {
        let t = transverse_iso_tensor(0.7, 0.7, &[0.6, 0.8]).unwrap();
        assert!((t.m[0][0] - 0.7).abs() < 1e-15 && (t.m[1][1] - 0.7).abs() < 1e-15);
        assert!(t.m[0][1].abs() < 1e-15);
        let t = transverse_iso_tensor(2.0, 1.0, &[0.0, 1.0]).unwrap();
        assert_eq!(t.m[0][0], 1.0);
        assert_eq!(t.m[1][1], 2.0);
        assert_eq!(t.m[0][1], 0.0);
        assert!(transverse_iso_tensor(2.0, 1.0, &[1.0, 0.1]).is_err());
    }

    #[test]
    fn monodomain_from_published_conductivities() {
        let di = Tensor::diag(&[3e-3, 3.1525e-4]);
        let de = Tensor::diag(&[2e-3, 1.3514e-3]);
        let dm = monodomain_tensor(&di, &de).unwrap();
        assert!((dm.m[0][0] - 1.2e-3).abs() < 1e-7);
        assert!((dm.m[1][1] - 2.5562e-4).abs() < 1e-7);
        assert!(dm.m[0][1].abs() < 1e-18);
    }

    #[test]
    fn monodomain_equal_and_proportional() {
        let d = transverse_iso_tensor(2.0, 0.5, &[0.6, 0.8]).unwrap();
        let half = monodomain_tensor(&d, &d).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((half.m[i][j] - d.m[i][j] / 2.0).abs() < 1e-14);
            }
        }
        let lambda = 3.0;
        let dm = monodomain_tensor(&d.scaled(lambda), &d).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((dm.m[i][j] - lambda / (1.0 + lambda) * d.m[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn monodomain_scalar_multiples_exact() {
        for (a, b) in [(3.0, 5.0), (1e-3, 7e-4), (0.3, 0.3)] {
            for dim in [2, 3] {
                let dm = monodomain_tensor(&Tensor::scalar(dim, a), &Tensor::scalar(dim, b)).unwrap();
                let expect = a * b / (a + b);
                for i in 0..dim {
                    for j in 0..dim {
                        let e = if i == j { expect } else { 0.0 };
                        assert_eq!(dm.m[i][j], e);
                    }
                }
            }
        }
    }

    #[test]
    fn singular_sum_rejected() {
        let z = Tensor::zeros(2);
        assert!(matches!(monodomain_tensor(&z, &z), Err(Error::NumericFailure(_))));
    }

    proptest! {
        #[test]
        fn transverse_iso_eigenvalues(sl in 0.01f64..5.0, st in 0.01f64..5.0,
                                      th in 0.0f64..6.3, ph in 0.0f64..3.1) {
            let a = [ph.sin() * th.cos(), ph.sin() * th.sin(), ph.cos()];
            let t = transverse_iso_tensor(sl, st, &a).unwrap();
            // Characteristic polynomial roots: st (double) and sl.
            let m = t.m;
            let tr = m[0][0] + m[1][1] + m[2][2];
            let minors = m[0][0] * m[1][1] - m[0][1] * m[1][0]
                + m[0][0] * m[2][2] - m[0][2] * m[2][0]
                + m[1][1] * m[2][2] - m[1][2] * m[2][1];
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            let scale = sl.max(st);
            prop_assert!((tr - (sl + 2.0 * st)).abs() < 1e-12 * scale);
            prop_assert!((minors - (2.0 * sl * st + st * st)).abs() < 1e-12 * scale * scale);
            prop_assert!((det - sl * st * st).abs() < 1e-12 * scale.powi(3));
            let char_at = |x: f64| x.powi(3) - tr * x * x + minors * x - det;
            prop_assert!(char_at(sl).abs() < 1e-12 * scale.powi(3));
            prop_assert!(char_at(st).abs() < 1e-12 * scale.powi(3));
        }
    }
}
