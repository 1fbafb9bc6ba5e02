//! Dense kernels on symmetric positive definite matrices.
//!
//! Everything here goes through the symmetric eigendecomposition: square
//! roots, inverse square roots, the Sylvester equation `Y G + G Y = C` with
//! SPD coefficient, and the matrix geometric mean `A # B`. The dimensions we
//! care about are small (risk-factor counts), so no blocking or sparsity.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative symmetry tolerance accepted on ingestion.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest one are rejected.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// A symmetric positive definite matrix.
///
/// Construction checks symmetry (relative Frobenius tolerance) and the
/// spectrum; the stored matrix is exactly symmetrized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if let Some(msg) = spd_violation(&m) {
            return Err(Error::NotSpd(msg));
        }
        Ok(SpdMatrix(symmetrize(&m)))
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let v = nalgebra::DVector::from_column_slice(diag);
        Self::new(DMatrix::from_diagonal(&v))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    /// Applies `f` to the spectrum: `Q diag(f(λ)) Qᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let eig = self.eigen();
        spectral(&eig, f)
    }

    pub fn inverse(&self) -> SpdMatrix {
        SpdMatrix(symmetrize(&self.map_spectrum(|l| 1.0 / l)))
    }

    pub fn inv_sqrt(&self) -> SpdMatrix {
        SpdMatrix(symmetrize(&self.map_spectrum(|l| 1.0 / l.sqrt())))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().eigenvalues.min()
    }
}

impl TryFrom<DMatrix<f64>> for SpdMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        SpdMatrix::new(m)
    }
}

impl From<SpdMatrix> for DMatrix<f64> {
    fn from(s: SpdMatrix) -> Self {
        s.0
    }
}

impl AsRef<DMatrix<f64>> for SpdMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Returns a description of the first SPD invariant `m` violates, if any.
pub fn spd_violation(m: &DMatrix<f64>) -> Option<String> {
    if m.nrows() != m.ncols() {
        return Some(format!("not square ({}x{})", m.nrows(), m.ncols()));
    }
    if m.nrows() == 0 {
        return Some("empty matrix".into());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Some("non-finite entry".into());
    }
    let norm = m.norm();
    let asym = (m - m.transpose()).norm();
    if asym > SYMMETRY_TOL * norm.max(f64::MIN_POSITIVE) {
        return Some(format!("asymmetry {:.3e} relative to norm {:.3e}", asym, norm));
    }
    let eig = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if max <= 0.0 || min <= EIGEN_FLOOR * max {
        return Some(format!("eigenvalues in [{:.3e}, {:.3e}]", min, max));
    }
    None
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn spectral(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let fl = f(l);
        scaled.column_mut(j).scale_mut(fl);
    }
    scaled * q.transpose()
}

/// Principal square root.
pub fn sqrt_spd(a: &SpdMatrix) -> SpdMatrix {
    SpdMatrix(symmetrize(&a.map_spectrum(f64::sqrt)))
}

/// Square root of a matrix that should be SPD but is only known up to
/// roundoff, e.g. `B S B` for SPD `B`, `S`.
pub fn sqrt_psd_product(m: &DMatrix<f64>) -> Result<SpdMatrix> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= EIGEN_FLOOR * max {
        return Err(Error::Numerical(format!(
            "non-SPD iterate: eigenvalues in [{:.3e}, {:.3e}]",
            min, max
        )));
    }
    Ok(SpdMatrix(symmetrize(&spectral(&eig, f64::sqrt))))
}

/// Solves `Y G + G Y = C` for SPD `G`.
///
/// In the eigenbasis `G = Q Λ Qᵀ` the equation decouples entrywise:
/// `Ŷᵢⱼ = Ĉᵢⱼ / (λᵢ + λⱼ)` with `Ĉ = Qᵀ C Q`.
pub fn solve_sylvester_spd(g: &SpdMatrix, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    SylvesterSolver::new(g).solve(c)
}

/// A Sylvester solver with the eigendecomposition of `G` cached, for
/// repeated right-hand sides.
#[derive(Debug, Clone)]
pub struct SylvesterSolver {
    q: DMatrix<f64>,
    lambda: Vec<f64>,
}

impl SylvesterSolver {
    pub fn new(g: &SpdMatrix) -> Self {
        let eig = g.eigen();
        SylvesterSolver {
            q: eig.eigenvectors,
            lambda: eig.eigenvalues.iter().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn solve(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if c.nrows() != d || c.ncols() != d {
            return Err(Error::Dimension(format!(
                "Sylvester right-hand side is {}x{}, coefficient is {}x{}",
                c.nrows(),
                c.ncols(),
                d,
                d
            )));
        }
        let mut hat = self.q.transpose() * c * &self.q;
        for i in 0..d {
            for j in 0..d {
                hat[(i, j)] /= self.lambda[i] + self.lambda[j];
            }
        }
        Ok(&self.q * hat * self.q.transpose())
    }
}

/// Matrix geometric mean `A # B = A^{1/2} (A^{-1/2} B A^{-1/2})^{1/2} A^{1/2}`.
pub fn geometric_mean(a: &SpdMatrix, b: &SpdMatrix) -> Result<SpdMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "geometric mean of {}x{} and {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let ra = sqrt_spd(a);
    let ria = a.inv_sqrt();
    let inner = sqrt_psd_product(&(ria.as_matrix() * b.as_matrix() * ria.as_matrix()))?;
    let out = ra.as_matrix() * inner.as_matrix() * ra.as_matrix();
    Ok(SpdMatrix(symmetrize(&out)))
}

/// Frobenius norm of `Y G + G Y − C`.
pub fn sylvester_residual(g: &DMatrix<f64>, y: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    (y * g + g * y - c).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rotation(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = SpdMatrix::identity(3);
        assert_relative_eq!(sqrt_spd(&i).as_matrix(), i.as_matrix(), epsilon = 1e-15);
        let d = SpdMatrix::from_diagonal(&[4.0, 9.0]).unwrap();
        let r = sqrt_spd(&d);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert_relative_eq!(r.as_matrix(), &expect, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_of_rotated_diagonal() {
        let q = rotation(0.7);
        let a = &q * DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0]) * q.transpose();
        let r = sqrt_spd(&SpdMatrix::new(a.clone()).unwrap());
        let expect = &q * DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]) * q.transpose();
        assert_relative_eq!(r.as_matrix(), &expect, epsilon = 1e-13);
        assert!((r.as_matrix() * r.as_matrix() - &a).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn sylvester_scalar_and_identity() {
        let g = SpdMatrix::from_diagonal(&[3.0]).unwrap();
        let y = solve_sylvester_spd(&g, &DMatrix::from_element(1, 1, 12.0)).unwrap();
        assert_relative_eq!(y[(0, 0)], 2.0, epsilon = 1e-15);

        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 5.0]);
        let y = solve_sylvester_spd(&SpdMatrix::identity(2), &c).unwrap();
        assert_relative_eq!(y, c * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn geometric_mean_of_commuting_diagonals() {
        let a = SpdMatrix::from_diagonal(&[1.0, 4.0]).unwrap();
        let b = SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let g = geometric_mean(&a, &b).unwrap();
        assert_relative_eq!(g.as_matrix(), &DMatrix::from_element(1, 1, 2.0).kronecker(&DMatrix::identity(2, 2)), epsilon = 1e-14);
        let same = geometric_mean(&a, &a).unwrap();
        assert_relative_eq!(same.as_matrix(), a.as_matrix(), epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdMatrix::new(m).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(SpdMatrix::new(asym).is_err());
        let tiny = SpdMatrix::from_diagonal(&[1.0, 1e-14]);
        assert!(tiny.is_err());
    }
}
