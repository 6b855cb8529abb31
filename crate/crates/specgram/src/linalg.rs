//! Dense complex linear algebra used by the kernel solvers and samplers.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Result, SpecgramError};

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

/// Pivot magnitude below which a factorization is declared singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

/// LU factorization with partial pivoting, stored row-major.
#[derive(Debug, Clone)]
pub struct ComplexLu {
    dim: usize,
    lu: Vec<C64>,
    perm: Vec<usize>,
}

impl ComplexLu {
    /// Factors `m`; `context` names the system in the error raised for a tiny pivot.
    pub fn factor(m: &DMatrix<C64>, context: &str) -> Result<Self> {
        let dim = m.nrows();
        if m.ncols() != dim {
            return Err(SpecgramError::Validation(format!(
                "{context}: matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut lu = vec![C64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                lu[i * dim + j] = m[(i, j)];
            }
        }
        let mut perm: Vec<usize> = (0..dim).collect();
        for k in 0..dim {
            let (pivot_row, pivot_abs) = (k..dim)
                .map(|i| (i, lu[i * dim + k].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs < PIVOT_THRESHOLD {
                return Err(SpecgramError::LinearAlgebra {
                    context: context.to_string(),
                    index: k,
                    pivot: pivot_abs,
                });
            }
            if pivot_row != k {
                for j in 0..dim {
                    lu.swap(k * dim + j, pivot_row * dim + j);
                }
                perm.swap(k, pivot_row);
            }
            let inv_pivot = lu[k * dim + k].inv();
            let (head, tail) = lu.split_at_mut((k + 1) * dim);
            let pivot_row_vals = &head[k * dim..(k + 1) * dim];
            for row in tail.chunks_exact_mut(dim) {
                let factor = row[k] * inv_pivot;
                row[k] = factor;
                if factor != C64::new(0.0, 0.0) {
                    for j in (k + 1)..dim {
                        row[j] -= factor * pivot_row_vals[j];
                    }
                }
            }
        }
        Ok(Self { dim, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `M x = b` for the factored `M`.
    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let n = self.dim;
        let mut x: Vec<C64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..(i + 1) * n];
            let mut acc = x[i];
            for j in 0..i {
                acc -= row[j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= row[j] * x[j];
            }
            x[i] = acc / row[i];
        }
        x
    }

    /// Diagonal of `M⁻¹`, one column solve per entry.
    pub fn inverse_diagonal(&self) -> Vec<C64> {
        let n = self.dim;
        let mut e = vec![C64::new(0.0, 0.0); n];
        (0..n)
            .map(|j| {
                e[j] = C64::new(1.0, 0.0);
                let col = self.solve(&e);
                e[j] = C64::new(0.0, 0.0);
                col[j]
            })
            .collect()
    }
}

/// Pivots of an LU factorization without row exchanges.
///
/// The k-th pivot equals the ratio of the leading principal minors of orders
/// k+1 and k, which is what the triangular covariance recursion needs.
pub fn unpivoted_lu_pivots(m: &DMatrix<C64>, context: &str) -> Result<Vec<C64>> {
    let n = m.nrows();
    let mut a: Vec<C64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            a.push(m[(i, j)]);
        }
    }
    let mut pivots = Vec::with_capacity(n);
    for k in 0..n {
        let pivot = a[k * n + k];
        if pivot.norm() < PIVOT_THRESHOLD {
            return Err(SpecgramError::LinearAlgebra {
                context: context.to_string(),
                index: k,
                pivot: pivot.norm(),
            });
        }
        pivots.push(pivot);
        let inv_pivot = pivot.inv();
        let (head, tail) = a.split_at_mut((k + 1) * n);
        let pivot_row = &head[k * n..(k + 1) * n];
        for row in tail.chunks_exact_mut(n) {
            let factor = row[k] * inv_pivot;
            if factor != C64::new(0.0, 0.0) {
                for j in (k + 1)..n {
                    row[j] -= factor * pivot_row[j];
                }
            }
        }
    }
    Ok(pivots)
}

/// `I − A` for a square complex matrix.
pub fn identity_minus(a: &DMatrix<C64>) -> DMatrix<C64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        C64::new(delta, 0.0) - a[(i, j)]
    })
}

/// Hermitian matrix split into real and imaginary parts.
///
/// `imag` is `None` for real symmetric matrices, which keeps the real-model
/// paths free of complex arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    pub real: DMatrix<f64>,
    pub imag: Option<DMatrix<f64>>,
}

impl HermitianMatrix {
    /// Builds a Hermitian matrix from parts, rejecting asymmetry above 1e-8 (relative).
    pub fn new(real: DMatrix<f64>, imag: Option<DMatrix<f64>>) -> Result<Self> {
        let dim = real.nrows();
        if real.ncols() != dim || imag.as_ref().is_some_and(|m| m.shape() != (dim, dim)) {
            return Err(SpecgramError::Validation("Hermitian matrix must be square".into()));
        }
        let scale = real.amax().max(imag.as_ref().map_or(0.0, |m| m.amax())).max(1.0);
        let mut asym: f64 = 0.0;
        for i in 0..dim {
            for j in 0..i {
                asym = asym.max((real[(i, j)] - real[(j, i)]).abs());
                if let Some(im) = &imag {
                    asym = asym.max((im[(i, j)] + im[(j, i)]).abs());
                }
            }
            if let Some(im) = &imag {
                asym = asym.max(im[(i, i)].abs());
            }
        }
        if asym > 1e-8 * scale {
            return Err(SpecgramError::Validation(format!(
                "matrix is not Hermitian (asymmetry {asym:.3e})"
            )));
        }
        Ok(Self { real, imag })
    }

    /// Builds from a full complex matrix.
    pub fn from_complex(m: &DMatrix<C64>) -> Result<Self> {
        let real = m.map(|v| v.re);
        let imag = m.iter().any(|v| v.im != 0.0).then(|| m.map(|v| v.im));
        Self::new(real, imag)
    }

    pub fn dim(&self) -> usize {
        self.real.nrows()
    }

    pub fn to_complex(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            C64::new(self.real[(i, j)], self.imag.as_ref().map_or(0.0, |m| m[(i, j)]))
        })
    }

    pub fn trace(&self) -> f64 {
        self.real.trace()
    }

    /// `Tr M²`, the squared Frobenius norm.
    pub fn trace_of_square(&self) -> f64 {
        self.real.norm_squared() + self.imag.as_ref().map_or(0.0, |m| m.norm_squared())
    }

    /// Ascending eigenvalues.
    ///
    /// Complex matrices go through the real-symmetric embedding
    /// `[[Re, −Im], [Im, Re]]`, whose spectrum repeats each eigenvalue twice;
    /// every other entry of the sorted embedding spectrum is kept.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let dim = self.dim();
        match &self.imag {
            None => sorted(self.real.clone().symmetric_eigenvalues().iter().copied().collect()),
            Some(im) => {
                let embed = DMatrix::from_fn(2 * dim, 2 * dim, |i, j| {
                    let (bi, ri) = (i / dim, i % dim);
                    let (bj, rj) = (j / dim, j % dim);
                    match (bi, bj) {
                        (0, 0) | (1, 1) => self.real[(ri, rj)],
                        (0, 1) => -im[(ri, rj)],
                        _ => im[(ri, rj)],
                    }
                });
                let doubled = sorted(embed.symmetric_eigenvalues().iter().copied().collect());
                doubled
                    .chunks_exact(2)
                    .map(|pair| 0.5 * (pair[0] + pair[1]))
                    .collect()
            }
        }
    }

    /// `log det(I + M/scale)` through a Cholesky factorization.
    pub fn log_det_identity_plus(&self, scale: f64) -> Result<f64> {
        let dim = self.dim();
        let fail = || SpecgramError::Domain("I + M/scale is not positive definite".into());
        match &self.imag {
            None => {
                let m = DMatrix::from_fn(dim, dim, |i, j| {
                    self.real[(i, j)] / scale + if i == j { 1.0 } else { 0.0 }
                });
                let chol = m.cholesky().ok_or_else(fail)?;
                Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            }
            Some(_) => {
                let m = DMatrix::from_fn(dim, dim, |i, j| {
                    let base = C64::new(
                        self.real[(i, j)],
                        self.imag.as_ref().map_or(0.0, |im| im[(i, j)]),
                    ) / scale;
                    base + if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
                });
                let chol = m.cholesky().ok_or_else(fail)?;
                Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.re.ln()).sum::<f64>())
            }
        }
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn lu_solves_small_system() {
        let m = DMatrix::from_row_slice(3, 3, &[c(0.0, 1.0), c(2.0, 0.0), c(1.0, -1.0),
            c(1.0, 0.0), c(1.0, 1.0), c(0.0, 0.0), c(3.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let b = vec![c(1.0, 0.0), c(0.0, 2.0), c(-1.0, 1.0)];
        let lu = ComplexLu::factor(&m, "test").unwrap();
        let x = lu.solve(&b);
        let back = &m * nalgebra::DVector::from_vec(x);
        for i in 0..3 {
            assert!((back[i] - b[i]).norm() < 1e-13);
        }
        let inv = m.clone().try_inverse().unwrap();
        for (j, d) in lu.inverse_diagonal().iter().enumerate() {
            assert!((inv[(j, j)] - d).norm() < 1e-13);
        }
    }

    #[test]
    fn singular_system_is_reported() {
        let m = DMatrix::from_element(2, 2, c(1.0, 0.0));
        assert!(matches!(
            ComplexLu::factor(&m, "ones").unwrap_err(),
            SpecgramError::LinearAlgebra { index: 1, .. }
        ));
    }

    #[test]
    fn unpivoted_pivots_are_minor_ratios() {
        let m = DMatrix::from_row_slice(2, 2, &[c(2.0, 0.0), c(1.0, 1.0), c(0.5, 0.0), c(3.0, -1.0)]);
        let piv = unpivoted_lu_pivots(&m, "t").unwrap();
        assert_relative_eq!(piv[0].re, 2.0);
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        assert!((piv[1] - det / m[(0, 0)]).norm() < 1e-14);
    }

    #[test]
    fn identity_eigenvalues_and_rank_one() {
        let h = HermitianMatrix::new(DMatrix::identity(3, 3), Some(DMatrix::zeros(3, 3))).unwrap();
        for ev in h.eigenvalues() {
            assert_relative_eq!(ev, 1.0, epsilon = 1e-12);
        }
        let v = [c(1.0, 2.0), c(0.0, -1.0), c(3.0, 0.5)];
        let m = DMatrix::from_fn(3, 3, |i, j| v[i] * v[j].conj());
        let ev = HermitianMatrix::from_complex(&m).unwrap().eigenvalues();
        let norm2: f64 = v.iter().map(|x| x.norm_sqr()).sum();
        assert!(ev[0].abs() < 1e-12 && ev[1].abs() < 1e-12);
        assert_relative_eq!(ev[2], norm2, epsilon = 1e-12);
    }

    #[test]
    fn non_hermitian_rejected() {
        let re = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(HermitianMatrix::new(re, None).is_err());
    }

    #[test]
    fn log_det_matches_eigenvalues() {
        let v = [c(1.0, 2.0), c(0.0, -1.0), c(3.0, 0.5)];
        let w = [c(0.5, 0.0), c(1.0, 1.0), c(-1.0, 0.2)];
        let m = DMatrix::from_fn(3, 3, |i, j| v[i] * v[j].conj() + w[i] * w[j].conj());
        let h = HermitianMatrix::from_complex(&m).unwrap();
        let expected: f64 = h.eigenvalues().iter().map(|l| (1.0 + l / 2.0).ln()).sum();
        assert_relative_eq!(h.log_det_identity_plus(2.0).unwrap(), expected, epsilon = 1e-12);
    }
}
