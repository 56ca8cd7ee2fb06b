//! Kronecker-structured quadratic terms `G (x ⊗ z)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The quadratic part `G (x ⊗ x)` of the dynamics.
///
/// `G` is stored densely as an `n × n²` matrix; column `i·n + j` is the
/// coefficient of `xᵢ·xⱼ`. `G (x ⊗ z)` and `G (z ⊗ x)` are kept distinct,
/// no symmetrization is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    n: usize,
    g: DMatrix<f64>,
}

impl QuadraticForm {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        let n = g.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("quadratic form needs n >= 1"));
        }
        if g.ncols() != n * n {
            return Err(Error::dim("quadratic form columns", n * n, g.ncols()));
        }
        Ok(Self { n, g })
    }

    /// Builds `G` from row-major entries (`n · n²` values).
    pub fn from_row_slice(n: usize, entries: &[f64]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("quadratic form needs n >= 1"));
        }
        if entries.len() != n * n * n {
            return Err(Error::dim("quadratic form entries", n * n * n, entries.len()));
        }
        Self::new(DMatrix::from_row_slice(n, n * n, entries))
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            g: DMatrix::zeros(n, n * n),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn is_zero(&self) -> bool {
        self.g.iter().all(|&v| v == 0.0)
    }

    /// Spectral norm `‖G‖₂`.
    pub fn norm2(&self) -> f64 {
        let gg = &self.g * self.g.transpose();
        libm::sqrt(gg.symmetric_eigenvalues().max().max(0.0))
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::dim("quadratic form argument", self.n, x.len()));
        }
        Ok(())
    }

    /// `G (x ⊗ z)` without the symmetric counterpart.
    fn apply_kron(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                let w = x[i] * z[j];
                if w == 0.0 {
                    continue;
                }
                let col = i * n + j;
                for r in 0..n {
                    out[r] += self.g[(r, col)] * w;
                }
            }
        }
        out
    }

    /// `G (x ⊗ x)`.
    pub fn eval_quadratic(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(self.apply_kron(x, x))
    }

    /// `G (x ⊗ z) + G (z ⊗ x)`, the directional derivative of
    /// [`eval_quadratic`](Self::eval_quadratic) at `x` along `z`.
    pub fn eval_bilinear(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        self.check(z)?;
        Ok(self.apply_kron(x, z) + self.apply_kron(z, x))
    }

    /// `M(x) = G (x ⊗ Iₙ) + G (Iₙ ⊗ x)`, so that `M(x) z = eval_bilinear(x, z)`.
    pub fn bilinearize(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        // (x ⊗ I) e_k has x_i at index i·n + k; (I ⊗ x) e_k has x_j at k·n + j.
        for k in 0..n {
            for l in 0..n {
                let a = self.g.column(l * n + k);
                let b = self.g.column(k * n + l);
                let w = x[l];
                if w == 0.0 {
                    continue;
                }
                for r in 0..n {
                    m[(r, k)] += (a[r] + b[r]) * w;
                }
            }
        }
        Ok(m)
    }

    /// Symmetric matrix `N(ρ)` with `M(x)ᵀ ρ = N(ρ) x`; the Hessian of
    /// `x ↦ ⟨ρ, G (x ⊗ x)⟩`.
    pub fn adjoint_curvature(&self, rho: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(rho)?;
        let n = self.n;
        let weights = self.g.transpose() * rho;
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            for j in 0..n {
                m[(k, j)] = weights[j * n + k] + weights[k * n + j];
            }
        }
        Ok(m)
    }
}
