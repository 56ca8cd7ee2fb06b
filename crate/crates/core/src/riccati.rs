//! Differential Riccati equation for `∇²V(t, 0, 0)` and the covariance
//! equation of the Kalman–Bucy filter and the EKF.
//!
//! With `B(t) = −A − M(x̃(t))`,
//!
//! ```text
//! Π' = Π B + Bᵀ Π − Π F Fᵀ Π + α Cᵀ C,   Π(0) = I.
//! ```
//!
//! For `G = 0`, `P = α Π⁻¹` solves `P' = A P + P Aᵀ + α F Fᵀ − P Cᵀ C P`,
//! `P(0) = α I`, and `K = P Cᵀ` is the Kalman–Bucy gain.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{is_positive, Error, Result};
use crate::model::SystemModel;
use crate::ode::{TimeGrid, Trajectory};

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub pi: Vec<DMatrix<f64>>,
    pub min_eigs: Vec<f64>,
    /// `‖Π − Πᵀ‖_F` after each step, before symmetrization.
    pub symmetry_drift: Vec<f64>,
}

impl RiccatiSolution {
    pub fn at_node(&self, k: usize) -> &DMatrix<f64> {
        &self.pi[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdReport {
    pub min_eigenvalue: f64,
    pub first_violation: Option<usize>,
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// One RK4 step of a matrix ODE.
pub(crate) fn rk4_matrix_step<F>(field: &F, t: f64, p: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = field(t, p);
    let k2 = field(t + 0.5 * h, &(p + &k1 * (0.5 * h)));
    let k3 = field(t + 0.5 * h, &(p + &k2 * (0.5 * h)));
    let k4 = field(t + h, &(p + &k3 * h));
    p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Right-hand side `J P + P Jᵀ + α F Fᵀ − P Cᵀ C P` of the filter covariance.
pub(crate) fn covariance_field(model: &SystemModel, jac: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let ct = model.c.transpose();
    let pct = p * &ct;
    jac * p + p * jac.transpose() + &model.f * model.f.transpose() * model.alpha - &pct * pct.transpose()
}

/// RK4 integration of the DRE along `x_tilde` on `grid`, symmetrizing
/// after every step.
pub fn solve_dre(model: &SystemModel, x_tilde: &Trajectory, grid: &TimeGrid) -> Result<RiccatiSolution> {
    x_tilde.check_dim(model.n(), "nominal")?;
    let xg = x_tilde.grid();
    if grid.t_start() < xg.t_start() - 1e-12 || grid.t_end() > xg.t_end() + 1e-12 {
        return Err(Error::OutOfRange {
            t: grid.t_end(),
            start: xg.t_start(),
            end: xg.t_end(),
        });
    }
    let n = model.n();
    let fft = &model.f * model.f.transpose();
    let ctc = model.c.transpose() * &model.c * model.alpha;
    let field = |s: f64, pi: &DMatrix<f64>| -> DMatrix<f64> {
        let b = -(&model.a + model.g.bilinearize(&x_tilde.at(s)).expect("state dimension"));
        let pb = pi * &b;
        &pb + pb.transpose() - pi * &fft * pi + &ctc
    };
    let h = grid.dt();
    let mut pi = DMatrix::identity(n, n);
    let mut out = Vec::with_capacity(grid.len());
    let mut eigs = Vec::with_capacity(grid.len());
    let mut drift = Vec::with_capacity(grid.len());
    eigs.push(1.0);
    drift.push(0.0);
    out.push(pi.clone());
    for k in 0..grid.steps() {
        let next = rk4_matrix_step(&field, grid.node(k), &pi, h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { node: k + 1 });
        }
        drift.push((&next - next.transpose()).norm());
        pi = symmetrize(&next);
        eigs.push(min_eigenvalue(&pi));
        out.push(pi.clone());
    }
    Ok(RiccatiSolution {
        grid: *grid,
        pi: out,
        min_eigs: eigs,
        symmetry_drift: drift,
    })
}

/// Smallest eigenvalue over all nodes and the first node where it is not
/// strictly positive.
pub fn pd_monitor(sol: &RiccatiSolution) -> PdReport {
    let min_eigenvalue = sol.min_eigs.iter().copied().fold(f64::INFINITY, f64::min);
    let first_violation = sol.min_eigs.iter().position(|&e| !is_positive(e));
    PdReport {
        min_eigenvalue,
        first_violation,
    }
}

/// Kalman–Bucy covariance and gains on `grid`.
#[derive(Debug, Clone)]
pub struct KalmanBucyGains {
    pub grid: TimeGrid,
    pub covariance: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

/// Covariance `P` and gain `K = P Cᵀ` of the Kalman–Bucy filter. Only
/// defined for `G = 0`.
pub fn kalman_bucy_gain(model: &SystemModel, grid: &TimeGrid) -> Result<KalmanBucyGains> {
    if !model.g.is_zero() {
        return Err(Error::InvalidArgument("Kalman-Bucy gains need G = 0"));
    }
    let n = model.n();
    let field = |_: f64, p: &DMatrix<f64>| covariance_field(model, &model.a, p);
    let mut p = DMatrix::identity(n, n) * model.alpha;
    let ct = model.c.transpose();
    let mut covariance = Vec::with_capacity(grid.len());
    let mut gains = Vec::with_capacity(grid.len());
    gains.push(&p * &ct);
    covariance.push(p.clone());
    for k in 0..grid.steps() {
        p = symmetrize(&rk4_matrix_step(&field, grid.node(k), &p, grid.dt()));
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { node: k + 1 });
        }
        gains.push(&p * &ct);
        covariance.push(p.clone());
    }
    Ok(KalmanBucyGains {
        grid: *grid,
        covariance,
        gains,
    })
}
