//! State estimators in shifted coordinates.
//!
//! * Mortensen observer: `x̂' = h(t, x̂) + α ∇²V(t, x̂, ω)⁻¹ Cᵀ (ω − C x̂)`,
//!   `x̂(0) = 0`, stepped with Heun so that every stage sits on a node.
//! * Argmin observer: `x̂(t) = argmin_ξ V(t, ξ, ω)` by damped Newton.
//! * EKF and Kalman–Bucy: covariance filter with `P(0) = α I`, integrated
//!   in the same shifted coordinates (the Kalman–Bucy filter is the EKF
//!   code path restricted to `G = 0`).
//!
//! All runs return `x̂` in shifted coordinates together with `x̂ + x̃`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{shift_output, Nominal, SystemModel};
use crate::ode::Trajectory;
use crate::riccati::{covariance_field, min_eigenvalue, rk4_matrix_step, symmetrize};
use crate::value::{HessianMethod, ValueFunction, ValueOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverMethod {
    Mortensen,
    Argmin,
    Ekf,
    KalmanBucy,
}

impl ObserverMethod {
    pub const ALL: [ObserverMethod; 4] = [
        ObserverMethod::Mortensen,
        ObserverMethod::Argmin,
        ObserverMethod::Ekf,
        ObserverMethod::KalmanBucy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObserverMethod::Mortensen => "mortensen",
            ObserverMethod::Argmin => "argmin",
            ObserverMethod::Ekf => "ekf",
            ObserverMethod::KalmanBucy => "kalman_bucy",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObserverOptions {
    pub value: ValueOptions,
    /// Gradient tolerance of the argmin Newton iteration.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    /// Bound on `‖x̂(t)‖`; the first crossing is recorded, not fatal.
    pub validity_radius: f64,
    /// Reuse the first-stage Hessian in the second Heun stage.
    pub frozen_hessian: bool,
    /// Diagonal shift applied to non-positive-definite Hessians. Off by
    /// default, in which case such a Hessian ends the run.
    pub regularization: Option<f64>,
}

impl Default for ObserverOptions {
    fn default() -> Self {
        Self {
            value: ValueOptions::default(),
            newton_tol: 1e-8,
            newton_max_iters: 50,
            validity_radius: 1.0,
            frozen_hessian: false,
            regularization: None,
        }
    }
}

impl ObserverOptions {
    pub fn with_hessian_method(mut self, method: HessianMethod) -> Self {
        self.value.hessian_method = method;
        self
    }
}

/// Per-node diagnostics. Node 0 carries the closed-form initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// `‖∇_ξ V(t, x̂(t), ω)‖` where available, otherwise the innovation norm.
    pub grad_residual: f64,
    /// Smallest eigenvalue of the Hessian (or covariance) used at the node.
    pub hessian_min_eig: f64,
    pub inner_iterations: usize,
    pub step_accepted: bool,
    /// Diagonal shift that was applied, zero if none.
    pub regularization: f64,
}

#[derive(Debug, Clone)]
pub struct ObserverRun {
    pub method: ObserverMethod,
    pub x_hat: Trajectory,
    pub x_hat_original: Trajectory,
    pub per_step: Vec<StepDiagnostics>,
    pub bound_violation: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationError {
    pub sup_error: f64,
    pub l2_error: f64,
    pub terminal_error: f64,
}

fn finish(
    method: ObserverMethod,
    nominal: &Nominal,
    values: Vec<DVector<f64>>,
    per_step: Vec<StepDiagnostics>,
    radius: f64,
) -> Result<ObserverRun> {
    let bound_violation = values.iter().position(|x| x.norm() > radius);
    let x_hat = Trajectory::new(*nominal.grid(), values)?;
    let x_hat_original = unshift(&x_hat, nominal.trajectory())?;
    Ok(ObserverRun {
        method,
        x_hat,
        x_hat_original,
        per_step,
        bound_violation,
    })
}

struct Correction {
    value: DVector<f64>,
    diag: StepDiagnostics,
}

/// Solves `H z = b` for a symmetric `H` by Cholesky. A Hessian that is not
/// positive definite is a validity exit unless a diagonal shift is allowed;
/// returns the solution, the applied shift and the smallest eigenvalue.
fn spd_solve(
    hess: DMatrix<f64>,
    rhs: &DVector<f64>,
    node: usize,
    regularization: Option<f64>,
) -> Result<(DVector<f64>, f64, f64)> {
    let min_eig = min_eigenvalue(&hess);
    let exit = Error::ValidityExit {
        node,
        monitor: "hessian_min_eigenvalue",
        value: min_eig,
    };
    if min_eig > 0.0 {
        if let Some(ch) = hess.clone().cholesky() {
            return Ok((ch.solve(rhs), 0.0, min_eig));
        }
    }
    let Some(delta) = regularization else {
        return Err(exit);
    };
    let shift = delta - min_eig.min(0.0);
    let n = hess.nrows();
    let ch = (hess + DMatrix::identity(n, n) * shift).cholesky().ok_or(exit)?;
    Ok((ch.solve(rhs), shift, min_eig))
}

/// `α H⁻¹ Cᵀ (ω − C x)` with `H = ∇²V(t, x, ω)`.
fn observer_correction(
    vf: &ValueFunction<'_>,
    node: usize,
    x: &DVector<f64>,
    opts: &ObserverOptions,
) -> Result<(Correction, DMatrix<f64>)> {
    let model = vf.model();
    let hess = vf.hessian_at(node, x)?.matrix;
    let rhs = model.c.transpose() * (vf.omega().value(node) - &model.c * x) * model.alpha;
    let (value, shift, min_eig) = spd_solve(hess.clone(), &rhs, node, opts.regularization)?;
    let (grad_residual, iterations) = if node == 0 {
        (x.norm(), 0)
    } else {
        let sol = vf.solve(node, x)?;
        (sol.value_gradient().norm(), sol.iterations)
    };
    let correction = Correction {
        value,
        diag: StepDiagnostics {
            grad_residual,
            hessian_min_eig: min_eig,
            inner_iterations: iterations,
            step_accepted: true,
            regularization: shift,
        },
    };
    Ok((correction, hess))
}

/// Integrates the Mortensen observer from `x̂(0) = 0` on the nominal grid.
pub fn mortensen_observe(
    model: &SystemModel,
    nominal: &Nominal,
    omega: &Trajectory,
    opts: &ObserverOptions,
) -> Result<ObserverRun> {
    let vf = ValueFunction::new(model, nominal, omega.clone(), opts.value.clone())?;
    let grid = *nominal.grid();
    let h = grid.dt();
    let n = model.n();
    let mut x = DVector::zeros(n);
    let mut values = Vec::with_capacity(grid.len());
    let mut per_step = Vec::with_capacity(grid.len());
    values.push(x.clone());
    for k in 0..grid.steps() {
        let t0 = grid.node(k);
        let t1 = grid.node(k + 1);
        let (c1, hess1) = observer_correction(&vf, k, &x, opts)?;
        let f1 = nominal.shifted_drift(model, t0, &x) + &c1.value;
        let pred = &x + &f1 * h;
        let f2 = if opts.frozen_hessian {
            let rhs = model.c.transpose() * (omega.value(k + 1) - &model.c * &pred) * model.alpha;
            let (z, _, _) = spd_solve(hess1, &rhs, k, opts.regularization)?;
            nominal.shifted_drift(model, t1, &pred) + z
        } else {
            let (c2, _) = observer_correction(&vf, k + 1, &pred, opts)?;
            nominal.shifted_drift(model, t1, &pred) + c2.value
        };
        per_step.push(c1.diag);
        x = &x + (f1 + f2) * (0.5 * h);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { node: k + 1 });
        }
        values.push(x.clone());
    }
    let last = grid.steps();
    let tail = match observer_correction(&vf, last, &x, opts) {
        Ok((c, _)) => c.diag,
        Err(Error::ValidityExit { value, .. }) => StepDiagnostics {
            grad_residual: f64::NAN,
            hessian_min_eig: value,
            inner_iterations: 0,
            step_accepted: false,
            regularization: 0.0,
        },
        Err(e) => return Err(e),
    };
    per_step.push(tail);
    finish(ObserverMethod::Mortensen, nominal, values, per_step, opts.validity_radius)
}

/// Minimizes `V(t, ·, ω)` at every node by damped Newton, warm-started
/// from the previous minimizer.
pub fn argmin_observe(
    model: &SystemModel,
    nominal: &Nominal,
    omega: &Trajectory,
    opts: &ObserverOptions,
) -> Result<ObserverRun> {
    let vf = ValueFunction::new(model, nominal, omega.clone(), opts.value.clone())?;
    let grid = *nominal.grid();
    let n = model.n();
    let mut xi = DVector::zeros(n);
    let mut values = Vec::with_capacity(grid.len());
    let mut per_step = Vec::with_capacity(grid.len());
    values.push(xi.clone());
    per_step.push(StepDiagnostics {
        grad_residual: 0.0,
        hessian_min_eig: 1.0,
        inner_iterations: 0,
        step_accepted: true,
        regularization: 0.0,
    });
    for k in 1..grid.len() {
        let (next, diag) = newton_at(&vf, k, xi, opts)?;
        xi = next;
        values.push(xi.clone());
        per_step.push(diag);
    }
    finish(ObserverMethod::Argmin, nominal, values, per_step, opts.validity_radius)
}

fn newton_at(
    vf: &ValueFunction<'_>,
    node: usize,
    start: DVector<f64>,
    opts: &ObserverOptions,
) -> Result<(DVector<f64>, StepDiagnostics)> {
    let mut xi = start;
    let mut iterations = 0;
    let mut min_eig = f64::NAN;
    let mut all_accepted = true;
    loop {
        let sol = vf.solve(node, &xi)?;
        let grad = sol.value_gradient();
        let gnorm = grad.norm();
        if gnorm <= opts.newton_tol {
            return Ok((
                xi,
                StepDiagnostics {
                    grad_residual: gnorm,
                    hessian_min_eig: min_eig,
                    inner_iterations: iterations,
                    step_accepted: all_accepted,
                    regularization: 0.0,
                },
            ));
        }
        if iterations >= opts.newton_max_iters {
            return Err(Error::ValidityExit {
                node,
                monitor: "newton_gradient_norm",
                value: gnorm,
            });
        }
        iterations += 1;
        let hess = vf.hessian_at(node, &xi)?.matrix;
        min_eig = min_eigenvalue(&hess);
        let newton = if min_eig > 0.0 {
            hess.cholesky().map(|ch| -ch.solve(&grad))
        } else {
            None
        };
        let value = sol.cost;
        let accepted = match newton {
            Some(dir) => damped_step(vf, node, &xi, &dir, value, gnorm, 1.0)?,
            None => None,
        };
        let next = match accepted {
            Some(x) => x,
            None => {
                all_accepted = false;
                let dir = -&grad;
                damped_step(vf, node, &xi, &dir, value, gnorm, 1.0)?.ok_or(Error::ValidityExit {
                    node,
                    monitor: "hessian_min_eigenvalue",
                    value: min_eig,
                })?
            }
        };
        xi = next;
    }
}

/// Backtracks along `dir` until `V` or `‖∇V‖` decreases.
fn damped_step(
    vf: &ValueFunction<'_>,
    node: usize,
    xi: &DVector<f64>,
    dir: &DVector<f64>,
    value: f64,
    gnorm: f64,
    mut step: f64,
) -> Result<Option<DVector<f64>>> {
    for _ in 0..30 {
        let trial = xi + dir * step;
        match vf.solve(node, &trial) {
            Ok(sol) => {
                if sol.cost < value || sol.value_gradient().norm() < gnorm {
                    return Ok(Some(trial));
                }
            }
            Err(Error::NonConvergence { .. } | Error::Divergence { .. }) => {}
            Err(e) => return Err(e),
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Extended Kalman filter driven by the measured output `y`.
///
/// Each step predicts the estimate with an Euler stage, advances the
/// covariance by RK4 along the interpolated estimate, and corrects the
/// estimate with the trapezoidal (Heun) rule.
pub fn ekf_observe(model: &SystemModel, nominal: &Nominal, y: &Trajectory) -> Result<ObserverRun> {
    run_covariance_filter(model, nominal, y, ObserverMethod::Ekf)
}

/// Kalman–Bucy filter; requires `G = 0`.
pub fn kalman_bucy_observe(model: &SystemModel, nominal: &Nominal, y: &Trajectory) -> Result<ObserverRun> {
    if !model.g.is_zero() {
        return Err(Error::InvalidArgument("Kalman-Bucy filter needs G = 0"));
    }
    run_covariance_filter(model, nominal, y, ObserverMethod::KalmanBucy)
}

fn run_covariance_filter(
    model: &SystemModel,
    nominal: &Nominal,
    y: &Trajectory,
    method: ObserverMethod,
) -> Result<ObserverRun> {
    let omega = shift_output(y, nominal, model)?;
    let grid = *nominal.grid();
    let h = grid.dt();
    let n = model.n();
    let ct = model.c.transpose();
    let jacobian = |t: f64, e: &DVector<f64>| -> DMatrix<f64> {
        &model.a + model.g.bilinearize(&(nominal.at(t) + e)).expect("state dimension")
    };
    let field = |t: f64, e: &DVector<f64>, p: &DMatrix<f64>, w: &DVector<f64>| -> (DVector<f64>, f64) {
        let innovation = w - &model.c * e;
        let inorm = innovation.norm();
        (nominal.shifted_drift(model, t, e) + p * &ct * innovation, inorm)
    };

    let mut e = DVector::zeros(n);
    let mut p = DMatrix::identity(n, n) * model.alpha;
    let mut values = Vec::with_capacity(grid.len());
    let mut per_step = Vec::with_capacity(grid.len());
    values.push(e.clone());
    for k in 0..grid.steps() {
        let t0 = grid.node(k);
        let t1 = grid.node(k + 1);
        let (f1, inorm) = field(t0, &e, &p, omega.value(k));
        let pred = &e + &f1 * h;
        let (e0, de) = (e.clone(), &pred - &e);
        let cov = |s: f64, p: &DMatrix<f64>| {
            let along = &e0 + &de * ((s - t0) / h);
            covariance_field(model, &jacobian(s, &along), p)
        };
        let p_next = symmetrize(&rk4_matrix_step(&cov, t0, &p, h));
        per_step.push(StepDiagnostics {
            grad_residual: inorm,
            hessian_min_eig: min_eigenvalue(&p),
            inner_iterations: 0,
            step_accepted: true,
            regularization: 0.0,
        });
        let (f2, _) = field(t1, &pred, &p_next, omega.value(k + 1));
        e = &e + (f1 + f2) * (0.5 * h);
        p = p_next;
        if e.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { node: k + 1 });
        }
        values.push(e.clone());
    }
    per_step.push(StepDiagnostics {
        grad_residual: (omega.last() - &model.c * &e).norm(),
        hessian_min_eig: min_eigenvalue(&p),
        inner_iterations: 0,
        step_accepted: true,
        regularization: 0.0,
    });
    finish(method, nominal, values, per_step, f64::INFINITY)
}

/// `x̂ + x̃` nodewise.
pub fn unshift(x_hat: &Trajectory, x_tilde: &Trajectory) -> Result<Trajectory> {
    Ok(x_hat.add(x_tilde)?.without_derivatives())
}

/// Norms of `x̂ + x̃ − x_truth`.
pub fn estimation_error(run: &ObserverRun, truth: &Trajectory) -> Result<EstimationError> {
    let diff = run.x_hat_original.sub(truth)?;
    Ok(EstimationError {
        sup_error: diff.sup_norm(),
        l2_error: diff.l2_norm(),
        terminal_error: diff.last().norm(),
    })
}
