//! The value function `V(t, ξ, ω)` and its spatial derivatives.
//!
//! `V` is the optimal cost of [`crate::ocp`]; `∇_ξ V = −p(t)` and the
//! Hessian comes column by column from the linear-quadratic KKT system
//! linearized at the optimum. A [`ValueFunction`] fixes the model, the
//! nominal trajectory and one output signal `ω`, and caches solves by
//! `(node, ξ)`.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use spin::Mutex;

use crate::error::{is_positive, Error, Result};
use crate::model::{Nominal, SystemModel};
use crate::ocp::{solve_lq_kkt, solve_ocp, KktData, OcpInstance, OcpSolution, SolverOptions};
use crate::ode::{trapezoid, Trajectory};
use crate::riccati::min_eigenvalue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMethod {
    /// One linear-quadratic KKT solve per column.
    Kkt,
    /// Central differences of the gradient.
    FiniteDiff,
}

#[derive(Debug, Clone)]
pub struct ValueOptions {
    pub solver: SolverOptions,
    pub hessian_method: HessianMethod,
    /// Step for finite-difference Hessians.
    pub fd_step: f64,
    /// Bound on `‖ω‖_{L²(0,T)}`; larger signals leave the region where the
    /// estimator is known to be well defined.
    pub validity_radius: Option<f64>,
}

impl Default for ValueOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            hessian_method: HessianMethod::Kkt,
            fd_step: 1e-4,
            validity_radius: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianEval {
    /// Symmetrized Hessian.
    pub matrix: DMatrix<f64>,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` before symmetrization.
    pub asymmetry: f64,
}

impl HessianEval {
    /// Asymmetry large enough to suggest an ill-conditioned solve.
    pub fn conditioning_warning(&self) -> bool {
        self.asymmetry > 1e-4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDiagnostics {
    pub min_eigenvalue: f64,
    /// `‖H⁻¹‖₂`, infinite for singular Hessians.
    pub inverse_norm: f64,
    pub ocp_iterations: usize,
    pub asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueProbe {
    pub t: f64,
    pub xi: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub method: HessianMethod,
    pub diagnostics: ProbeDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbResidual {
    /// Central difference of `V` in time.
    pub dv_dt: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Both sides of the dynamic-programming split of `V(t + τ, ξ, ω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanSplit {
    pub direct: f64,
    pub split: f64,
}

impl BellmanSplit {
    pub fn gap(&self) -> f64 {
        (self.direct - self.split).abs()
    }
}

type CacheKey = (usize, Vec<i64>);

fn cache_key(node: usize, xi: &DVector<f64>) -> CacheKey {
    (node, xi.iter().map(|v| libm::round(v * 1e12) as i64).collect())
}

/// `V(·, ·, ω)` for one fixed output signal.
#[derive(Debug)]
pub struct ValueFunction<'a> {
    model: &'a SystemModel,
    nominal: &'a Nominal,
    omega: Trajectory,
    opts: ValueOptions,
    cache: Mutex<BTreeMap<CacheKey, Arc<OcpSolution>>>,
    warm: Mutex<BTreeMap<usize, Trajectory>>,
}

impl<'a> ValueFunction<'a> {
    pub fn new(
        model: &'a SystemModel,
        nominal: &'a Nominal,
        omega: Trajectory,
        opts: ValueOptions,
    ) -> Result<Self> {
        omega.check_dim(model.r(), "omega")?;
        Trajectory::zeros(*nominal.grid(), 1).check_grid(&omega, "omega grid")?;
        opts.solver.validate()?;
        if !is_positive(opts.fd_step) {
            return Err(Error::InvalidArgument("fd_step must be positive"));
        }
        if let Some(radius) = opts.validity_radius {
            let size = omega.l2_norm();
            if size.is_nan() || size > radius {
                return Err(Error::ValidityExit {
                    node: 0,
                    monitor: "omega_norm",
                    value: size,
                });
            }
        }
        Ok(Self {
            model,
            nominal,
            omega,
            opts,
            cache: Mutex::new(BTreeMap::new()),
            warm: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }

    pub fn nominal(&self) -> &'a Nominal {
        self.nominal
    }

    pub fn omega(&self) -> &Trajectory {
        &self.omega
    }

    pub fn options(&self) -> &ValueOptions {
        &self.opts
    }

    /// Grid node of `t`.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        let g = self.nominal.grid();
        g.node_index(t).ok_or(Error::OutOfRange {
            t,
            start: g.t_start(),
            end: g.t_end(),
        })
    }

    fn check_xi(&self, xi: &DVector<f64>) -> Result<()> {
        if xi.len() != self.model.n() {
            return Err(Error::dim("xi", self.model.n(), xi.len()));
        }
        Ok(())
    }

    pub fn instance(&self, node: usize, xi: DVector<f64>) -> Result<OcpInstance<'a>> {
        OcpInstance::new(self.model, self.nominal, node, xi, &self.omega)
    }

    /// Converged control-problem solution at `(node, ξ)`, cached.
    pub fn solve(&self, node: usize, xi: &DVector<f64>) -> Result<Arc<OcpSolution>> {
        self.check_xi(xi)?;
        let key = cache_key(node, xi);
        if let Some(hit) = self.cache.lock().get(&key) {
            return Ok(hit.clone());
        }
        let inst = self.instance(node, xi.clone())?;
        let mut solver = self.opts.solver.clone();
        if solver.warm_start.is_none() {
            solver.warm_start = self.nearest_warm_start(node);
        }
        let sol = solve_ocp(&inst, &solver)?;
        if !sol.converged {
            return Err(Error::NonConvergence {
                iterations: sol.iterations,
                grad_norm: sol.grad_norm,
            });
        }
        self.warm.lock().insert(node, sol.v_bar.clone());
        let sol = Arc::new(sol);
        self.cache.lock().insert(key, sol.clone());
        Ok(sol)
    }

    fn nearest_warm_start(&self, node: usize) -> Option<Trajectory> {
        let warm = self.warm.lock();
        let below = warm.range(..=node).next_back();
        let above = warm.range(node..).next();
        match (below, above) {
            (Some((kb, vb)), Some((ka, va))) => Some(if node - kb <= ka - node { vb } else { va }.clone()),
            (Some((_, v)), None) | (None, Some((_, v))) => Some(v.clone()),
            (None, None) => None,
        }
    }

    pub fn clear_cache(&self) {
        self.cache.lock().clear();
    }

    pub fn evaluate_at(&self, node: usize, xi: &DVector<f64>) -> Result<f64> {
        self.check_xi(xi)?;
        if node == 0 {
            return Ok(0.5 * xi.norm_squared());
        }
        Ok(self.solve(node, xi)?.cost)
    }

    pub fn gradient_at(&self, node: usize, xi: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_xi(xi)?;
        if node == 0 {
            return Ok(xi.clone());
        }
        Ok(self.solve(node, xi)?.value_gradient())
    }

    pub fn hessian_at(&self, node: usize, xi: &DVector<f64>) -> Result<HessianEval> {
        self.hessian_with(node, xi, self.opts.hessian_method)
    }

    pub fn hessian_with(&self, node: usize, xi: &DVector<f64>, method: HessianMethod) -> Result<HessianEval> {
        self.check_xi(xi)?;
        let n = self.model.n();
        if node == 0 {
            return Ok(HessianEval {
                matrix: DMatrix::identity(n, n),
                asymmetry: 0.0,
            });
        }
        let raw = match method {
            HessianMethod::Kkt => self.kkt_hessian(node, xi)?,
            HessianMethod::FiniteDiff => self.fd_hessian(node, xi)?,
        };
        let scale = raw.norm();
        let asymmetry = if scale > 0.0 {
            (&raw - raw.transpose()).norm() / scale
        } else {
            0.0
        };
        Ok(HessianEval {
            matrix: (&raw + raw.transpose()) * 0.5,
            asymmetry,
        })
    }

    fn kkt_hessian(&self, node: usize, xi: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sol = self.solve(node, xi)?;
        let inst = self.instance(node, xi.clone())?;
        let n = self.model.n();
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut a = DVector::zeros(n);
            a[j] = 1.0;
            let kkt = solve_lq_kkt(&inst, &sol.x_bar, &sol.p, &KktData::terminal(&inst, a))?;
            h.set_column(j, &(-kkt.q.last()));
        }
        Ok(h)
    }

    fn fd_hessian(&self, node: usize, xi: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.model.n();
        let step = self.opts.fd_step;
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut plus = xi.clone();
            plus[j] += step;
            let mut minus = xi.clone();
            minus[j] -= step;
            let col = (self.gradient_at(node, &plus)? - self.gradient_at(node, &minus)?) / (2.0 * step);
            h.set_column(j, &col);
        }
        Ok(h)
    }

    pub fn evaluate(&self, t: f64, xi: &DVector<f64>) -> Result<f64> {
        self.evaluate_at(self.node_of(t)?, xi)
    }

    pub fn gradient(&self, t: f64, xi: &DVector<f64>) -> Result<DVector<f64>> {
        self.gradient_at(self.node_of(t)?, xi)
    }

    pub fn hessian(&self, t: f64, xi: &DVector<f64>) -> Result<HessianEval> {
        self.hessian_at(self.node_of(t)?, xi)
    }

    /// `|∂ₜV − RHS|` at an interior node, with `∂ₜV` a central difference
    /// over one grid step.
    pub fn hjb_residual_at(&self, node: usize, xi: &DVector<f64>) -> Result<HjbResidual> {
        self.check_xi(xi)?;
        let grid = self.nominal.grid();
        if node == 0 || node >= grid.steps() {
            return Err(Error::InvalidArgument("HJB residual needs an interior node"));
        }
        let dv_dt = (self.evaluate_at(node + 1, xi)? - self.evaluate_at(node - 1, xi)?) / (2.0 * grid.dt());
        let t = grid.node(node);
        let grad = self.gradient_at(node, xi)?;
        let drift = self.nominal.shifted_drift(self.model, t, xi);
        let misfit = self.omega.value(node) - &self.model.c * xi;
        let rhs = -grad.dot(&drift) - 0.5 * (self.model.f.transpose() * &grad).norm_squared()
            + 0.5 * self.model.alpha * misfit.norm_squared();
        Ok(HjbResidual {
            dv_dt,
            rhs,
            residual: (dv_dt - rhs).abs(),
        })
    }

    pub fn hjb_residual(&self, t: f64, xi: &DVector<f64>) -> Result<HjbResidual> {
        self.hjb_residual_at(self.node_of(t)?, xi)
    }

    /// `V(t + τ, ξ)` against `V(t, x̄(t) − x̃(t))` plus the running cost of
    /// the `(t + τ)`-optimal pair over `[t, t + τ]`.
    pub fn bellman_split(&self, node: usize, later: usize, xi: &DVector<f64>) -> Result<BellmanSplit> {
        if later <= node {
            return Err(Error::InvalidArgument("Bellman split needs a later node"));
        }
        let sol = self.solve(later, xi)?;
        let offset = sol.x_bar.value(node) - self.nominal.trajectory().value(node);
        let head = self.evaluate_at(node, &offset)?;
        let grid = self.nominal.grid().truncate(later)?;
        let alpha = self.model.alpha;
        let tail = trapezoid(
            &grid,
            (0..=later).map(|k| {
                if k < node {
                    return 0.0;
                }
                let e = sol.x_bar.value(k) - self.nominal.trajectory().value(k);
                sol.v_bar.value(k).norm_squared()
                    + alpha * (self.omega.value(k) - &self.model.c * e).norm_squared()
            }),
        );
        // the trapezoid weight at `node` must be a boundary weight
        let dt = grid.dt();
        let correction = if node > 0 {
            let e = sol.x_bar.value(node) - self.nominal.trajectory().value(node);
            let f = sol.v_bar.value(node).norm_squared()
                + alpha * (self.omega.value(node) - &self.model.c * e).norm_squared();
            -0.5 * dt * f
        } else {
            0.0
        };
        Ok(BellmanSplit {
            direct: sol.cost,
            split: head + 0.5 * (tail + correction),
        })
    }

    pub fn probe_at(&self, node: usize, xi: &DVector<f64>) -> Result<ValueProbe> {
        self.check_xi(xi)?;
        let t = self.nominal.grid().node(node);
        let value = self.evaluate_at(node, xi)?;
        let grad = self.gradient_at(node, xi)?;
        let hess = self.hessian_at(node, xi)?;
        let iterations = if node == 0 { 0 } else { self.solve(node, xi)?.iterations };
        let min_eig = min_eigenvalue(&hess.matrix);
        let max_abs_inv = hess
            .matrix
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .map(|e| e.abs())
            .fold(f64::INFINITY, f64::min);
        Ok(ValueProbe {
            t,
            xi: xi.clone(),
            value,
            grad,
            hessian: hess.matrix,
            method: self.opts.hessian_method,
            diagnostics: ProbeDiagnostics {
                min_eigenvalue: min_eig,
                inverse_norm: 1.0 / max_abs_inv,
                ocp_iterations: iterations,
                asymmetry: hess.asymmetry,
            },
        })
    }

    pub fn probe(&self, t: f64, xi: &DVector<f64>) -> Result<ValueProbe> {
        self.probe_at(self.node_of(t)?, xi)
    }
}
