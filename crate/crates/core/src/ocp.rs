//! The energy-minimization control problem behind `V(t, ξ, ω)`.
//!
//! For a grid node `t` the problem is
//!
//! ```text
//! min ½‖x(0) − x0‖² + ½ ∫₀ᵗ ‖v‖² + α ‖ω − C (x − x̃)‖² ds
//! s.t. x' = A x + G (x ⊗ x) + F v,   x(t) = x̃(t) + ξ.
//! ```
//!
//! It is solved in reduced form over the control: the state comes from a
//! final-value solve, the adjoint from a forward solve, and `v + Fᵀp` is
//! the L² gradient of the reduced cost. The state is integrated as the
//! deviation `e = x − x̃`, so `ξ = 0, v = 0` reproduces `x̃` exactly.
//!
//! [`solve_lq_kkt`] solves the linear-quadratic KKT system whose solutions
//! are the sensitivities of the optimal triple; the value-function Hessian
//! is built from it.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{is_positive, Error, Result};
use crate::model::{Nominal, SystemModel};
use crate::ode::{integrate_fvp, integrate_ivp, trapezoid, TimeGrid, Trajectory};

/// One instance of the control problem, posed on the model grid truncated
/// at the node `t`.
#[derive(Debug, Clone)]
pub struct OcpInstance<'a> {
    model: &'a SystemModel,
    nominal: &'a Nominal,
    node: usize,
    grid: TimeGrid,
    xi: DVector<f64>,
    omega: Trajectory,
}

impl<'a> OcpInstance<'a> {
    /// `omega` may be given on the full model grid or already truncated;
    /// it is truncated to `[0, node]`.
    pub fn new(
        model: &'a SystemModel,
        nominal: &'a Nominal,
        node: usize,
        xi: DVector<f64>,
        omega: &Trajectory,
    ) -> Result<Self> {
        if node == 0 {
            return Err(Error::InvalidArgument("control problem needs t > 0"));
        }
        if xi.len() != model.n() {
            return Err(Error::dim("xi", model.n(), xi.len()));
        }
        omega.check_dim(model.r(), "omega")?;
        let grid = nominal.grid().truncate(node)?;
        if omega.grid().steps() < node {
            return Err(Error::dim("omega samples", node + 1, omega.grid().len()));
        }
        let omega = omega.truncate(node)?;
        Trajectory::zeros(grid, 1).check_grid(&omega, "omega grid")?;
        Ok(Self {
            model,
            nominal,
            node,
            grid,
            xi,
            omega,
        })
    }

    /// Instance at time `t`, which must be a grid node in `(0, T]`.
    pub fn at_time(
        model: &'a SystemModel,
        nominal: &'a Nominal,
        t: f64,
        xi: DVector<f64>,
        omega: &Trajectory,
    ) -> Result<Self> {
        let g = nominal.grid();
        let node = g.node_index(t).ok_or(Error::OutOfRange {
            t,
            start: g.t_start(),
            end: g.t_end(),
        })?;
        Self::new(model, nominal, node, xi, omega)
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }

    pub fn nominal(&self) -> &'a Nominal {
        self.nominal
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn t(&self) -> f64 {
        self.grid.t_end()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn omega(&self) -> &Trajectory {
        &self.omega
    }

    /// Same problem with a different terminal offset.
    pub fn with_xi(&self, xi: DVector<f64>) -> Self {
        Self { xi, ..self.clone() }
    }

    /// `x̃` restricted to the instance grid.
    pub fn nominal_part(&self) -> Trajectory {
        self.nominal
            .trajectory()
            .truncate(self.node)
            .expect("node inside nominal grid")
    }

    fn check_control(&self, v: &Trajectory) -> Result<()> {
        v.check_dim(self.model.m(), "control")?;
        Trajectory::zeros(self.grid, 1).check_grid(v, "control grid")
    }
}

/// Step selection for the reduced-gradient iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DescentMode {
    /// Steepest descent with Armijo backtracking (spectral initial step).
    Armijo,
    /// Damped fixed point `v ← (1 − θ) v − θ Fᵀp`.
    FixedPoint { theta: f64 },
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    pub mode: DescentMode,
    pub warm_start: Option<Trajectory>,
    /// Upper bound on `max(‖ξ‖, ‖ω‖_{L²})`; `None` disables the check.
    pub validity_radius: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iters: 500,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
            mode: DescentMode::Armijo,
            warm_start: None,
            validity_radius: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !is_positive(self.grad_tol) {
            return Err(Error::InvalidArgument("grad_tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument("shrink must lie in (0, 1)"));
        }
        if let DescentMode::FixedPoint { theta } = self.mode {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(Error::InvalidArgument("theta must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Optimal triple with diagnostics.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub x_bar: Trajectory,
    pub v_bar: Trajectory,
    pub p: Trajectory,
    pub cost: f64,
    /// L² norm of `v̄ + Fᵀp`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations accepted by the Armijo test (cost non-increasing).
    pub armijo_steps: usize,
    /// Iterations accepted on residual decrease once the cost decrease
    /// could no longer be resolved.
    pub residual_steps: usize,
}

impl OcpSolution {
    /// `∇_ξ V(t, ξ, ω) = −p(t)`.
    pub fn value_gradient(&self) -> DVector<f64> {
        -self.p.last()
    }
}

/// Deviation `e = x − x̃` for the control `v`: `e' = h(s, e) + F v`, `e(t) = ξ`.
fn deviation(inst: &OcpInstance<'_>, v: &Trajectory) -> Result<Trajectory> {
    let model = inst.model;
    let nominal = inst.nominal;
    let v = v.clone().with_estimated_derivatives();
    integrate_fvp(
        |s, e| nominal.shifted_drift(model, s, e) + &model.f * v.at(s),
        &inst.xi,
        &inst.grid,
    )
}

fn cost_of_deviation(inst: &OcpInstance<'_>, e: &Trajectory, v: &Trajectory) -> f64 {
    let model = inst.model;
    let running = trapezoid(
        &inst.grid,
        e.values()
            .iter()
            .zip(v.values())
            .zip(inst.omega.values())
            .map(|((e, v), w)| v.norm_squared() + model.alpha * (w - &model.c * e).norm_squared()),
    );
    0.5 * e.first().norm_squared() + 0.5 * running
}

fn adjoint_of_deviation(inst: &OcpInstance<'_>, e: &Trajectory) -> Result<Trajectory> {
    let model = inst.model;
    let nominal = inst.nominal;
    let ct_alpha = model.c.transpose() * model.alpha;
    integrate_ivp(
        |s, p| {
            let es = e.at(s);
            let xbar = nominal.at(s) + &es;
            let jac = &model.a + model.g.bilinearize(&xbar).expect("state dimension");
            -(jac.transpose() * p) + &ct_alpha * (inst.omega.at(s) - &model.c * es)
        },
        &(-e.first()),
        &inst.grid,
    )
}

fn gradient_of(inst: &OcpInstance<'_>, v: &Trajectory, p: &Trajectory) -> Trajectory {
    let ft = inst.model.f.transpose();
    v.zip_with(p, |v, p| v + &ft * p).expect("shared grid")
}

/// `J(x, v; t, ω)` with trapezoidal quadrature.
pub fn cost(x: &Trajectory, v: &Trajectory, instance: &OcpInstance<'_>) -> Result<f64> {
    x.check_dim(instance.model.n(), "state")?;
    instance.check_control(v)?;
    let e = x.sub(&instance.nominal_part())?;
    Ok(cost_of_deviation(instance, &e, v))
}

/// Final-value solve of the state equation for a given control.
pub fn solve_state_given_control(instance: &OcpInstance<'_>, v: &Trajectory) -> Result<Trajectory> {
    instance.check_control(v)?;
    let e = deviation(instance, v)?;
    instance.nominal_part().add(&e)
}

/// Forward adjoint solve
/// `p' = −(A + M(x̄))ᵀ p + α Cᵀ (ω − C (x̄ − x̃))`, `p(0) = x0 − x̄(0)`.
pub fn solve_adjoint(instance: &OcpInstance<'_>, x_bar: &Trajectory) -> Result<Trajectory> {
    x_bar.check_dim(instance.model.n(), "state")?;
    let e = x_bar.sub(&instance.nominal_part())?;
    adjoint_of_deviation(instance, &e)
}

/// `v + Fᵀp` along the state and adjoint generated by `v`: the L² gradient
/// of the reduced cost.
pub fn reduced_gradient(instance: &OcpInstance<'_>, v: &Trajectory) -> Result<Trajectory> {
    instance.check_control(v)?;
    let e = deviation(instance, v)?;
    let p = adjoint_of_deviation(instance, &e)?;
    Ok(gradient_of(instance, v, &p))
}

struct Iterate {
    v: Trajectory,
    e: Trajectory,
    cost: f64,
}

struct Evaluated {
    it: Iterate,
    p: Trajectory,
    g: Trajectory,
    gnorm: f64,
}

fn iterate(inst: &OcpInstance<'_>, v: Trajectory) -> Result<Iterate> {
    let e = deviation(inst, &v)?;
    let cost = cost_of_deviation(inst, &e, &v);
    if !cost.is_finite() {
        return Err(Error::Divergence { node: 0 });
    }
    Ok(Iterate { v, e, cost })
}

fn evaluate(inst: &OcpInstance<'_>, it: Iterate) -> Result<Evaluated> {
    let p = adjoint_of_deviation(inst, &it.e)?;
    let g = gradient_of(inst, &it.v, &p);
    let gnorm = g.l2_norm();
    Ok(Evaluated { it, p, g, gnorm })
}

fn axpy(v: &Trajectory, step: f64, g: &Trajectory) -> Trajectory {
    v.zip_with(g, |v, g| v - g * step).expect("shared grid")
}

const NONMONOTONE_WINDOW: usize = 8;

/// Reduced-gradient descent for the optimal control.
///
/// Starts from `opts.warm_start` (resampled onto the instance grid, holding
/// its last value beyond its span) or from `v ≡ 0`.
pub fn solve_ocp(instance: &OcpInstance<'_>, opts: &SolverOptions) -> Result<OcpSolution> {
    opts.validate()?;
    if let Some(radius) = opts.validity_radius {
        let size = instance.xi.norm().max(instance.omega.l2_norm());
        if size > radius {
            return Err(Error::ValidityExit {
                node: instance.node,
                monitor: "ocp data norm",
                value: size,
            });
        }
    }
    let v0 = match &opts.warm_start {
        Some(w) if w.dim() == instance.model.m() => w.resample(instance.grid),
        _ => Trajectory::zeros(instance.grid, instance.model.m()),
    };
    let mut cur = evaluate(instance, iterate(instance, v0)?)?;
    let mut prev: Option<(Trajectory, Trajectory)> = None;
    let mut iterations = 0;
    let mut armijo_steps = 0;
    let mut residual_steps = 0;
    let mut residual_phase = false;
    let mut recent: Vec<f64> = Vec::with_capacity(NONMONOTONE_WINDOW);

    while cur.gnorm > opts.grad_tol && iterations < opts.max_iters {
        iterations += 1;

        let next = match opts.mode {
            DescentMode::FixedPoint { theta } => {
                let it = iterate(instance, axpy(&cur.it.v, theta, &cur.g))?;
                Some(evaluate(instance, it)?)
            }
            DescentMode::Armijo => {
                let s0 = spectral_step(&cur, prev.as_ref());
                let accepted = if residual_phase {
                    None
                } else {
                    armijo(instance, &cur, s0, opts)?
                };
                match accepted {
                    Some(ev) => {
                        armijo_steps += 1;
                        // the cost can still drop while the residual no longer
                        // does: the discrete cost minimizer and the zero of
                        // `v + Fᵀp` differ at discretization order
                        let stalled = cur.it.cost - ev.it.cost <= 1e-10 * cur.it.cost.abs();
                        if stalled || ev.gnorm >= 0.99 * cur.gnorm {
                            residual_phase = true;
                        }
                        Some(ev)
                    }
                    None => {
                        residual_phase = true;
                        let reference = recent.iter().copied().fold(cur.gnorm, f64::max);
                        let fallback = residual_step(instance, &cur, s0, reference, opts)?;
                        if fallback.is_some() {
                            residual_steps += 1;
                        }
                        fallback
                    }
                }
            }
        };
        let Some(next) = next else {
            break;
        };
        if recent.len() == NONMONOTONE_WINDOW {
            recent.remove(0);
        }
        recent.push(cur.gnorm);
        prev = Some((cur.it.v.clone(), cur.g.clone()));
        cur = next;
    }

    let converged = cur.gnorm <= opts.grad_tol;
    let x_bar = instance.nominal_part().add(&cur.it.e)?;
    Ok(OcpSolution {
        x_bar,
        v_bar: cur.it.v,
        p: cur.p,
        cost: cur.it.cost,
        grad_norm: cur.gnorm,
        iterations,
        converged,
        armijo_steps,
        residual_steps,
    })
}

/// Barzilai–Borwein step from the last two iterates, clamped; 1 otherwise.
fn spectral_step(cur: &Evaluated, prev: Option<&(Trajectory, Trajectory)>) -> f64 {
    let Some((pv, pg)) = prev else {
        return 1.0;
    };
    let dv = cur.it.v.sub(pv).expect("shared grid");
    let dg = cur.g.sub(pg).expect("shared grid");
    let num = dv.inner(&dv).unwrap_or(0.0);
    let den = dv.inner(&dg).unwrap_or(0.0);
    if den > 0.0 && num > 0.0 {
        (num / den).clamp(1e-3, 1e3)
    } else {
        1.0
    }
}

fn armijo(
    inst: &OcpInstance<'_>,
    cur: &Evaluated,
    s0: f64,
    opts: &SolverOptions,
) -> Result<Option<Evaluated>> {
    let slope = cur.gnorm * cur.gnorm;
    let mut s = s0;
    for _ in 0..=opts.max_backtracks {
        if let Ok(it) = iterate(inst, axpy(&cur.it.v, s, &cur.g)) {
            if it.cost <= cur.it.cost - opts.sufficient_decrease * s * slope {
                return evaluate(inst, it).map(Some);
            }
        }
        s *= opts.shrink;
    }
    Ok(None)
}

/// Near the optimum the discrete cost decrease drowns in the mismatch
/// between the continuous adjoint and the discretized cost; accept steps
/// whose optimality residual stays below the largest of the recent ones.
fn residual_step(
    inst: &OcpInstance<'_>,
    cur: &Evaluated,
    s0: f64,
    reference: f64,
    opts: &SolverOptions,
) -> Result<Option<Evaluated>> {
    let mut s = s0;
    for _ in 0..=opts.max_backtracks.min(20) {
        if let Ok(it) = iterate(inst, axpy(&cur.it.v, s, &cur.g)) {
            let ev = evaluate(inst, it)?;
            if ev.gnorm < reference {
                return Ok(Some(ev));
            }
        }
        s *= opts.shrink;
    }
    Ok(None)
}

/// Data of the linear-quadratic KKT system.
#[derive(Debug, Clone)]
pub struct KktData {
    /// Terminal state `x(t) = a`.
    pub a: DVector<f64>,
    /// Initial anchor, `q(0) = b − x(0)`.
    pub b: DVector<f64>,
    pub mu: Trajectory,
    pub f: Trajectory,
    pub l1: Trajectory,
    pub l2: Trajectory,
}

impl KktData {
    pub fn zeros(instance: &OcpInstance<'_>) -> Self {
        let m = instance.model;
        let g = instance.grid;
        Self {
            a: DVector::zeros(m.n()),
            b: DVector::zeros(m.n()),
            mu: Trajectory::zeros(g, m.r()),
            f: Trajectory::zeros(g, m.n()),
            l1: Trajectory::zeros(g, m.n()),
            l2: Trajectory::zeros(g, m.m()),
        }
    }

    /// Data whose only non-zero entry is the terminal state `a`.
    pub fn terminal(instance: &OcpInstance<'_>, a: DVector<f64>) -> Self {
        Self {
            a,
            ..Self::zeros(instance)
        }
    }

    fn is_homogeneous(&self) -> bool {
        let zero = |t: &Trajectory| t.values().iter().all(|v| v.iter().all(|&x| x == 0.0));
        self.b.iter().all(|&x| x == 0.0)
            && zero(&self.mu)
            && zero(&self.f)
            && zero(&self.l1)
            && zero(&self.l2)
    }

    fn check(&self, inst: &OcpInstance<'_>) -> Result<()> {
        let m = inst.model;
        if self.a.len() != m.n() {
            return Err(Error::dim("kkt a", m.n(), self.a.len()));
        }
        if self.b.len() != m.n() {
            return Err(Error::dim("kkt b", m.n(), self.b.len()));
        }
        self.mu.check_dim(m.r(), "kkt mu")?;
        self.f.check_dim(m.n(), "kkt f")?;
        self.l1.check_dim(m.n(), "kkt l1")?;
        self.l2.check_dim(m.m(), "kkt l2")?;
        let reference = Trajectory::zeros(inst.grid, 1);
        for t in [&self.mu, &self.f, &self.l1, &self.l2] {
            reference.check_grid(t, "kkt data grid")?;
        }
        Ok(())
    }
}

/// Solution `(x, v, q)` of the KKT system.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub x: Trajectory,
    pub v: Trajectory,
    pub q: Trajectory,
    /// `‖ρ‖∞ / β̂` with the computable surrogate
    /// `β̂ = (4 ĉ² ‖G‖₂)⁻¹`, `ĉ = (1 + √t) exp(κ t)` and `κ` the largest
    /// `‖A + M(x̆)‖₂` on the grid. Values above one flag possible loss of
    /// coercivity; the solve itself is not affected.
    pub rho_bound_ratio: f64,
}

impl KktSolution {
    pub fn coercivity_warning(&self) -> bool {
        self.rho_bound_ratio > 1.0
    }
}

/// Solves the linear Hamiltonian boundary value problem
///
/// ```text
/// x' = (A + M(x̆)) x + F v + f,                      x(t) = a,
/// q' = −(A + M(x̆))ᵀ q − α Cᵀ (C x − μ) − M(x)ᵀ ρ − l₁,  q(0) = b − x(0),
/// v  = −Fᵀ q − l₂,
/// ```
///
/// by linear shooting on `x(0)`: one particular and `n` homogeneous forward
/// integrations build an `n × n` system for the initial state.
pub fn solve_lq_kkt(
    instance: &OcpInstance<'_>,
    x_breve: &Trajectory,
    rho: &Trajectory,
    data: &KktData,
) -> Result<KktSolution> {
    let model = instance.model;
    let n = model.n();
    data.check(instance)?;
    x_breve.check_dim(n, "x_breve")?;
    rho.check_dim(n, "rho")?;
    let grid = instance.grid;
    let reference = Trajectory::zeros(grid, 1);
    reference.check_grid(x_breve, "x_breve grid")?;
    reference.check_grid(rho, "rho grid")?;

    let fft = &model.f * model.f.transpose();
    let ctc_alpha = model.c.transpose() * &model.c * model.alpha;
    let ct_alpha = model.c.transpose() * model.alpha;

    let system = |s: f64| -> DMatrix<f64> {
        let jac = &model.a + model.g.bilinearize(&x_breve.at(s)).expect("state dimension");
        let curv = model.g.adjoint_curvature(&rho.at(s)).expect("state dimension");
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&jac);
        m.view_mut((0, n), (n, n)).copy_from(&(-&fft));
        m.view_mut((n, 0), (n, n)).copy_from(&(-(&ctc_alpha + curv)));
        m.view_mut((n, n), (n, n)).copy_from(&(-jac.transpose()));
        m
    };
    let forcing = |s: f64| -> DVector<f64> {
        let mut z = DVector::zeros(2 * n);
        let top = data.f.at(s) - &model.f * data.l2.at(s);
        let bottom = &ct_alpha * data.mu.at(s) - data.l1.at(s);
        z.rows_mut(0, n).copy_from(&top);
        z.rows_mut(n, n).copy_from(&bottom);
        z
    };

    let homogeneous = data.is_homogeneous();
    let particular = if homogeneous {
        None
    } else {
        let mut z0 = DVector::zeros(2 * n);
        z0.rows_mut(n, n).copy_from(&data.b);
        Some(integrate_ivp(|s, z| system(s) * z + forcing(s), &z0, &grid)?)
    };
    let mut basis = Vec::with_capacity(n);
    for j in 0..n {
        let mut z0 = DVector::zeros(2 * n);
        z0[j] = 1.0;
        z0[n + j] = -1.0;
        basis.push(integrate_ivp(|s, z| system(s) * z, &z0, &grid)?);
    }

    let mut shooting = DMatrix::zeros(n, n);
    for (j, b) in basis.iter().enumerate() {
        shooting.set_column(j, &b.last().rows(0, n));
    }
    let mut rhs = data.a.clone();
    if let Some(p) = &particular {
        rhs -= p.last().rows(0, n);
    }
    let scale = shooting.amax();
    let lu = shooting.clone().lu();
    let pivots_ok = scale > 0.0
        && (0..n).all(|i| lu.u()[(i, i)].abs() > 1e-13 * scale)
        && shooting.iter().all(|v| v.is_finite());
    if !pivots_ok {
        return Err(Error::DegenerateKkt);
    }
    let s = lu.solve(&rhs).ok_or(Error::DegenerateKkt)?;

    let combine = |k: usize, pick: &dyn Fn(&Trajectory, usize) -> DVector<f64>| {
        let mut z = particular
            .as_ref()
            .map(|p| pick(p, k))
            .unwrap_or_else(|| DVector::zeros(2 * n));
        for (j, b) in basis.iter().enumerate() {
            z += pick(b, k) * s[j];
        }
        z
    };
    let values: Vec<DVector<f64>> = (0..grid.len())
        .map(|k| combine(k, &|t, k| t.value(k).clone()))
        .collect();
    let derivs: Vec<DVector<f64>> = (0..grid.len())
        .map(|k| combine(k, &|t, k| t.derivatives().expect("integrator output")[k].clone()))
        .collect();

    let split = |range: (usize, usize), src: &[DVector<f64>]| -> Vec<DVector<f64>> {
        src.iter().map(|z| z.rows(range.0, range.1).into_owned()).collect()
    };
    let x = Trajectory::new(grid, split((0, n), &values))?
        .with_derivatives(split((0, n), &derivs))?;
    let q = Trajectory::new(grid, split((n, n), &values))?
        .with_derivatives(split((n, n), &derivs))?;
    let ft = model.f.transpose();
    let v = q.zip_with(&data.l2, |q, l2| -(&ft * q) - l2)?;

    let kappa = grid
        .nodes()
        .map(|s| spectral_norm(&(&model.a + model.g.bilinearize(&x_breve.at(s)).expect("dim"))))
        .fold(0.0, f64::max);
    let t = grid.t_end();
    let c_hat = (1.0 + libm::sqrt(t)) * libm::exp(kappa * t);
    let g_norm = model.g.norm2();
    let rho_bound_ratio = if g_norm == 0.0 {
        0.0
    } else {
        rho.sup_norm() * 4.0 * c_hat * c_hat * g_norm
    };

    Ok(KktSolution {
        x,
        v,
        q,
        rho_bound_ratio,
    })
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let mtm = m.transpose() * m;
    libm::sqrt(mtm.symmetric_eigenvalues().max().max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nominal_trajectory;
    use crate::model::tests::{oscillator, scalar_nonlinear};
    use crate::model::SignalFamily;
    use alloc::vec;

    fn smooth_omega(grid: TimeGrid, dim: usize, amplitude: f64) -> Trajectory {
        SignalFamily::Sinusoid {
            amplitude,
            frequency: 1.0,
            phase: 0.3,
        }
        .sample(grid, dim, 0)
    }

    #[test]
    fn cost_of_nominal_pair() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let zero_w = Trajectory::zeros(grid, 1);
        let inst = OcpInstance::new(&m, &nom, 200, DVector::zeros(1), &zero_w).unwrap();
        let v0 = Trajectory::zeros(*inst.grid(), 1);
        assert_eq!(cost(&inst.nominal_part(), &v0, &inst).unwrap(), 0.0);

        let w = smooth_omega(grid, 1, 0.2);
        let inst = OcpInstance::new(&m, &nom, 200, DVector::zeros(1), &w).unwrap();
        let want = 0.5 * m.alpha * inst.omega().l2_norm().powi(2);
        let got = cost(&inst.nominal_part(), &v0, &inst).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn cost_initial_term_only() {
        let m = oscillator();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let eta = DVector::from_vec(vec![0.3, -0.4]);
        // free response of the perturbed initial state, ω chosen to zero the output term
        let x = crate::ode::integrate_ivp(|_, x| &m.a * x, &(&m.x0 + &eta), &grid).unwrap();
        let omega = x
            .zip_with(nom.trajectory(), |x, xt| &m.c * (x - xt))
            .unwrap();
        let inst = OcpInstance::new(&m, &nom, 200, DVector::zeros(2), &omega).unwrap();
        let v0 = Trajectory::zeros(grid, 2);
        let got = cost(&x, &v0, &inst).unwrap();
        assert!((got - 0.125).abs() < 1e-14);
    }

    #[test]
    fn state_for_zero_data_is_nominal() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let zero_w = Trajectory::zeros(grid, 1);
        let inst = OcpInstance::new(&m, &nom, 120, DVector::zeros(1), &zero_w).unwrap();
        let v0 = Trajectory::zeros(*inst.grid(), 1);
        let x = solve_state_given_control(&inst, &v0).unwrap();
        assert_eq!(x.values(), inst.nominal_part().values());
        let p = solve_adjoint(&inst, &x).unwrap();
        assert_eq!(p.sup_norm(), 0.0);
        assert_eq!(reduced_gradient(&inst, &v0).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn linear_state_matches_variation_of_constants() {
        // x' = a x + v on [0, 1], x(1) = x̃(1) + ξ, v(s) = s:
        // x(s) = e^{a(s−1)} x(1) − ∫_s^1 e^{a(s−r)} r dr
        let a = -0.7;
        let m = SystemModel::new(
            DMatrix::from_element(1, 1, a),
            crate::QuadraticForm::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.4),
            1.0,
            1.0,
        )
        .unwrap();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let xi = 0.25;
        let inst = OcpInstance::new(&m, &nom, 200, DVector::from_element(1, xi), &Trajectory::zeros(grid, 1)).unwrap();
        let v = Trajectory::from_fn(grid, |s| DVector::from_element(1, s)).unwrap();
        let x = solve_state_given_control(&inst, &v).unwrap();
        let x1 = 0.4 * libm::exp(a) + xi;
        // ∫_s^1 e^{a(s−r)} r dr in closed form
        let integral = |s: f64| {
            let f = |r: f64| libm::exp(a * (s - r)) * (-(r / a) - 1.0 / (a * a));
            f(1.0) - f(s)
        };
        for (k, s) in grid.nodes().enumerate() {
            let want = libm::exp(a * (s - 1.0)) * x1 - integral(s);
            assert!((x.value(k)[0] - want).abs() < 1e-9, "node {k}");
        }
        assert_eq!(x.last()[0], nom.trajectory().last()[0] + xi);
    }

    #[test]
    fn adjoint_free_response() {
        // G = 0, C = 0: p(s) = exp(−Aᵀ s) (x0 − x̄(0))
        let mut m = oscillator();
        m.a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, 0.2]);
        m.c = DMatrix::zeros(1, 2);
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 200, DVector::from_vec(vec![0.2, 0.1]), &Trajectory::zeros(grid, 1)).unwrap();
        let v = Trajectory::zeros(grid, 2);
        let x = solve_state_given_control(&inst, &v).unwrap();
        let p = solve_adjoint(&inst, &x).unwrap();
        let p0 = &m.x0 - x.first();
        for (k, s) in grid.nodes().enumerate() {
            let want = (-(m.a.transpose()) * s).exp() * &p0;
            assert!((p.value(k) - want).norm() < 1e-10);
        }
    }

    #[test]
    fn adjoint_grid_refinement() {
        let m = scalar_nonlinear();
        let run = |grid: TimeGrid| {
            let nom = nominal_trajectory(&m, &grid).unwrap();
            let w = SignalFamily::Sinusoid { amplitude: 0.1, frequency: 0.25, phase: 0.3 }.sample(grid, 1, 0);
            let inst = OcpInstance::at_time(&m, &nom, 1.0, DVector::from_element(1, 0.1), &w).unwrap();
            let v = Trajectory::from_fn(grid, |s| DVector::from_element(1, 0.2 * libm::cos(3.0 * s))).unwrap();
            let x = solve_state_given_control(&inst, &v).unwrap();
            solve_adjoint(&inst, &x).unwrap()
        };
        let coarse = run(m.default_grid());
        let fine = run(m.default_grid().refine(4));
        for k in 0..coarse.grid().len() {
            let gap = (coarse.value(k) - fine.value(4 * k)).norm();
            assert!(gap < 1e-6, "node {k} gap {gap:e}");
        }
    }

    #[test]
    fn reduced_gradient_matches_directional_difference() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let w = smooth_omega(grid, 1, 0.1);
        let inst = OcpInstance::new(&m, &nom, 160, DVector::from_element(1, 0.08), &w).unwrap();
        let g = *inst.grid();
        let v = Trajectory::from_fn(g, |s| DVector::from_element(1, 0.1 * libm::sin(2.0 * s))).unwrap();
        let dv = Trajectory::from_fn(g, |s| DVector::from_element(1, 1.0 - s)).unwrap();
        let red = |v: &Trajectory| {
            let x = solve_state_given_control(&inst, v).unwrap();
            cost(&x, v, &inst).unwrap()
        };
        let h = 1e-5;
        let fd = (red(&axpy(&v, -h, &dv)) - red(&axpy(&v, h, &dv))) / (2.0 * h);
        let exact = reduced_gradient(&inst, &v).unwrap().inner(&dv).unwrap();
        assert!((fd - exact).abs() < 1e-4 * exact.abs().max(1e-3), "fd {fd} exact {exact}");
    }

    #[test]
    fn zero_data_solves_immediately() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 200, DVector::zeros(1), &Trajectory::zeros(grid, 1)).unwrap();
        let sol = solve_ocp(&inst, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 1);
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.v_bar.sup_norm(), 0.0);
        assert_eq!(sol.x_bar.values(), inst.nominal_part().values());
    }

    #[test]
    fn converged_solution_satisfies_optimality() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let w = smooth_omega(grid, 1, 0.1);
        let inst = OcpInstance::new(&m, &nom, 200, DVector::from_element(1, 0.1), &w).unwrap();
        let opts = SolverOptions::default();
        let sol = solve_ocp(&inst, &opts).unwrap();
        assert!(sol.converged, "grad {} it {} armijo {} resid {}", sol.grad_norm, sol.iterations, sol.armijo_steps, sol.residual_steps);
        assert!(sol.grad_norm <= opts.grad_tol);
        let g = reduced_gradient(&inst, &sol.v_bar).unwrap();
        assert!(g.l2_norm() <= opts.grad_tol * 1.0001);
        assert_eq!(sol.x_bar.last()[0], nom.trajectory().last()[0] + 0.1);
        // minimality against the uncontrolled comparison run
        let v0 = Trajectory::zeros(*inst.grid(), 1);
        let x0 = solve_state_given_control(&inst, &v0).unwrap();
        assert!(sol.cost <= cost(&x0, &v0, &inst).unwrap());
    }

    #[test]
    fn fixed_point_mode_converges_to_the_same_control() {
        let m = oscillator();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let w = smooth_omega(grid, 1, 0.05);
        let inst = OcpInstance::new(&m, &nom, 150, DVector::from_vec(vec![0.05, -0.02]), &w).unwrap();
        let a = solve_ocp(&inst, &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            mode: DescentMode::FixedPoint { theta: 0.5 },
            max_iters: 2000,
            ..Default::default()
        };
        let b = solve_ocp(&inst, &opts).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.v_bar.sub(&b.v_bar).unwrap().sup_norm() < 1e-8);
    }

    #[test]
    fn non_convergence_keeps_partial_data() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 200, DVector::from_element(1, 0.1), &Trajectory::zeros(grid, 1)).unwrap();
        let opts = SolverOptions { max_iters: 1, grad_tol: 1e-14, ..Default::default() };
        let sol = solve_ocp(&inst, &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
        assert!(sol.cost.is_finite());
    }

    #[test]
    fn validity_radius_and_option_errors() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 200, DVector::from_element(1, 2.0), &Trajectory::zeros(grid, 1)).unwrap();
        let opts = SolverOptions { validity_radius: Some(1.0), ..Default::default() };
        assert!(matches!(solve_ocp(&inst, &opts), Err(Error::ValidityExit { .. })));
        let bad = SolverOptions { grad_tol: 0.0, ..Default::default() };
        assert!(solve_ocp(&inst, &bad).is_err());
        assert!(OcpInstance::new(&m, &nom, 0, DVector::zeros(1), &Trajectory::zeros(grid, 1)).is_err());
        assert!(OcpInstance::at_time(&m, &nom, 0.5003, DVector::zeros(1), &Trajectory::zeros(grid, 1)).is_err());
    }

    #[test]
    fn linear_cost_matches_riccati_quadratic_form() {
        // scalar G = 0: V(t, ξ, 0) = ½ Π(t) ξ², Π' = 2bΠ − Π² + α, Π(0) = 1, b = −a
        let a = -0.6;
        let m = SystemModel::new(
            DMatrix::from_element(1, 1, a),
            crate::QuadraticForm::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.3),
            1.0,
            1.0,
        )
        .unwrap();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let xi = 0.1;
        let inst = OcpInstance::new(&m, &nom, 200, DVector::from_element(1, xi), &Trajectory::zeros(grid, 1)).unwrap();
        let sol = solve_ocp(&inst, &SolverOptions::default()).unwrap();
        let b = -a;
        // roots of 2bΠ − Π² + 1 = 0
        let r1 = b + libm::sqrt(b * b + 1.0);
        let r2 = b - libm::sqrt(b * b + 1.0);
        let k = (1.0 - r1) / (1.0 - r2);
        let e = libm::exp(-(r1 - r2) * 1.0);
        let pi = (r1 - r2 * k * e) / (1.0 - k * e);
        let want = 0.5 * pi * xi * xi;
        assert!((sol.cost - want).abs() < 1e-4 * want, "cost {} want {}", sol.cost, want);
    }

    #[test]
    fn kkt_zero_data_is_zero() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 200, DVector::zeros(1), &Trajectory::zeros(grid, 1)).unwrap();
        let sol = solve_lq_kkt(&inst, &inst.nominal_part(), &Trajectory::zeros(grid, 1), &KktData::zeros(&inst)).unwrap();
        assert_eq!(sol.x.sup_norm(), 0.0);
        assert_eq!(sol.v.sup_norm(), 0.0);
        assert_eq!(sol.q.sup_norm(), 0.0);
    }

    /// Fourth-order central difference of node samples; an oracle that does
    /// not use the integrator's stored derivatives.
    fn fd4(tr: &Trajectory, k: usize) -> DVector<f64> {
        let h = tr.grid().dt();
        (tr.value(k - 2) - tr.value(k - 1) * 8.0 + tr.value(k + 1) * 8.0 - tr.value(k + 2)) / (12.0 * h)
    }

    fn three_d_model() -> SystemModel {
        let mut g = alloc::vec![0.0; 27];
        g[1] = 0.3; // x1 x2 into row 0
        g[9 + 8] = -0.2; // x3² into row 1
        g[18 + 3] = 0.25; // x2 x1 into row 2
        SystemModel::new(
            DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, -0.5, -1.0, 0.2, 0.0, -0.2, -0.5]),
            crate::QuadraticForm::from_row_slice(3, &g).unwrap(),
            DMatrix::identity(3, 3),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![0.5, 0.2, -0.3]),
            1.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn kkt_residuals_vanish() {
        let m = three_d_model();
        let grid = m.default_grid().refine(2);
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, grid.steps(), DVector::zeros(3), &Trajectory::zeros(grid, 2)).unwrap();
        let g = *inst.grid();
        let x_breve = Trajectory::from_fn(g, |s| DVector::from_vec(vec![0.5 * libm::cos(s), 0.2, -0.3 + 0.1 * s]))
            .unwrap()
            .with_derivatives(
                g.nodes().map(|s| DVector::from_vec(vec![-0.5 * libm::sin(s), 0.0, 0.1])).collect(),
            )
            .unwrap();
        let rho = Trajectory::from_fn(g, |s| DVector::from_vec(vec![0.05 * s, -0.02, 0.03 * s * s])).unwrap();
        let data = KktData {
            a: DVector::from_vec(vec![0.1, -0.2, 0.05]),
            b: DVector::from_vec(vec![0.02, 0.0, -0.01]),
            mu: Trajectory::from_fn(g, |s| DVector::from_vec(vec![0.1 * s, -0.05])).unwrap(),
            f: Trajectory::from_fn(g, |s| DVector::from_vec(vec![0.0, 0.1 * s, 0.02])).unwrap(),
            l1: Trajectory::from_fn(g, |s| DVector::from_vec(vec![0.01, 0.0, -0.03 * s])).unwrap(),
            l2: Trajectory::from_fn(g, |s| DVector::from_vec(vec![0.0, 0.02 * s, 0.0])).unwrap(),
        };
        let sol = solve_lq_kkt(&inst, &x_breve, &rho, &data).unwrap();
        assert!((sol.x.last() - &data.a).norm() < 1e-12);
        assert!((sol.q.first() - (&data.b - sol.x.first())).norm() < 1e-12);
        let ft = m.f.transpose();
        for k in 0..g.len() {
            let vk = -(&ft * sol.q.value(k)) - data.l2.value(k);
            assert!((sol.v.value(k) - vk).norm() < 1e-14);
        }
        // linear interpolation between nodes is what the solver sees for the data
        for k in 2..g.len() - 2 {
            let s = g.node(k);
            let jac = &m.a + m.g.bilinearize(&x_breve.at(s)).unwrap();
            let xk = sol.x.value(k);
            let rx = fd4(&sol.x, k) - (&jac * xk + &m.f * sol.v.value(k) + data.f.value(k));
            let rq = fd4(&sol.q, k)
                - (-(jac.transpose() * sol.q.value(k))
                    - (m.c.transpose() * (&m.c * xk - data.mu.value(k))) * m.alpha
                    - m.g.bilinearize(xk).unwrap().transpose() * rho.value(k)
                    - data.l1.value(k));
            assert!(rx.norm() <= 1e-7, "x residual {} at {k}", rx.norm());
            assert!(rq.norm() <= 1e-7, "q residual {} at {k}", rq.norm());
        }
    }

    #[test]
    fn kkt_is_additive_in_data() {
        let m = three_d_model();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 150, DVector::zeros(3), &Trajectory::zeros(grid, 2)).unwrap();
        let g = *inst.grid();
        let xb = inst.nominal_part();
        let rho = Trajectory::constant(g, DVector::from_vec(vec![0.01, 0.02, -0.01]));
        let d1 = KktData {
            a: DVector::from_vec(vec![0.1, 0.0, 0.2]),
            mu: Trajectory::from_fn(g, |s| DVector::from_vec(vec![s, 0.0])).unwrap(),
            ..KktData::zeros(&inst)
        };
        let d2 = KktData {
            b: DVector::from_vec(vec![0.0, 0.3, 0.0]),
            l1: Trajectory::constant(g, DVector::from_vec(vec![0.1, 0.1, 0.0])),
            ..KktData::zeros(&inst)
        };
        let d12 = KktData {
            a: &d1.a + &d2.a,
            b: &d1.b + &d2.b,
            mu: d1.mu.add(&d2.mu).unwrap(),
            f: d1.f.add(&d2.f).unwrap(),
            l1: d1.l1.add(&d2.l1).unwrap(),
            l2: d1.l2.add(&d2.l2).unwrap(),
        };
        let s1 = solve_lq_kkt(&inst, &xb, &rho, &d1).unwrap();
        let s2 = solve_lq_kkt(&inst, &xb, &rho, &d2).unwrap();
        let s12 = solve_lq_kkt(&inst, &xb, &rho, &d12).unwrap();
        let gap = s12.x.sub(&s1.x.add(&s2.x).unwrap()).unwrap().sup_norm()
            + s12.q.sub(&s1.q.add(&s2.q).unwrap()).unwrap().sup_norm();
        assert!(gap < 1e-12, "gap {gap}");
    }

    #[test]
    fn kkt_matches_finite_difference_of_ocp() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let zero_w = Trajectory::zeros(grid, 1);
        let base = OcpInstance::new(&m, &nom, 200, DVector::zeros(1), &zero_w).unwrap();
        let sens = solve_lq_kkt(
            &base,
            &base.nominal_part(),
            &Trajectory::zeros(grid, 1),
            &KktData::terminal(&base, DVector::from_element(1, 1.0)),
        )
        .unwrap();
        let h = 1e-3;
        let opts = SolverOptions::default();
        let plus = solve_ocp(&base.with_xi(DVector::from_element(1, h)), &opts).unwrap();
        let minus = solve_ocp(&base.with_xi(DVector::from_element(1, -h)), &opts).unwrap();
        let fd = plus.x_bar.sub(&minus.x_bar).unwrap().scale(0.5 / h);
        assert!(fd.sub(&sens.x).unwrap().sup_norm() < 1e-4);
    }

    #[test]
    fn singular_shooting_is_reported() {
        let mut m = scalar_nonlinear();
        m.a = DMatrix::from_element(1, 1, f64::NAN);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let good = scalar_nonlinear();
        let nom = nominal_trajectory(&good, &grid).unwrap();
        let inst = OcpInstance::new(&m, &nom, 10, DVector::zeros(1), &Trajectory::zeros(grid, 1)).unwrap();
        let r = solve_lq_kkt(
            &inst,
            &inst.nominal_part(),
            &Trajectory::zeros(grid, 1),
            &KktData::terminal(&inst, DVector::from_element(1, 1.0)),
        );
        assert!(matches!(r, Err(Error::DegenerateKkt) | Err(Error::Divergence { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(12))]
        #[test]
        fn converged_solutions_are_optimal_and_bounded(xi in -0.1f64..0.1, amp in 0.0f64..0.1, frac in 0.2f64..1.0) {
            let m = scalar_nonlinear();
            let grid = m.default_grid();
            let nom = nominal_trajectory(&m, &grid).unwrap();
            let omega = smooth_omega(grid, 1, amp);
            let node = ((grid.steps() as f64 * frac) as usize).max(1);
            let inst = OcpInstance::new(&m, &nom, node, DVector::from_element(1, xi), &omega).unwrap();
            let opts = SolverOptions::default();
            let sol = solve_ocp(&inst, &opts).unwrap();
            proptest::prop_assert!(sol.converged);
            proptest::prop_assert!(sol.grad_norm <= opts.grad_tol);
            // never worse than the zero control
            let zero = Trajectory::zeros(*inst.grid(), 1);
            let x0 = solve_state_given_control(&inst, &zero).unwrap();
            proptest::prop_assert!(sol.cost <= cost(&x0, &zero, &inst).unwrap() + 1e-14);
            // minimizer size against data size, constant fitted on this model
            let size = xi.abs().max(inst.omega().l2_norm());
            let e = sol.x_bar.sub(&inst.nominal_part()).unwrap();
            proptest::prop_assert!(e.sup_norm().max(sol.v_bar.l2_norm()) <= 5.0 * size + 1e-12);
        }
    }
}
