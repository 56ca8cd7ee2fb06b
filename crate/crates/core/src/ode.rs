//! Fixed-step RK4 integration on uniform grids.
//!
//! Every solve in the crate runs on the same node set so that state,
//! adjoint and Riccati trajectories can be compared node by node. Sampled
//! signals (outputs, controls) interpolate linearly between nodes;
//! trajectories produced by an integrator also carry the vector field at
//! each node and interpolate with cubic Hermite polynomials, which keeps
//! chained solves (state → adjoint → KKT) fourth-order accurate.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Uniform grid `t_start + k·dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step"));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_start >= t_end {
            return Err(Error::InvalidArgument("grid needs t_start < t_end"));
        }
        Ok(Self {
            t_start,
            dt: (t_end - t_start) / steps as f64,
            steps,
        })
    }

    /// Grid on `[0, horizon]` with `per_unit` steps per unit time (at least one).
    pub fn with_density(horizon: f64, per_unit: usize) -> Result<Self> {
        let steps = libm::ceil(horizon * per_unit as f64).max(1.0) as usize;
        Self::new(0.0, horizon, steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.node(self.steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.node(k))
    }

    /// The prefix `[t_start, node(k)]`, sharing node times exactly.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.steps {
            return Err(Error::InvalidArgument("truncation index must be in 1..=steps"));
        }
        Ok(Self {
            t_start: self.t_start,
            dt: self.dt,
            steps: k,
        })
    }

    /// Grid with `factor` times as many steps over the same span.
    pub fn refine(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        Self {
            t_start: self.t_start,
            dt: self.dt / factor as f64,
            steps: self.steps * factor,
        }
    }

    /// Index of the node at time `t`, if `t` is a node up to rounding.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = (t - self.t_start) / self.dt;
        let k = libm::round(x);
        if k < 0.0 || k > self.steps as f64 || (x - k).abs() > 1e-7 {
            return None;
        }
        Some(k as usize)
    }

    pub fn contains(&self, t: f64) -> bool {
        let tol = 1e-9 * self.dt;
        t >= self.t_start - tol && t <= self.t_end() + tol
    }

    fn same_nodes(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps
            && (self.t_start - other.t_start).abs() <= 1e-12 * (1.0 + self.t_start.abs())
            && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }
}

/// A vector signal sampled on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
    derivs: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::dim("trajectory samples", grid.len(), values.len()));
        }
        let d = values[0].len();
        if let Some(bad) = values.iter().find(|v| v.len() != d) {
            return Err(Error::dim("trajectory sample dimension", d, bad.len()));
        }
        Ok(Self {
            grid,
            values,
            derivs: None,
        })
    }

    /// Attaches node derivatives so that [`at`](Self::at) uses cubic Hermite
    /// interpolation.
    pub fn with_derivatives(mut self, derivs: Vec<DVector<f64>>) -> Result<Self> {
        if derivs.len() != self.values.len() {
            return Err(Error::dim("trajectory derivatives", self.values.len(), derivs.len()));
        }
        if let Some(bad) = derivs.iter().find(|v| v.len() != self.dim()) {
            return Err(Error::dim("trajectory derivative dimension", self.dim(), bad.len()));
        }
        self.derivs = Some(derivs);
        Ok(self)
    }

    /// Attaches node slopes from second-order finite differences (central
    /// inside, one-sided at the ends), giving a C¹ cubic interpolant of the
    /// samples. Used for smooth signals that were not produced by an
    /// integrator.
    pub fn with_estimated_derivatives(mut self) -> Self {
        let v = &self.values;
        let h = self.grid.dt;
        let last = self.grid.steps;
        let derivs = if last == 1 {
            let d = (&v[1] - &v[0]) / h;
            alloc::vec![d.clone(), d]
        } else {
            (0..=last)
                .map(|k| {
                    if k == 0 {
                        (&v[0] * -3.0 + &v[1] * 4.0 - &v[2]) / (2.0 * h)
                    } else if k == last {
                        (&v[last] * 3.0 - &v[last - 1] * 4.0 + &v[last - 2]) / (2.0 * h)
                    } else {
                        (&v[k + 1] - &v[k - 1]) / (2.0 * h)
                    }
                })
                .collect()
        };
        self.derivs = Some(derivs);
        self
    }

    /// Drops Hermite data, falling back to linear interpolation.
    pub fn without_derivatives(mut self) -> Self {
        self.derivs = None;
        self
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> DVector<f64>) -> Result<Self> {
        Self::new(grid, grid.nodes().map(&mut f).collect())
    }

    pub fn constant(grid: TimeGrid, value: DVector<f64>) -> Self {
        Self {
            grid,
            values: alloc::vec![value; grid.len()],
            derivs: None,
        }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self::constant(grid, DVector::zeros(dim))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn derivatives(&self) -> Option<&[DVector<f64>]> {
        self.derivs.as_deref()
    }

    pub fn value(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        &self.values[self.grid.steps]
    }

    pub fn into_values(self) -> Vec<DVector<f64>> {
        self.values
    }

    /// Value at time `t`: cubic Hermite when node derivatives are known,
    /// linear otherwise. Times outside the grid clamp to the end values.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let g = &self.grid;
        let x = ((t - g.t_start) / g.dt).clamp(0.0, g.steps as f64);
        let k = (libm::floor(x) as usize).min(g.steps - 1);
        let s = x - k as f64;
        if s == 0.0 {
            return self.values[k].clone();
        }
        if s == 1.0 {
            return self.values[k + 1].clone();
        }
        let (a, b) = (&self.values[k], &self.values[k + 1]);
        match &self.derivs {
            Some(d) => {
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                a * h00 + &d[k] * (h10 * g.dt) + b * h01 + &d[k + 1] * (h11 * g.dt)
            }
            None => a * (1.0 - s) + b * s,
        }
    }

    /// Value at time `t`, failing when `t` leaves the grid span.
    pub fn try_at(&self, t: f64) -> Result<DVector<f64>> {
        if !self.grid.contains(t) {
            return Err(Error::OutOfRange {
                t,
                start: self.grid.t_start(),
                end: self.grid.t_end(),
            });
        }
        Ok(self.at(t))
    }

    /// The prefix on `[t_start, node(k)]`.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        let grid = self.grid.truncate(k)?;
        Ok(Self {
            grid,
            values: self.values[..=k].to_vec(),
            derivs: self.derivs.as_ref().map(|d| d[..=k].to_vec()),
        })
    }

    /// Resamples onto `grid` (which must lie inside the span) by interpolation.
    pub fn resample(&self, grid: TimeGrid) -> Self {
        Self {
            grid,
            values: grid.nodes().map(|t| self.at(t)).collect(),
            derivs: None,
        }
    }

    pub fn check_grid(&self, other: &Trajectory, what: &'static str) -> Result<()> {
        if !self.grid.same_nodes(&other.grid) {
            return Err(Error::dim(what, self.grid.len(), other.grid.len()));
        }
        Ok(())
    }

    pub fn check_dim(&self, dim: usize, what: &'static str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::dim(what, dim, self.dim()));
        }
        Ok(())
    }

    /// Nodewise map; node derivatives are dropped.
    pub fn map(&self, f: impl FnMut(&DVector<f64>) -> DVector<f64>) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
            derivs: None,
        }
    }

    /// Nodewise combination of two trajectories on the same grid.
    pub fn zip_with(
        &self,
        other: &Trajectory,
        mut f: impl FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    ) -> Result<Self> {
        self.check_grid(other, "trajectory grid")?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a, b))
                .collect(),
            derivs: None,
        })
    }

    /// Sum, keeping Hermite data when both operands carry it.
    pub fn add(&self, other: &Trajectory) -> Result<Self> {
        self.check_dim(other.dim(), "trajectory sum")?;
        let mut out = self.zip_with(other, |a, b| a + b)?;
        if let (Some(a), Some(b)) = (&self.derivs, &other.derivs) {
            out.derivs = Some(a.iter().zip(b).map(|(x, y)| x + y).collect());
        }
        Ok(out)
    }

    /// Difference, keeping Hermite data when both operands carry it.
    pub fn sub(&self, other: &Trajectory) -> Result<Self> {
        self.check_dim(other.dim(), "trajectory difference")?;
        let mut out = self.zip_with(other, |a, b| a - b)?;
        if let (Some(a), Some(b)) = (&self.derivs, &other.derivs) {
            out.derivs = Some(a.iter().zip(b).map(|(x, y)| x - y).collect());
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * c).collect(),
            derivs: self
                .derivs
                .as_ref()
                .map(|d| d.iter().map(|v| v * c).collect()),
        }
    }

    /// `max_k ‖x_k‖`.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Trapezoidal `(∫ ‖x‖²)^{1/2}` over the grid.
    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(trapezoid(&self.grid, self.values.iter().map(|v| v.norm_squared())))
    }

    /// Trapezoidal `∫ ⟨x, y⟩` over the grid.
    pub fn inner(&self, other: &Trajectory) -> Result<f64> {
        self.check_grid(other, "trajectory inner product")?;
        Ok(trapezoid(
            &self.grid,
            self.values.iter().zip(&other.values).map(|(a, b)| a.dot(b)),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Trapezoid rule for node samples `f_0, …, f_N` on `grid`.
pub fn trapezoid(grid: &TimeGrid, samples: impl Iterator<Item = f64>) -> f64 {
    let last = grid.steps;
    let sum: f64 = samples
        .enumerate()
        .map(|(k, f)| if k == 0 || k == last { 0.5 * f } else { f })
        .sum();
    sum * grid.dt
}

fn finite(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

fn rk4_step<F>(field: &F, t: f64, x: &DVector<f64>, k1: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let half = 0.5 * h;
    let k2 = field(t + half, &(x + k1 * half));
    let k3 = field(t + half, &(x + &k2 * half));
    let k4 = field(t + h, &(x + &k3 * h));
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Classical RK4 from `x0` at `grid.t_start()` forward to `grid.t_end()`.
///
/// The returned trajectory stores the field value at every node and
/// therefore interpolates with cubic Hermite polynomials.
pub fn integrate_ivp<F>(field: F, x0: &DVector<f64>, grid: &TimeGrid) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if !finite(x0) {
        return Err(Error::Divergence { node: 0 });
    }
    let h = grid.dt();
    let mut values = Vec::with_capacity(grid.len());
    let mut derivs = Vec::with_capacity(grid.len());
    let mut x = x0.clone();
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let k1 = field(t, &x);
        if k1.len() != x.len() {
            return Err(Error::dim("vector field output", x.len(), k1.len()));
        }
        let next = rk4_step(&field, t, &x, &k1, h);
        if !finite(&next) {
            return Err(Error::Divergence { node: k + 1 });
        }
        values.push(core::mem::replace(&mut x, next));
        derivs.push(k1);
    }
    derivs.push(field(grid.t_end(), &x));
    values.push(x);
    Trajectory::new(*grid, values)?.with_derivatives(derivs)
}

/// RK4 for a final-value problem `x(t_end) = x_end`.
///
/// Equivalent to substituting `s ↦ t_end − s` and integrating forward; the
/// result is returned in the original time orientation.
pub fn integrate_fvp<F>(field: F, x_end: &DVector<f64>, grid: &TimeGrid) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let n = grid.steps();
    if !finite(x_end) {
        return Err(Error::Divergence { node: n });
    }
    let h = -grid.dt();
    let mut values = alloc::vec![DVector::zeros(0); n + 1];
    let mut derivs = alloc::vec![DVector::zeros(0); n + 1];
    let mut x = x_end.clone();
    for k in (1..=n).rev() {
        let t = grid.node(k);
        let k1 = field(t, &x);
        if k1.len() != x.len() {
            return Err(Error::dim("vector field output", x.len(), k1.len()));
        }
        let next = rk4_step(&field, t, &x, &k1, h);
        if !finite(&next) {
            return Err(Error::Divergence { node: k - 1 });
        }
        values[k] = core::mem::replace(&mut x, next);
        derivs[k] = k1;
    }
    derivs[0] = field(grid.t_start(), &x);
    values[0] = x;
    Trajectory::new(*grid, values)?.with_derivatives(derivs)
}

/// RK4 for the linear system `x' = B(t) x + f(t)`, `x(t_start) = x0`.
pub fn solve_linear_tv<B>(
    system: B,
    forcing: &Trajectory,
    x0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<Trajectory>
where
    B: Fn(f64) -> DMatrix<f64>,
{
    forcing.check_dim(x0.len(), "linear forcing")?;
    integrate_ivp(|t, x| system(t) * x + forcing.at(t), x0, grid)
}
