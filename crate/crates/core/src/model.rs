//! Problem definition: dynamics, output map, nominal trajectory and the
//! shift to `(ξ, ω)` coordinates.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kron::QuadraticForm;
use crate::ode::{integrate_ivp, TimeGrid, Trajectory};

/// `x' = A x + G (x ⊗ x) + F v`, `y = C x + μ`, with cost weight `alpha`
/// and horizon `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub g: QuadraticForm,
    pub f: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub alpha: f64,
    pub horizon: f64,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        g: QuadraticForm,
        f: DMatrix<f64>,
        c: DMatrix<f64>,
        x0: DVector<f64>,
        alpha: f64,
        horizon: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dim("A columns", n, a.ncols()));
        }
        if g.dim() != n {
            return Err(Error::dim("G rows", n, g.dim()));
        }
        if f.nrows() != n || f.ncols() == 0 {
            return Err(Error::dim("F rows", n, f.nrows()));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dim("C columns", n, c.ncols()));
        }
        if x0.len() != n {
            return Err(Error::dim("x0", n, x0.len()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument("alpha must be positive"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument("horizon must be positive"));
        }
        Ok(Self {
            a,
            g,
            f,
            c,
            x0,
            alpha,
            horizon,
        })
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Disturbance dimension `m`.
    pub fn m(&self) -> usize {
        self.f.ncols()
    }

    /// Output dimension `r`.
    pub fn r(&self) -> usize {
        self.c.nrows()
    }

    /// The drift `A x + G (x ⊗ x)`.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + self.g.eval_quadratic(x).expect("state dimension checked by caller")
    }

    /// The same model with `G = 0`.
    pub fn linearized_part(&self) -> Self {
        Self {
            g: QuadraticForm::zeros(self.n()),
            ..self.clone()
        }
    }

    /// Default grid on `[0, horizon]`: 200 steps per unit time.
    pub fn default_grid(&self) -> TimeGrid {
        TimeGrid::with_density(self.horizon, 200).expect("horizon validated")
    }
}

/// The nominal trajectory `x̃` on a fixed grid.
///
/// Built once and shared by reference; every module reads `x̃` through this
/// value so that node-exact comparisons across modules are meaningful.
#[derive(Debug, Clone)]
pub struct Nominal {
    traj: Trajectory,
}

impl Nominal {
    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn grid(&self) -> &TimeGrid {
        self.traj.grid()
    }

    /// `x̃(t)` (cubic Hermite between nodes).
    pub fn at(&self, t: f64) -> DVector<f64> {
        self.traj.at(t)
    }

    /// `A'(t) = A + G (x̃(t) ⊗ I) + G (I ⊗ x̃(t))` without range checking.
    pub(crate) fn a_prime(&self, model: &SystemModel, t: f64) -> DMatrix<f64> {
        &model.a + model.g.bilinearize(&self.at(t)).expect("nominal has model dimension")
    }

    /// Shifted drift `h(t, ξ) = A'(t) ξ + G (ξ ⊗ ξ)`, which equals
    /// `f(x̃ + ξ) − f(x̃)` for the undisturbed drift `f`.
    pub fn shifted_drift(&self, model: &SystemModel, t: f64, xi: &DVector<f64>) -> DVector<f64> {
        self.a_prime(model, t) * xi + model.g.eval_quadratic(xi).expect("state dimension")
    }
}

/// Initial perturbation `η`, dynamics disturbance `v` and output noise `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceScenario {
    pub eta: DVector<f64>,
    pub v: Trajectory,
    pub mu: Trajectory,
}

impl DisturbanceScenario {
    pub fn zero(model: &SystemModel, grid: TimeGrid) -> Self {
        Self {
            eta: DVector::zeros(model.n()),
            v: Trajectory::zeros(grid, model.m()),
            mu: Trajectory::zeros(grid, model.r()),
        }
    }

    fn check(&self, model: &SystemModel, grid: &TimeGrid) -> Result<()> {
        if self.eta.len() != model.n() {
            return Err(Error::dim("eta", model.n(), self.eta.len()));
        }
        self.v.check_dim(model.m(), "scenario v")?;
        self.mu.check_dim(model.r(), "scenario mu")?;
        let reference = Trajectory::zeros(*grid, 1);
        reference.check_grid(&self.v, "scenario v grid")?;
        reference.check_grid(&self.mu, "scenario mu grid")
    }
}

/// Integrates the undisturbed system `x' = A x + G (x ⊗ x)`, `x(0) = x0`.
pub fn nominal_trajectory(model: &SystemModel, grid: &TimeGrid) -> Result<Nominal> {
    if grid.t_start() != 0.0 {
        return Err(Error::InvalidArgument("nominal grid must start at t = 0"));
    }
    let traj = integrate_ivp(|_, x| model.drift(x), &model.x0, grid)?;
    Ok(Nominal { traj })
}

/// Integrates the disturbed system from `x0 + η`.
///
/// The deviation `e = x − x̃` is integrated (`e' = h(t, e) + F v`,
/// `e(0) = η`) and added back, so the zero scenario reproduces `x̃`
/// node by node.
pub fn simulate_truth(
    model: &SystemModel,
    nominal: &Nominal,
    scenario: &DisturbanceScenario,
) -> Result<Trajectory> {
    let grid = *nominal.grid();
    scenario.check(model, &grid)?;
    let dev = integrate_ivp(
        |t, e| nominal.shifted_drift(model, t, e) + &model.f * scenario.v.at(t),
        &scenario.eta,
        &grid,
    )?;
    nominal.trajectory().add(&dev)
}

/// `y = C x + μ` nodewise.
pub fn measure(x: &Trajectory, model: &SystemModel, mu: &Trajectory) -> Result<Trajectory> {
    x.check_dim(model.n(), "measured state")?;
    mu.check_dim(model.r(), "output noise")?;
    x.zip_with(mu, |x, mu| &model.c * x + mu)
}

/// `ω = y − C x̃` nodewise.
pub fn shift_output(y: &Trajectory, nominal: &Nominal, model: &SystemModel) -> Result<Trajectory> {
    y.check_dim(model.r(), "output")?;
    y.zip_with(nominal.trajectory(), |y, xt| y - &model.c * xt)
}

/// `y = ω + C x̃` nodewise; inverse of [`shift_output`].
pub fn unshift_output(
    omega: &Trajectory,
    nominal: &Nominal,
    model: &SystemModel,
) -> Result<Trajectory> {
    omega.check_dim(model.r(), "shifted output")?;
    omega.zip_with(nominal.trajectory(), |w, xt| w + &model.c * xt)
}

/// `A'(t) = A + G (x̃(t) ⊗ I) + G (I ⊗ x̃(t))`.
pub fn shifted_dynamics_matrix(
    model: &SystemModel,
    nominal: &Nominal,
    t: f64,
) -> Result<DMatrix<f64>> {
    nominal.trajectory().try_at(t)?;
    Ok(nominal.a_prime(model, t))
}

/// Disturbance families for reproducible experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalFamily {
    Zero,
    /// Component `i` is `amplitude · sin(2π·frequency·t + phase + i·π/4)`.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// `amplitude` on every component for `t ≥ time`, zero before.
    Step { amplitude: f64, time: f64 },
    /// Random sum of `modes` sine modes over the grid span, seeded, with
    /// sup-norm at most `amplitude` per component.
    SmoothRandom { amplitude: f64, modes: usize },
}

impl SignalFamily {
    pub fn sample(&self, grid: TimeGrid, dim: usize, seed: u64) -> Trajectory {
        let span = grid.t_end() - grid.t_start();
        match *self {
            SignalFamily::Zero => Trajectory::zeros(grid, dim),
            SignalFamily::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => Trajectory::from_fn(grid, |t| {
                DVector::from_fn(dim, |i, _| {
                    let arg = 2.0 * core::f64::consts::PI * frequency * t
                        + phase
                        + i as f64 * core::f64::consts::FRAC_PI_4;
                    amplitude * libm::sin(arg)
                })
            })
            .expect("grid-sized"),
            SignalFamily::Step { amplitude, time } => Trajectory::from_fn(grid, |t| {
                DVector::from_element(dim, if t >= time { amplitude } else { 0.0 })
            })
            .expect("grid-sized"),
            SignalFamily::SmoothRandom { amplitude, modes } => {
                let modes = modes.max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let coeffs: Vec<Vec<(f64, f64)>> = (0..dim)
                    .map(|_| {
                        (1..=modes)
                            .map(|j| {
                                let a: f64 = rng.random_range(-1.0..1.0) / j as f64;
                                let phi: f64 =
                                    rng.random_range(0.0..2.0 * core::f64::consts::PI);
                                (a, phi)
                            })
                            .collect()
                    })
                    .collect();
                Trajectory::from_fn(grid, |t| {
                    DVector::from_fn(dim, |i, _| {
                        let c = &coeffs[i];
                        let total: f64 = c.iter().map(|(a, _)| a.abs()).sum();
                        let s: f64 = c
                            .iter()
                            .enumerate()
                            .map(|(j, (a, phi))| {
                                let w = 2.0 * core::f64::consts::PI * (j + 1) as f64 / span;
                                a * libm::sin(w * (t - grid.t_start()) + phi)
                            })
                            .sum();
                        if total > 0.0 {
                            amplitude * s / total
                        } else {
                            0.0
                        }
                    })
                })
                .expect("grid-sized")
            }
        }
    }

    /// Times where the sampled signal jumps.
    pub fn discontinuities(&self) -> Vec<f64> {
        match *self {
            SignalFamily::Step { amplitude, time } if amplitude != 0.0 => alloc::vec![time],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn scalar_nonlinear() -> SystemModel {
        SystemModel::new(
            DMatrix::from_element(1, 1, -1.0),
            QuadraticForm::from_row_slice(1, &[-0.5]).unwrap(),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
            1.0,
            1.0,
        )
        .unwrap()
    }

    pub(crate) fn oscillator() -> SystemModel {
        SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            QuadraticForm::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn bernoulli(t: f64) -> f64 {
        let e = libm::exp(-t);
        0.5 * e / (1.0 + 0.25 * (1.0 - e))
    }

    #[test]
    fn model_validation() {
        let m = scalar_nonlinear();
        assert!(SystemModel::new(
            m.a.clone(),
            m.g.clone(),
            m.f.clone(),
            m.c.clone(),
            m.x0.clone(),
            -1.0,
            1.0
        )
        .is_err());
        assert!(SystemModel::new(
            m.a.clone(),
            m.g.clone(),
            DMatrix::zeros(2, 1),
            m.c.clone(),
            m.x0.clone(),
            1.0,
            1.0
        )
        .is_err());
        assert!(SystemModel::new(
            m.a.clone(),
            QuadraticForm::zeros(2),
            m.f.clone(),
            m.c.clone(),
            m.x0.clone(),
            1.0,
            1.0
        )
        .is_err());
    }

    #[test]
    fn nominal_matches_bernoulli() {
        let m = scalar_nonlinear();
        let nom = nominal_trajectory(&m, &m.default_grid()).unwrap();
        for (k, t) in nom.grid().nodes().enumerate() {
            assert!((nom.trajectory().value(k)[0] - bernoulli(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn nominal_from_equilibrium_is_zero() {
        let mut m = scalar_nonlinear();
        m.x0 = DVector::zeros(1);
        let nom = nominal_trajectory(&m, &m.default_grid()).unwrap();
        assert_eq!(nom.trajectory().sup_norm(), 0.0);
    }

    #[test]
    fn nominal_rotation() {
        let m = oscillator();
        let nom = nominal_trajectory(&m, &m.default_grid()).unwrap();
        for (k, t) in nom.grid().nodes().enumerate() {
            let want = DVector::from_vec(vec![libm::cos(t), -libm::sin(t)]);
            assert!((nom.trajectory().value(k) - want).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_scenario_reproduces_nominal_exactly() {
        let m = scalar_nonlinear();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let x = simulate_truth(&m, &nom, &DisturbanceScenario::zero(&m, grid)).unwrap();
        assert_eq!(x.values(), nom.trajectory().values());
    }

    #[test]
    fn linear_truth_is_superposition() {
        let m = oscillator();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let mut sc = DisturbanceScenario::zero(&m, grid);
        sc.eta = DVector::from_vec(vec![0.2, -0.1]);
        let x = simulate_truth(&m, &nom, &sc).unwrap();
        for (k, t) in grid.nodes().enumerate() {
            let want = nom.trajectory().value(k) + (&m.a * t).exp() * &sc.eta;
            assert!((x.value(k) - want).norm() < 1e-9);
        }
    }

    #[test]
    fn truth_converges_under_refinement() {
        let m = scalar_nonlinear();
        let run = |grid: TimeGrid| {
            let nom = nominal_trajectory(&m, &grid).unwrap();
            let sc = DisturbanceScenario {
                eta: DVector::from_element(1, 0.1),
                v: Trajectory::constant(grid, DVector::from_element(1, 0.3)),
                mu: Trajectory::zeros(grid, 1),
            };
            simulate_truth(&m, &nom, &sc).unwrap()
        };
        let coarse = run(m.default_grid());
        let fine = run(m.default_grid().refine(4));
        for k in 0..coarse.grid().len() {
            assert!((coarse.value(k) - fine.value(4 * k)).norm() < 1e-6);
        }
    }

    #[test]
    fn measurement_and_shift() {
        let m = oscillator();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let zero_mu = Trajectory::zeros(grid, 1);
        let y = measure(nom.trajectory(), &m, &zero_mu).unwrap();
        for (k, t) in grid.nodes().enumerate() {
            assert!((y.value(k)[0] - libm::cos(t)).abs() < 1e-6);
        }
        let omega = shift_output(&y, &nom, &m).unwrap();
        assert_eq!(omega.sup_norm(), 0.0);
        let noise = SignalFamily::Sinusoid {
            amplitude: 0.3,
            frequency: 1.0,
            phase: 0.2,
        }
        .sample(grid, 1, 0);
        let y = measure(&Trajectory::zeros(grid, 2), &m, &noise).unwrap();
        assert_eq!(y, noise);
        let back = unshift_output(&shift_output(&y, &nom, &m).unwrap(), &nom, &m).unwrap();
        assert!(back.sub(&y).unwrap().sup_norm() < 1e-15);
        assert!(measure(&Trajectory::zeros(grid, 3), &m, &zero_mu).is_err());
    }

    #[test]
    fn shift_is_affine_with_unit_slope() {
        let m = oscillator();
        let grid = m.default_grid();
        let nom = nominal_trajectory(&m, &grid).unwrap();
        let y1 = SignalFamily::Sinusoid { amplitude: 1.0, frequency: 0.5, phase: 0.0 }.sample(grid, 1, 0);
        let y2 = SignalFamily::SmoothRandom { amplitude: 0.5, modes: 4 }.sample(grid, 1, 9);
        let lhs = shift_output(&y1.add(&y2).unwrap(), &nom, &m).unwrap();
        let rhs = shift_output(&y1, &nom, &m).unwrap().add(&y2).unwrap();
        assert!(lhs.sub(&rhs).unwrap().sup_norm() < 1e-14);
    }

    #[test]
    fn shifted_matrix() {
        let m = oscillator();
        let nom = nominal_trajectory(&m, &m.default_grid()).unwrap();
        assert_eq!(shifted_dynamics_matrix(&m, &nom, 0.3).unwrap(), m.a);
        assert!(shifted_dynamics_matrix(&m, &nom, 1.5).is_err());

        let g = QuadraticForm::from_row_slice(2, &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut m2 = SystemModel { g, ..oscillator() };
        m2.x0 = DVector::from_vec(vec![1.0, 2.0]);
        let nom2 = nominal_trajectory(&m2, &m2.default_grid()).unwrap();
        let ap = shifted_dynamics_matrix(&m2, &nom2, 0.0).unwrap();
        assert_eq!(ap, &m2.a + DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 0.0, 0.0]));
        let z = DVector::from_vec(vec![0.3, -0.8]);
        let t = 0.37;
        let direct = &m2.a * &z + m2.g.eval_bilinear(&nom2.at(t), &z).unwrap();
        assert!((shifted_dynamics_matrix(&m2, &nom2, t).unwrap() * &z - direct).norm() < 1e-14);

        let mut m3 = scalar_nonlinear();
        m3.x0 = DVector::zeros(1);
        let nom3 = nominal_trajectory(&m3, &m3.default_grid()).unwrap();
        assert_eq!(shifted_dynamics_matrix(&m3, &nom3, 0.5).unwrap(), m3.a);
    }

    #[test]
    fn signals_are_deterministic() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let fam = SignalFamily::SmoothRandom { amplitude: 0.1, modes: 5 };
        assert_eq!(fam.sample(grid, 2, 42), fam.sample(grid, 2, 42));
        assert_ne!(fam.sample(grid, 2, 42), fam.sample(grid, 2, 43));
        assert!(fam.sample(grid, 2, 42).values().iter().all(|v| v.amax() <= 0.1 + 1e-15));
        let step = SignalFamily::Step { amplitude: 1.0, time: 0.5 };
        assert_eq!(step.discontinuities(), vec![0.5]);
        assert_eq!(step.sample(grid, 1, 0).value(24)[0], 0.0);
        assert_eq!(step.sample(grid, 1, 0).value(25)[0], 1.0);
    }

    proptest::proptest! {
        #[test]
        fn shifted_matrix_matches_bilinear_term(t in 0.0f64..1.0, z0 in -1.0f64..1.0, z1 in -1.0f64..1.0, z2 in -1.0f64..1.0) {
            let m = SystemModel::new(
                DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, -0.5, -1.0, 0.2, 0.0, -0.2, -0.5]),
                QuadraticForm::from_row_slice(3, &{
                    let mut g = vec![0.0; 27];
                    g[1] = 0.3;
                    g[17] = -0.2;
                    g[21] = 0.25;
                    g
                })
                .unwrap(),
                DMatrix::identity(3, 3),
                DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
                DVector::from_vec(vec![0.5, 0.2, -0.3]),
                1.0,
                1.0,
            )
            .unwrap();
            let nom = nominal_trajectory(&m, &m.default_grid()).unwrap();
            let z = DVector::from_vec(vec![z0, z1, z2]);
            let lhs = shifted_dynamics_matrix(&m, &nom, t).unwrap() * &z;
            let rhs = &m.a * &z + m.g.eval_bilinear(&nom.at(t), &z).unwrap();
            proptest::prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn shift_has_unit_slope(seed in 0u64..500, c in -2.0f64..2.0) {
            let m = oscillator();
            let nom = nominal_trajectory(&m, &m.default_grid()).unwrap();
            let grid = *nom.grid();
            let y1 = SignalFamily::SmoothRandom { amplitude: 1.0, modes: 3 }.sample(grid, 1, seed);
            let y2 = SignalFamily::Sinusoid { amplitude: c, frequency: 0.7, phase: 0.1 }.sample(grid, 1, seed);
            let both = shift_output(&y1.add(&y2).unwrap(), &nom, &m).unwrap();
            let one = shift_output(&y1, &nom, &m).unwrap();
            proptest::prop_assert!(both.sub(&one).unwrap().sub(&y2).unwrap().sup_norm() < 1e-13);
        }
    }
}
