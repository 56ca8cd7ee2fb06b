//! Scenario generation and observer execution for one configuration.

use mortensen_core::model::{measure, nominal_trajectory, shift_output, simulate_truth};
use mortensen_core::observers::{
    argmin_observe, ekf_observe, kalman_bucy_observe, mortensen_observe, ObserverMethod, ObserverRun,
};
use mortensen_core::{DisturbanceScenario, Nominal, SystemModel, TimeGrid, Trajectory};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// A configuration with its model, nominal trajectory and simulated data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub grid: TimeGrid,
    pub nominal: Nominal,
    pub scenario: DisturbanceScenario,
    pub truth: Trajectory,
    /// Measured output `y`.
    pub output: Trajectory,
    /// Shifted output `ω = y − C x̃`.
    pub omega: Trajectory,
}

impl Experiment {
    /// Applies the command-line overrides, validates and simulates.
    pub fn prepare(
        mut config: ExperimentConfig,
        seed: Option<u64>,
        grid_steps: Option<usize>,
    ) -> Result<Self, CliError> {
        if let Some(seed) = seed {
            config.scenario.seed = seed;
        }
        if let Some(steps) = grid_steps {
            config.grid.steps = Some(steps);
        }
        config.validate()?;
        let model = config.system_model()?;
        Self::with_model(config, model)
    }

    /// Same configuration with another model (for instance its linear part).
    pub fn with_model(config: ExperimentConfig, model: SystemModel) -> Result<Self, CliError> {
        let grid = config.time_grid(&model)?;
        let nominal = nominal_trajectory(&model, &grid)?;
        let seed = config.scenario.seed;
        let scenario = DisturbanceScenario {
            eta: config.eta(&model)?,
            v: config.scenario.disturbance.family().sample(grid, model.m(), seed),
            mu: config
                .scenario
                .noise
                .family()
                .sample(grid, model.r(), seed.wrapping_add(1)),
        };
        let truth = simulate_truth(&model, &nominal, &scenario)?;
        let output = measure(&truth, &model, &scenario.mu)?;
        let omega = shift_output(&output, &nominal, &model)?;
        Ok(Self {
            config,
            model,
            grid,
            nominal,
            scenario,
            truth,
            output,
            omega,
        })
    }

    pub fn estimate(&self, method: ObserverMethod) -> Result<ObserverRun, CliError> {
        let opts = self.config.observer_options();
        let run = match method {
            ObserverMethod::Mortensen => mortensen_observe(&self.model, &self.nominal, &self.omega, &opts)?,
            ObserverMethod::Argmin => argmin_observe(&self.model, &self.nominal, &self.omega, &opts)?,
            ObserverMethod::Ekf => ekf_observe(&self.model, &self.nominal, &self.output)?,
            ObserverMethod::KalmanBucy => {
                if !self.model.g.is_zero() {
                    return Err(CliError::config("the kalman-bucy method needs a model without quadratic term"));
                }
                kalman_bucy_observe(&self.model, &self.nominal, &self.output)?
            }
        };
        Ok(run)
    }

    /// Times where the sampled disturbance or noise jumps.
    pub fn discontinuities(&self) -> Vec<f64> {
        let mut out = self.config.scenario.disturbance.family().discontinuities();
        out.extend(self.config.scenario.noise.family().discontinuities());
        out
    }
}
