//! JSON experiment configuration.
//!
//! Matrices are nested row-major arrays. `g` is `n × n²`, column `i·n + j`
//! multiplying `xᵢ·xⱼ`. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use mortensen_core::model::SignalFamily;
use mortensen_core::observers::ObserverOptions;
use mortensen_core::ocp::SolverOptions;
use mortensen_core::value::{HessianMethod, ValueOptions};
use mortensen_core::{DMatrix, DVector, QuadraticForm, SystemModel, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub a: Vec<Vec<f64>>,
    /// Omitted means no quadratic term.
    #[serde(default)]
    pub g: Option<Vec<Vec<f64>>>,
    pub f: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    #[serde(default = "one")]
    pub alpha: f64,
    /// Final time `T`.
    #[serde(default = "one", rename = "T", alias = "horizon")]
    pub horizon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Number of steps on `[0, T]`; 200 per unit time when omitted.
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalConfig {
    Zero,
    Sinusoid {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    Step {
        amplitude: f64,
        time: f64,
    },
    SmoothRandom {
        amplitude: f64,
        #[serde(default = "three")]
        modes: usize,
    },
}

impl SignalConfig {
    pub fn family(&self) -> SignalFamily {
        match *self {
            SignalConfig::Zero => SignalFamily::Zero,
            SignalConfig::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => SignalFamily::Sinusoid {
                amplitude,
                frequency,
                phase,
            },
            SignalConfig::Step { amplitude, time } => SignalFamily::Step { amplitude, time },
            SignalConfig::SmoothRandom { amplitude, modes } => SignalFamily::SmoothRandom { amplitude, modes },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Initial offset `η`; zero when omitted.
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    /// Dynamics disturbance `v`.
    #[serde(default = "zero_signal")]
    pub disturbance: SignalConfig,
    /// Output noise `μ`.
    #[serde(default = "zero_signal")]
    pub noise: SignalConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            eta: None,
            disturbance: SignalConfig::Zero,
            noise: SignalConfig::Zero,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethodConfig {
    Kkt,
    FiniteDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "max_iters")]
    pub max_iters: usize,
    #[serde(default = "newton_tol")]
    pub newton_tol: f64,
    /// Bound on `‖ω‖_{L²}` and on `‖x̂‖`.
    #[serde(default = "one")]
    pub validity_radius: f64,
    #[serde(default = "kkt")]
    pub hessian_method: HessianMethodConfig,
    #[serde(default)]
    pub frozen_hessian: bool,
    /// Opt-in diagonal shift for non-positive-definite Hessians.
    #[serde(default)]
    pub regularization: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: grad_tol(),
            max_iters: max_iters(),
            newton_tol: newton_tol(),
            validity_radius: 1.0,
            hessian_method: HessianMethodConfig::Kkt,
            frozen_hessian: false,
            regularization: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "out_dir")]
    pub directory: PathBuf,
    /// Write the per-step diagnostics CSV next to each estimate.
    #[serde(default = "yes")]
    pub diagnostics: bool,
    /// Also write the shifted-coordinate estimate `x̂`.
    #[serde(default)]
    pub shifted_estimates: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: out_dir(),
            diagnostics: true,
            shifted_estimates: false,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn three() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn grad_tol() -> f64 {
    1e-9
}
fn max_iters() -> usize {
    500
}
fn newton_tol() -> f64 {
    1e-8
}
fn kkt() -> HessianMethodConfig {
    HessianMethodConfig::Kkt
}
fn zero_signal() -> SignalConfig {
    SignalConfig::Zero
}
fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn matrix(rows: &[Vec<f64>], name: &'static str) -> Result<DMatrix<f64>, CliError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(CliError::config(format!("{name} must be a non-empty matrix")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::config(format!("{name} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// `false` for NaN, unlike `x <= 0.0`.
fn is_positive(x: f64) -> bool {
    x > 0.0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn system_model(&self) -> Result<SystemModel, CliError> {
        let m = &self.model;
        let a = matrix(&m.a, "model.a")?;
        let n = a.nrows();
        let g = match &m.g {
            Some(rows) => QuadraticForm::new(matrix(rows, "model.g")?),
            None => Ok(QuadraticForm::zeros(n)),
        }
        .map_err(|e| CliError::config(format!("model.g: {e}")))?;
        SystemModel::new(
            a,
            g,
            matrix(&m.f, "model.f")?,
            matrix(&m.c, "model.c")?,
            DVector::from_vec(m.x0.clone()),
            m.alpha,
            m.horizon,
        )
        .map_err(|e| CliError::config(format!("model: {e}")))
    }

    pub fn time_grid(&self, model: &SystemModel) -> Result<TimeGrid, CliError> {
        match self.grid.steps {
            Some(0) => Err(CliError::config("grid.steps must be at least 1")),
            Some(steps) => TimeGrid::new(0.0, model.horizon, steps).map_err(|e| CliError::config(format!("grid: {e}"))),
            None => Ok(model.default_grid()),
        }
    }

    pub fn eta(&self, model: &SystemModel) -> Result<DVector<f64>, CliError> {
        match &self.scenario.eta {
            None => Ok(DVector::zeros(model.n())),
            Some(v) if v.len() == model.n() => Ok(DVector::from_vec(v.clone())),
            Some(v) => Err(CliError::config(format!(
                "scenario.eta has {} entries, the state has {}",
                v.len(),
                model.n()
            ))),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            grad_tol: self.solver.grad_tol,
            max_iters: self.solver.max_iters,
            ..SolverOptions::default()
        }
    }

    pub fn value_options(&self) -> ValueOptions {
        ValueOptions {
            solver: self.solver_options(),
            hessian_method: match self.solver.hessian_method {
                HessianMethodConfig::Kkt => HessianMethod::Kkt,
                HessianMethodConfig::FiniteDiff => HessianMethod::FiniteDiff,
            },
            validity_radius: Some(self.solver.validity_radius),
            ..ValueOptions::default()
        }
    }

    pub fn observer_options(&self) -> ObserverOptions {
        ObserverOptions {
            value: self.value_options(),
            newton_tol: self.solver.newton_tol,
            validity_radius: self.solver.validity_radius,
            frozen_hessian: self.solver.frozen_hessian,
            regularization: self.solver.regularization,
            ..ObserverOptions::default()
        }
    }

    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.system_model()?;
        self.time_grid(&model)?;
        self.eta(&model)?;
        let s = &self.solver;
        if !is_positive(s.grad_tol) || !is_positive(s.newton_tol) {
            return Err(CliError::config("solver tolerances must be positive"));
        }
        if s.max_iters == 0 {
            return Err(CliError::config("solver.max_iters must be at least 1"));
        }
        if !is_positive(s.validity_radius) {
            return Err(CliError::config("solver.validity_radius must be positive"));
        }
        if let Some(r) = s.regularization {
            if !is_positive(r) {
                return Err(CliError::config("solver.regularization must be positive"));
            }
        }
        for signal in [&self.scenario.disturbance, &self.scenario.noise] {
            match *signal {
                SignalConfig::SmoothRandom { modes: 0, .. } => {
                    return Err(CliError::config("smooth_random needs at least one mode"))
                }
                SignalConfig::Sinusoid { amplitude, frequency, phase }
                    if !(amplitude.is_finite() && frequency.is_finite() && phase.is_finite()) =>
                {
                    return Err(CliError::config("sinusoid parameters must be finite"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
