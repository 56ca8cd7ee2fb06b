//! Command-line front end.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mortensen_core::observers::{estimation_error, ObserverMethod, ObserverRun};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::Experiment;
use crate::output::{artifact, ensure_dir, write_diagnostics, write_json, write_trajectory};
use crate::verify::{run_suite, Report, Suite};

#[derive(Debug, Parser)]
#[command(name = "mortensen", version, about = "Minimum-energy state estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario seed; overrides the configured one.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of time steps; overrides the configured grid.
    #[arg(long)]
    pub grid_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the undisturbed trajectory.
    Nominal(CommonArgs),
    /// Write the true state, measured and shifted outputs.
    Simulate(CommonArgs),
    /// Run one observer on the simulated data.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Check one identity over a fixed probe set.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Run every applicable observer and tabulate the errors.
    Compare(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mortensen,
    Argmin,
    Ekf,
    KalmanBucy,
}

impl From<MethodArg> for ObserverMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mortensen => ObserverMethod::Mortensen,
            MethodArg::Argmin => ObserverMethod::Argmin,
            MethodArg::Ekf => ObserverMethod::Ekf,
            MethodArg::KalmanBucy => ObserverMethod::KalmanBucy,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub method: &'static str,
    pub sup_error: f64,
    pub l2_error: f64,
    pub terminal_error: f64,
    /// First node where the estimate left the validity radius, if any.
    pub bound_violation: Option<usize>,
    pub runtime_seconds: f64,
}

/// Loaded configuration plus resolved output directory.
struct Session {
    experiment: Experiment,
    out: PathBuf,
}

impl Session {
    fn open(args: &CommonArgs) -> Result<Self, CliError> {
        let config = ExperimentConfig::load(&args.config)?;
        let out = args.out.clone().unwrap_or_else(|| config.outputs.directory.clone());
        let experiment = Experiment::prepare(config, args.seed, args.grid_steps)?;
        ensure_dir(&out)?;
        Ok(Self { experiment, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        artifact(&self.out, name)
    }

    fn write_data(&self) -> Result<(), CliError> {
        let exp = &self.experiment;
        write_trajectory(&self.path("truth.csv"), &exp.truth)?;
        write_trajectory(&self.path("output.csv"), &exp.output)?;
        write_trajectory(&self.path("omega.csv"), &exp.omega)
    }

    fn estimate(&self, method: ObserverMethod) -> Result<Metrics, CliError> {
        let started = Instant::now();
        let run = self.experiment.estimate(method)?;
        let runtime = started.elapsed().as_secs_f64();
        self.write_run(&run)?;
        let err = estimation_error(&run, &self.experiment.truth)?;
        Ok(Metrics {
            method: method.name(),
            sup_error: err.sup_error,
            l2_error: err.l2_error,
            terminal_error: err.terminal_error,
            bound_violation: run.bound_violation,
            runtime_seconds: runtime,
        })
    }

    fn write_run(&self, run: &ObserverRun) -> Result<(), CliError> {
        let name = run.method.name();
        let outputs = &self.experiment.config.outputs;
        write_trajectory(&self.path(&format!("estimate_{name}.csv")), &run.x_hat_original)?;
        if outputs.shifted_estimates {
            write_trajectory(&self.path(&format!("estimate_{name}_shifted.csv")), &run.x_hat)?;
        }
        if outputs.diagnostics {
            write_diagnostics(&self.path(&format!("diagnostics_{name}.csv")), &run.x_hat, &run.per_step)?;
        }
        Ok(())
    }
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Nominal(args) => {
            let s = Session::open(&args)?;
            write_trajectory(&s.path("nominal.csv"), s.experiment.nominal.trajectory())
        }
        Command::Simulate(args) => {
            let s = Session::open(&args)?;
            s.write_data()?;
            let scenario = &s.experiment.scenario;
            write_trajectory(&s.path("disturbance.csv"), &scenario.v)?;
            write_trajectory(&s.path("noise.csv"), &scenario.mu)
        }
        Command::Estimate { common, method } => {
            let s = Session::open(&common)?;
            s.write_data()?;
            let metrics = s.estimate(method.into())?;
            write_json(&s.path("metrics.json"), &metrics)?;
            println!("{}", metrics_line(&metrics));
            Ok(())
        }
        Command::Verify { common, suite } => {
            let s = Session::open(&common)?;
            let report = run_suite(&s.experiment, suite)?;
            write_json(&s.path("report.json"), &report)?;
            print_report(&report);
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Verification(format!("suite {} has failing probes", suite.name())))
            }
        }
        Command::Compare(args) => compare(&args),
    }
}

fn compare(args: &CommonArgs) -> Result<(), CliError> {
    let s = Session::open(args)?;
    s.write_data()?;
    let linear = s.experiment.model.g.is_zero();
    let mut table = Vec::new();
    for method in ObserverMethod::ALL {
        if method == ObserverMethod::KalmanBucy && !linear {
            continue;
        }
        table.push(s.estimate(method)?);
    }
    write_json(&s.path("metrics.json"), &table)?;
    println!("{:<12} {:>12} {:>12} {:>12} {:>10}", "method", "sup", "l2", "terminal", "seconds");
    for m in &table {
        println!(
            "{:<12} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.3}",
            m.method, m.sup_error, m.l2_error, m.terminal_error, m.runtime_seconds
        );
    }
    Ok(())
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "{}: sup {:.4e}, l2 {:.4e}, terminal {:.4e}, {:.3}s",
        m.method, m.sup_error, m.l2_error, m.terminal_error, m.runtime_seconds
    )
}

fn print_report(report: &Report) {
    let counted = report.probes.iter().filter(|p| !p.excluded).count();
    let failed = report.probes.iter().filter(|p| !p.excluded && !p.passed).count();
    let excluded = report.probes.len() - counted;
    println!(
        "{}: {} ({} probes, {} failed, {} excluded)",
        report.suite.name(),
        if report.passed { "pass" } else { "FAIL" },
        counted,
        failed,
        excluded
    );
    if let Some(w) = report.worst() {
        println!("  worst: {} at t={} residual {:.3e} (tol {:.3e})", w.label, w.t, w.residual, w.tolerance);
    }
}

/// Convenience for tests and scripts: parse arguments and run.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::config(e.to_string()))?;
    run(cli)
}
