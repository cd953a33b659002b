//! Experiment runner: parses a subcommand and its config, runs the study with a fixed seed, and
//! writes CSV tables, a run manifest and checkpoints to the output directory.
//!
//! Exit status is 0 on success, 2 for configuration or usage errors, 3 when a training run
//! diverges (the partial history is still written) and 1 for any other failure.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use artifacts::{Manifest, RunDir, Status, MANIFEST};
use clap::{Args, Parser, Subcommand};
use commands::*;
use config::{resolve, ExperimentConfig, Overrides};
use error::{CliError, CliResult};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "sciml", version, about = "Scientific machine-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON config with optional `seed`, `precision`, `output_dir` and a complete `params` record.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; overrides the config file and the SCIML_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `sciml-out/<subcommand>`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Digits after the decimal point in CSV floats (1..=17, default 12).
    #[arg(long)]
    precision: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            seed: self.seed,
            precision: self.precision,
            output_dir: self.out.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference solve of steady advection-diffusion, compared with the exact solution.
    SolveFd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        /// Grid intervals.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Chebyshev collocation solve, optionally refit by least squares.
    SolveSpectral {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fits a scalar MLP to a one-dimensional target with mini-batch training.
    TrainMlp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Checkpoint to start from.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Physics-informed network for advection-diffusion.
    TrainPinn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// DeepONet on the antiderivative operator.
    TrainDeeponet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fourier neural operator on the periodic screened Poisson problem.
    TrainFno {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Neural ODE learning the flow map of x' = x.
    TrainNode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Wasserstein GAN with gradient penalty on a target distribution.
    TrainWgan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Convolution, transpose-convolution, checkerboard and stencil tables.
    ConvDemo {
        #[command(flatten)]
        common: Common,
    },
    /// Single-sample SGD on the four-quadratic toy problem.
    SgdToy {
        #[command(flatten)]
        common: Common,
        /// `constant` or `inverse_sqrt`.
        #[arg(long, value_parser = parse_schedule)]
        lr_schedule: Option<sciml_core::optim::Schedule>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Gradient fidelity sweep over random smooth networks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn parse_schedule(s: &str) -> Result<sciml_core::optim::Schedule, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown schedule {s:?}; expected constant or inverse_sqrt"))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write_manifest<P: Serialize>(
    dir: &mut RunDir,
    command: &str,
    cfg: &ExperimentConfig<P>,
    status: Status,
    metrics: serde_json::Map<String, serde_json::Value>,
    error: Option<String>,
) -> CliResult<()> {
    let manifest = Manifest {
        command,
        status,
        seed: cfg.seed,
        precision: cfg.precision,
        output_dir: cfg.output_dir.display().to_string(),
        params: serde_json::to_value(&cfg.params).map_err(|e| sciml_core::Error::Serialization(e.to_string()))?,
        metrics,
        files: dir.files(),
        error,
    };
    dir.write_json(MANIFEST, &manifest)
}

/// Resolves the config, runs `body` and writes the manifest whatever the outcome.
fn execute<P>(
    command: &str,
    common: &Common,
    apply: impl FnOnce(&mut P),
    body: impl FnOnce(&P, &mut Ctx) -> CliResult<Outcome>,
) -> CliResult<serde_json::Map<String, serde_json::Value>>
where
    P: Serialize + DeserializeOwned + Default,
{
    let mut cfg: ExperimentConfig<P> = resolve(command, &common.overrides())?;
    apply(&mut cfg.params);
    let out = RunDir::create(&cfg.output_dir)?;
    let mut ctx = Ctx {
        seed: cfg.seed,
        precision: cfg.precision,
        out,
    };
    match body(&cfg.params, &mut ctx) {
        Ok(Outcome { metrics, diverged: None }) => {
            write_manifest(&mut ctx.out, command, &cfg, Status::Completed, metrics.0.clone(), None)?;
            Ok(metrics.0)
        }
        Ok(Outcome { metrics, diverged: Some(msg) }) => {
            write_manifest(&mut ctx.out, command, &cfg, Status::Diverged, metrics.0, Some(msg.clone()))?;
            Err(CliError::Diverged(msg))
        }
        Err(e) => {
            let status = if e.exit_code() == 3 { Status::Diverged } else { Status::Failed };
            write_manifest(&mut ctx.out, command, &cfg, status, Default::default(), Some(e.to_string()))?;
            Err(e)
        }
    }
}

fn dispatch(command: Command) -> CliResult<serde_json::Map<String, serde_json::Value>> {
    match command {
        Command::SolveFd { common, a, kappa, n } => execute(
            "solve-fd",
            &common,
            |p: &mut SolveFdParams| {
                set(&mut p.a, a);
                set(&mut p.kappa, kappa);
                set(&mut p.n, n);
            },
            solve_fd_cmd,
        ),
        Command::SolveSpectral { common, n } => execute("solve-spectral", &common, |p: &mut SolveSpectralParams| set(&mut p.n, n), solve_spectral_cmd),
        Command::TrainMlp { common, epochs, lr, init } => execute(
            "train-mlp",
            &common,
            |p: &mut TrainMlpParams| {
                set(&mut p.epochs, epochs);
                set(&mut p.lr, lr);
                if let Some(path) = init {
                    // A path given on the command line is taken relative to the working directory.
                    p.init = Some(std::path::absolute(&path).unwrap_or(path));
                }
            },
            train_mlp_cmd,
        ),
        Command::TrainPinn { common, iters, lr } => execute(
            "train-pinn",
            &common,
            |p: &mut TrainPinnParams| {
                set(&mut p.iters, iters);
                set(&mut p.lr, lr);
            },
            train_pinn_cmd,
        ),
        Command::TrainDeeponet { common, epochs } => {
            execute("train-deeponet", &common, |p: &mut TrainDeepOnetParams| set(&mut p.epochs, epochs), train_deeponet_cmd)
        }
        Command::TrainFno { common, epochs } => execute("train-fno", &common, |p: &mut TrainFnoParams| set(&mut p.epochs, epochs), train_fno_cmd),
        Command::TrainNode { common, epochs } => execute("train-node", &common, |p: &mut TrainNodeParams| set(&mut p.epochs, epochs), train_node_cmd),
        Command::TrainWgan { common, epochs } => execute("train-wgan", &common, |p: &mut TrainWganParams| set(&mut p.epochs, epochs), train_wgan_cmd),
        Command::ConvDemo { common } => execute("conv-demo", &common, |_: &mut ConvDemoParams| {}, conv_demo_cmd),
        Command::SgdToy { common, lr_schedule, lr, steps } => execute(
            "sgd-toy",
            &common,
            |p: &mut SgdToyParams| {
                set(&mut p.lr_schedule, lr_schedule);
                set(&mut p.lr, lr);
                set(&mut p.steps, steps);
            },
            sgd_toy_cmd,
        ),
        Command::Gradcheck { common, count } => execute("gradcheck", &common, |p: &mut GradcheckParams| set(&mut p.count, count), gradcheck_cmd),
    }
}

/// Runs the command line `argv` (including the program name) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(metrics) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&metrics).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
