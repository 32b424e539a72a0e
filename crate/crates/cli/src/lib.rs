//! Experiment driver: configuration, run manifests and the `optshift`
//! subcommands.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod scaling;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use optshift_core::data::DataError;
use optshift_core::hessian::HessianError;
use optshift_core::linalg::LinalgError;
use optshift_core::net::NetError;
use optshift_core::shift::OsError;
use optshift_core::train::TrainError;

pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(_) | NetError::Checkpoint { .. } => CliError::Io(e.to_string()),
            NetError::Linalg(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) => CliError::Config(e.to_string()),
            DataError::Linalg(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<OsError> for CliError {
    fn from(e: OsError) -> Self {
        match e {
            OsError::Config(_) => CliError::Config(e.to_string()),
            OsError::Net(n) => n.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<HessianError> for CliError {
    fn from(e: HessianError) -> Self {
        match e {
            HessianError::InvalidArgument(_) => CliError::Config(e.to_string()),
            HessianError::Net(n) => n.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Os(o) => o.into(),
            TrainError::Net(n) => n.into(),
            TrainError::Hessian(h) => h.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "optshift", version, about = "Minimum-norm optimum shifting experiments")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "K=V")]
    set: Vec<String>,
    /// Output directory; must not already contain a run.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hutchinson probe count.
    #[arg(long, global = true)]
    probes: Option<usize>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, optionally with SOS, SAM and mixup.
    Train,
    /// Apply OS once to a checkpoint.
    OsApply {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Hessian trace, top eigenvalue and last-layer trace of a checkpoint.
    Hessian {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per SOS batch size and tabulate test accuracy.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![8, 32, 64, 127, 128])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Paired multi-seed comparison: SGD vs SGD+SOS and SAM vs SAM+SOS.
    Compare {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// SAM radius used when the config does not set train.sam.
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
    },
    /// Time the OS solve against batch size and fit c1·b² + c2·b³.
    Scaling {
        #[arg(long, value_delimiter = ',', default_values_t = vec![32, 64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 512)]
        features: usize,
        #[arg(long, default_value_t = 10)]
        outputs: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => String::new(),
    };
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(p) = cli.probes {
        overrides.push(format!("hessian.probes={p}"));
    }
    Ok(RunConfig::from_text(&text, &overrides)?)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let out = |name: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from("optshift-out").join(name));
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let run = commands::cmd_train(&cfg, &out("train"))?;
            if let Some(row) = run.outcome.rows.last() {
                say(format!(
                    "epoch {}: train_loss {:.6} train_acc {:.4} test_acc {}",
                    row.epoch,
                    row.train_loss,
                    row.train_acc,
                    row.test_acc.map_or("-".into(), |a| format!("{a:.4}"))
                ));
            }
        }
        Command::OsApply { checkpoint } => {
            let cfg = load_config(cli)?;
            let s = commands::cmd_os_apply(&cfg, checkpoint, &out("os-apply"))?;
            say(format!(
                "norm {:.6} -> {:.6}, rank {}, drift {:.2e}, test_acc {:.4} -> {:.4}",
                s.report.norm_before, s.report.norm_after, s.report.rank, s.report.logit_drift, s.test_acc_before, s.test_acc_after
            ));
        }
        Command::Hessian { checkpoint } => {
            let cfg = load_config(cli)?;
            let r = commands::cmd_hessian(&cfg, checkpoint, &out("hessian"))?;
            say(format!(
                "trace {:.6} ± {:.6} ({} probes), top eigenvalue {:.6}, last-layer trace {:.6}",
                r.hutchinson_trace, r.hutchinson_stderr, r.probes, r.top_eigenvalue, r.exact_last_layer_trace
            ));
        }
        Command::Sweep { batches, seeds } => {
            let cfg = load_config(cli)?;
            let rows = commands::cmd_sweep(&cfg, batches, *seeds, &out("sweep"))?;
            say(commands::sweep_csv(&rows));
        }
        Command::Compare { seeds, rho } => {
            let cfg = load_config(cli)?;
            let report = commands::cmd_compare(&cfg, *seeds, *rho, &out("compare"))?;
            for arm in &report.arms {
                say(format!(
                    "{}: {:.4} -> {:.4} (paired diff {:+.4} ± {:.4})",
                    arm.name, arm.mean_base, arm.mean_sos, arm.diff_mean, arm.diff_std
                ));
            }
        }
        Command::Scaling {
            sizes,
            features,
            outputs,
            repeats,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let report = commands::cmd_scaling(sizes, *features, *outputs, *repeats, seed, &out("scaling"))?;
            say(format!("c1 {:.3e} c2 {:.3e} R² {:.4}", report.c1, report.c2, report.r_squared));
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("optshift: {e}");
            e.exit_code()
        }
    }
}
