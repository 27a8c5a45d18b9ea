use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::Context;
use config::ExperimentConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "epiwave", version, about = "Age-of-infection epidemic model with nonlocal dispersal")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; same as `--override output.dir=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Set a dotted config key, e.g. `rates.tau0=3`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads.
    #[arg(long, global = true, env = "EPIWAVE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print R0 and ρ*.
    R0,
    /// Run the renewal solver and write Φ and field snapshots.
    Simulate,
    /// Heterogeneous stationary state and far-field rate λ.
    Stationary,
    /// Spreading speed c*, α* and the c(α) table.
    Dispersion,
    /// Traveling-wave profiles (default c* and 2c*).
    Wave {
        /// Wave speed; repeatable. Overrides wave.speeds.
        #[arg(long)]
        speed: Vec<f64>,
    },
    /// Simulate, track fronts, fit speeds and compare with U.
    Spread,
    /// Run the acceptance suite.
    Validate,
    /// Print the canonical config.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    if let Some(out) = &cli.out {
        let dir = out.to_str().ok_or_else(|| CliError::Config("output path is not UTF-8".into()))?;
        overrides.push(format!("output.dir={}", toml_string(dir)));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let ctx = Context::new(cfg);
    match cli.command {
        Command::R0 => commands::r0(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Stationary => commands::stationary(&ctx),
        Command::Dispersion => commands::dispersion(&ctx),
        Command::Wave { speed } => commands::wave(&ctx, &speed),
        Command::Spread => commands::spread(&ctx),
        Command::Validate => commands::validate(&ctx),
        Command::Config => commands::show_config(&ctx),
    }
}

/// Quote a string as a TOML basic string.
fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
