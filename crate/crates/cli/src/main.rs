use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opmix_cli::commands::{run_benchmark, run_fit, run_logdet, run_simulate, Outcome};
use opmix_cli::CliResult;

/// Mixed models with a smooth serially correlated effect, fitted in linear time.
#[derive(Parser)]
#[command(name = "opmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate variance parameters by restricted likelihood and write fit.json and predictions.csv.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also run the dense reference solver and report discrepancies.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict at the configured initial parameters without optimizing.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle: bool,
    },
    /// Draw a synthetic data set in the input CSV schema.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Time the grid solver and the log-determinant across grid sizes.
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        max_n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the approximate log-determinant of I + R0 on an equidistant grid.
    Logdet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        b: f64,
    },
}

fn init_threads() -> CliResult<()> {
    if let Ok(s) = std::env::var("OPMIX_THREADS") {
        let n: usize = s
            .parse()
            .map_err(|_| opmix_cli::CliError::Config(format!("OPMIX_THREADS={s:?} is not a thread count")))?;
        // fails only if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<Outcome> {
    init_threads()?;
    match cli.command {
        Command::Fit { data, config, out, oracle } => run_fit(&data, &config, &out, oracle, true),
        Command::Predict { data, config, out, oracle } => run_fit(&data, &config, &out, oracle, false),
        Command::Simulate { config, out, seed } => run_simulate(&config, &out, seed),
        Command::Benchmark { out, max_n, config } => run_benchmark(&out, max_n, config.as_deref()),
        Command::Logdet { config, n, a, b } => run_logdet(&config, n, a, b),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) => {
            if o == Outcome::NotConverged {
                eprintln!("warning: optimizer stopped before convergence; estimates are from the last simplex");
            }
            ExitCode::from(o.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
