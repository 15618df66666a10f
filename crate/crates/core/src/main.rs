use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use combts::harness::commands::{
    cmd_gen_synthetic, cmd_multiseed, cmd_report, cmd_run, cmd_significance, cmd_validate_config,
};
use combts::harness::synthetic::SyntheticSpec;

#[derive(Parser)]
#[command(name = "combts", version, about = "Modular forecasting pipelines and paired Monte Carlo attribution")]
struct Cli {
    /// Root directory for dataset paths in configs.
    #[arg(long, global = true, env = "COMBTS_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample conditions, build the plan and execute it (resumes from the log).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-horizon and pooled statistics of a run directory or log.
    Report {
        log: PathBuf,
        #[arg(long, default_value = "eo")]
        group_by: String,
    },
    /// One-tailed Mann-Whitney test that variant A beats variant B.
    Significance {
        log: PathBuf,
        a: String,
        b: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Run the plan once per seed and compare the pooled statistics.
    Multiseed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write a synthetic periodic series as CSV.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        variates: usize,
        #[arg(long, default_value_t = 24)]
        period: usize,
        #[arg(long, default_value_t = 1)]
        harmonics: usize,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.0)]
        trend: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a config and print its hashes and run count.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let data_dir = cli.data_dir.as_deref();
    let result = match cli.command {
        Command::Run { config, parallelism, out } => {
            cmd_run(&config, data_dir, parallelism.unwrap_or_else(cores), out.as_deref(), true, &mut stdout).map(|_| ())
        }
        Command::Report { log, group_by } => cmd_report(&log, &group_by, &mut stdout).map(|_| ()),
        Command::Significance { log, a, b, alpha } => cmd_significance(&log, &a, &b, alpha, &mut stdout).map(|_| ()),
        Command::Multiseed {
            config,
            parallelism,
            out,
            seeds,
        } => cmd_multiseed(
            &config,
            data_dir,
            parallelism.unwrap_or_else(cores),
            out.as_deref(),
            seeds.as_deref(),
            true,
            &mut stdout,
        )
        .map(|_| ()),
        Command::GenSynthetic {
            out,
            length,
            variates,
            period,
            harmonics,
            amplitude,
            trend,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                length,
                variates,
                period,
                harmonics,
                amplitude,
                trend,
                noise,
                seed,
            };
            cmd_gen_synthetic(&spec, &out, &mut stdout)
        }
        Command::ValidateConfig { config } => cmd_validate_config(&config, &mut stdout).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
