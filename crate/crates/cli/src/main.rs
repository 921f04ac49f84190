//! `mobhfl` command-line entry point.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mobhfl::config::ExperimentConfig;
use mobhfl::harness::{self, exit};
use mobhfl::Error;

#[derive(Parser, Debug)]
#[command(name = "mobhfl", version, about = "Hierarchical federated learning with mobile vehicles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed applied to every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train once and write metrics and a checkpoint.
    Run(Common),
    /// Train every (speed, seed) pair and summarize.
    SweepSpeed {
        #[command(flatten)]
        common: Common,
        /// Comma-separated vehicle speeds in m/s.
        #[arg(long, value_delimiter = ',')]
        speeds: Option<Vec<f64>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Full-batch run checked against the convergence bounds.
    VerifyBounds(Common),
    /// Write the partition and a mobility trace without training.
    PartitionReport(Common),
}

fn load(common: &Common) -> mobhfl::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, out: &mut dyn Write) -> mobhfl::Result<i32> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let dir = harness::output_dir(&cfg, common.out.as_deref());
            let summary = harness::cmd_run(&cfg, &dir, out)?;
            if let Some(acc) = summary.max_accuracy {
                writeln!(out, "max_test_accuracy {acc:.4}")?;
            }
            Ok(exit::OK)
        }
        Command::SweepSpeed {
            common,
            speeds,
            seeds,
        } => {
            let mut cfg = load(&common)?;
            if let Some(v) = speeds {
                cfg.sweep.speeds = v;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            let dir = harness::output_dir(&cfg, common.out.as_deref());
            harness::cmd_sweep_speed(&cfg, &dir, common.parallel, out)?;
            Ok(exit::OK)
        }
        Command::VerifyBounds(common) => {
            let cfg = load(&common)?;
            let dir = harness::output_dir(&cfg, common.out.as_deref());
            let (code, _) = harness::cmd_verify_bounds(&cfg, &dir, out)?;
            Ok(code)
        }
        Command::PartitionReport(common) => {
            let cfg = load(&common)?;
            let dir = harness::output_dir(&cfg, common.out.as_deref());
            harness::cmd_partition_report(&cfg, &dir)?;
            Ok(exit::OK)
        }
    }
}

fn report(err: &Error) {
    match err {
        Error::Config(problems) => {
            eprintln!("error: invalid configuration");
            for p in problems {
                eprintln!("  {p}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let code = match execute(cli, &mut lock) {
        Ok(code) => code,
        Err(err) => {
            report(&err);
            harness::exit_code(&err)
        }
    };
    ExitCode::from(code as u8)
}
