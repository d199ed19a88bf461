//! Command-line driver for single scenarios and parameter sweeps.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowclust::experiment::{self, ConfigFile, ExperimentError};
use flowclust::metrics;
use flowclust::sim::{self, RunOptions};

#[derive(Parser)]
#[command(name = "flowclust", version, about = "Simulate logical clustering of flow-sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "FLOWCLUST_OUT", default_value = "out")]
    out: PathBuf,
    /// Parallel scenario runs for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Write a per-packet trace.
    #[arg(long, global = true)]
    trace: bool,
    /// Print every sink's serialized state after each run.
    #[arg(long, global = true)]
    dump_state: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        /// Scenario file, or a preset name.
        config: String,
    },
    /// Run a sweep file or preset (fig7, fig10, fig11, fig14, fig16).
    Sweep {
        config: String,
        /// Override the number of seeds per swept value.
        #[arg(long)]
        repetitions: Option<u32>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        trace: common.trace,
        records: false,
        dump_state: common.dump_state,
    }
}

fn run_one(config: &str, common: &Common) -> Result<(), Failure> {
    let mut cfg = match experiment::load(config)? {
        ConfigFile::Scenario(cfg) => cfg,
        ConfigFile::Sweep(spec) => {
            return Err(Failure::Config(format!(
                "{config} sweeps `{}`; use the `sweep` command",
                spec.axis
            )))
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = sim::run_with(&cfg, options(common)).map_err(|e| match e {
        sim::SimError::Config(c) => Failure::Config(c.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;

    fs::create_dir_all(&common.out).map_err(|e| {
        Failure::Runtime(format!("cannot create {}: {e}", common.out.display()))
    })?;
    let csv = metrics::csv_string(&out.report.csv_rows("run"))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&common.out.join("results.csv"), &csv)?;
    if common.trace {
        write_file(&common.out.join("trace.csv"), &out.trace)?;
    }
    if common.dump_state {
        write_file(&common.out.join("state.txt"), &out.state_dump)?;
        println!("{}", out.state_dump);
    }
    for g in &out.report.groups {
        eprintln!(
            "group {}: tx {} rx {} delay {} s jitter {:.6} s loss {}",
            g.group,
            g.tx,
            g.rx,
            g.mean_delay_s.map_or("-".into(), |d| format!("{d:.6}")),
            g.mean_jitter_s,
            g.loss_ratio.map_or("-".into(), |l| format!("{l:.4}")),
        );
    }
    eprintln!("results written to {}", common.out.display());
    Ok(())
}

fn run_sweep(config: &str, repetitions: Option<u32>, common: &Common) -> Result<(), Failure> {
    let mut spec = experiment::load(config)?.into_sweep();
    if let Some(seed) = common.seed {
        spec.base.seed = seed;
    }
    if let Some(r) = repetitions {
        spec.repetitions = r;
    }
    let result = match experiment::run_sweep_with(&spec, common.workers, options(common)) {
        Ok(result) => result,
        Err(ExperimentError::SweepFailed {
            failed,
            total,
            result,
        }) => {
            result.write_to(&common.out)?;
            return Err(Failure::Runtime(format!(
                "{failed} of {total} runs failed; partial results and manifest in {}",
                common.out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    result.write_to(&common.out)?;
    if common.dump_state {
        for (run, out) in result.runs.iter().zip(&result.outcomes) {
            if let Ok(out) = out {
                println!("# {}\n{}", run.run_id, out.state_dump);
            }
        }
    }
    eprintln!(
        "{} runs over `{}` written to {}",
        result.runs.len(),
        spec.axis,
        common.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run_one(config, &cli.common),
        Command::Sweep {
            config,
            repetitions,
        } => run_sweep(config, *repetitions, &cli.common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
