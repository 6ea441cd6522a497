use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tagmappo::harness::{cmd_eval, cmd_failure_eval, cmd_plot, cmd_train, cmd_validate, ExperimentSpec, HarnessError};

#[derive(Parser)]
#[command(name = "tagmappo", version, about = "Multi-UAV coverage training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment TOML file.
    config: PathBuf,
    /// Override a key, e.g. `--set train.episodes=50` or `--set world.num_users=40`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Checkpoint shared by all seeds (defaults to each seed's own).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed.
    Train(SpecArgs),
    /// Evaluate a trained controller (or K-Means) on fresh episodes.
    Eval(EvalArgs),
    /// Paired episodes with and without a mid-episode UAV failure.
    FailureEval(EvalArgs),
    /// Aggregate per-seed CSVs into a 95% band and draw SVG charts.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Parse a config and print it fully resolved.
    ValidateConfig(SpecArgs),
}

fn load(args: &SpecArgs, checkpoint: Option<&PathBuf>) -> Result<ExperimentSpec, HarnessError> {
    let mut spec = ExperimentSpec::load(&args.config, &args.sets)?;
    if let Some(out) = &args.out {
        spec.output_dir = out.clone();
    }
    if let Some(c) = checkpoint {
        spec.checkpoint = Some(c.clone());
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(a) => {
            let spec = load(&a, None)?;
            let out = cmd_train(&spec)?;
            for (seed, logs) in &out.runs {
                if let Some(last) = logs.last() {
                    println!("seed {seed}: final mean reward {:.4}, coverage {:.4}", last.mean_reward, last.c_cov);
                }
            }
            println!("wrote {}", spec.output_dir.display());
        }
        Command::Eval(a) => {
            let spec = load(&a.spec, a.checkpoint.as_ref())?;
            let agg = cmd_eval(&spec)?;
            for (name, bands) in &agg.columns {
                let m = bands.iter().map(|b| b.mean).sum::<f64>() / bands.len().max(1) as f64;
                println!("{name}: {m:.4}");
            }
        }
        Command::FailureEval(a) => {
            let spec = load(&a.spec, a.checkpoint.as_ref())?;
            let out = cmd_failure_eval(&spec)?;
            let recovered = out.recovery.iter().filter(|r| r.time_to_90.is_some()).count();
            println!("recovered to 90% in {recovered} of {} episodes", out.recovery.len());
        }
        Command::Plot { csv, out } => {
            for p in cmd_plot(&csv, &out)? {
                println!("{}", p.display());
            }
        }
        Command::ValidateConfig(a) => {
            let spec = load(&a, None)?;
            print!("{}", cmd_validate(&spec)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
