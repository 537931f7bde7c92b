use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jar::commands;
use jar::config::{parse_override, Setting, SECTIONS};
use jar::{CliError, RunConfig};

/// Latent-resampling image-language fusion: train, sweep, ablate, gradcheck.
///
/// Settings come from built-in defaults, then `--config`, then overrides
/// (`--set section.key=value` or the equivalent `--section.key value`),
/// then the dedicated flags. Exit codes: 0 success, 1 failed
/// check, 2 usage or configuration error, 3 training divergence.
#[derive(Debug, Parser)]
#[command(name = "jar", version)]
struct Cli {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for initialisation, data and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every file a command writes.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for commands that run independent jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override one setting, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the synthetic tasks; writes train_log.csv and
    /// checkpoint.bin (plus weights.csv for task mixtures and dataset.bin
    /// when train.dump_samples > 0).
    Train(TrainArgs),
    /// Tabulate FLOPs, parameters and peak activations across one axis;
    /// prints the CSV and writes sweep.csv.
    Sweep(SweepArgs),
    /// Train one model per grid value and record FLOPs and accuracy in
    /// ablate_<axis>.csv.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of every fusion
    /// parameter on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Fusion kind: jar, concat, crossattn, perceiver or spatial.
    #[arg(long)]
    kind: Option<String>,
    /// Optimiser steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated tasks: presence, counting, spatial.
    #[arg(long)]
    tasks: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Samples per step.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Swept axis: image_size, width, depth, iterations or tokens.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated fusion kinds.
    #[arg(long)]
    kinds: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Ablated axis: iterations, tokens, combination, resample or layers.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long)]
    grid: Option<String>,
    /// Fusion kind trained in every cell.
    #[arg(long)]
    kind: Option<String>,
    /// Optimiser steps per cell; 0 evaluates the untrained models.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Fusion kind to check.
    #[arg(long)]
    kind: Option<String>,
    /// Relative error tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Break the backward pass of one op, to show the check catches it.
    #[arg(long, hide = true, value_name = "OP")]
    corrupt_backward: Option<String>,
}

fn flag(out: &mut Vec<Setting>, section: &str, key: &str, flag: &str, value: Option<String>) {
    if let Some(v) = value {
        out.push(Setting::new(section, key, v, format!("--{flag}")));
    }
}

fn overrides(cli: &Cli) -> Result<Vec<Setting>, CliError> {
    let mut out: Vec<Setting> = cli.sets.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
    flag(&mut out, "run", "seed", "seed", cli.seed.map(|v| v.to_string()));
    flag(&mut out, "run", "out_dir", "out-dir", cli.out_dir.as_ref().map(|p| p.display().to_string()));
    flag(&mut out, "run", "jobs", "jobs", cli.jobs.map(|v| v.to_string()));
    match &cli.command {
        Command::Train(a) => {
            flag(&mut out, "model", "kind", "kind", a.kind.clone());
            flag(&mut out, "train", "steps", "steps", a.steps.map(|v| v.to_string()));
            flag(&mut out, "task", "kinds", "tasks", a.tasks.clone());
            flag(&mut out, "train", "learning_rate", "lr", a.lr.map(|v| v.to_string()));
            flag(&mut out, "train", "batch_size", "batch-size", a.batch_size.map(|v| v.to_string()));
        }
        Command::Sweep(a) => {
            flag(&mut out, "sweep", "axis", "axis", a.axis.clone());
            flag(&mut out, "sweep", "grid", "grid", a.grid.clone());
            flag(&mut out, "sweep", "kinds", "kinds", a.kinds.clone());
        }
        Command::Ablate(a) => {
            flag(&mut out, "ablate", "axis", "axis", a.axis.clone());
            flag(&mut out, "ablate", "grid", "grid", a.grid.clone());
            flag(&mut out, "model", "kind", "kind", a.kind.clone());
            flag(&mut out, "train", "steps", "steps", a.steps.map(|v| v.to_string()));
        }
        Command::Gradcheck(a) => {
            flag(&mut out, "gradcheck", "kind", "kind", a.kind.clone());
            flag(&mut out, "gradcheck", "tolerance", "tolerance", a.tolerance.map(|v| v.to_string()));
        }
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli)?)?;
    match &cli.command {
        Command::Train(_) => {
            let out = commands::train(&cfg)?;
            let steps = out.log.rows.last().map_or(0, |r| r.step);
            println!(
                "trained {} for {steps} steps: accuracy {:.4} -> {:.4}, {} forward FLOPs",
                cfg.kind.name(),
                out.log.initial_accuracy,
                out.log.final_accuracy,
                out.log.total_flops()
            );
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep(_) => print!("{}", commands::sweep(&cfg)?),
        Command::Ablate(_) => print!("{}", commands::ablate(&cfg)?.1),
        Command::Gradcheck(a) => {
            let out = commands::gradcheck(&cfg, a.corrupt_backward.as_deref())?;
            print!("{}", out.text);
            if let Some(msg) = out.failure {
                return Err(CliError::Check(msg));
            }
            println!(
                "gradient check passed: max relative error {:.3e} <= {:e}",
                out.report.max_rel_error(),
                cfg.gradcheck.tolerance
            );
        }
    }
    Ok(())
}

/// Rewrites `--section.key value` and `--section.key=value` into `--set`.
fn expand_dotted(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut args = args.into_iter();
    while let Some(arg) = args.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|rest| rest.split_once('.').is_some_and(|(sec, _)| SECTIONS.contains(&sec)));
        match dotted {
            Some(rest) if rest.contains('=') => out.extend(["--set".to_string(), rest.to_string()]),
            Some(rest) => {
                let value = args.next().unwrap_or_default();
                out.extend(["--set".to_string(), format!("{rest}={value}")]);
            }
            None => out.push(arg),
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(expand_dotted(std::env::args()));
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
