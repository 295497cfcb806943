use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rclab_cli::manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "rclab",
    about = "Conditional-diffusion distillation lab: teacher training, caches, \
             random-conditioning distillation, and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a conditional denoiser from scratch
    TrainTeacher(RunArgs),
    /// Sample and cache teacher generations per condition
    GenCache(RunArgs),
    /// Distill a student from a frozen teacher
    Distill(RunArgs),
    /// Fidelity + Fréchet evaluation of a checkpoint
    Eval(RunArgs),
    /// Condition-swap phase experiment
    SwapExp(RunArgs),
    /// Closed-form noised-distribution overlap curve
    Overlap(RunArgs),
    /// Combine eval reports into a seen/unseen table
    Report(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Manifest describing the run
    #[arg(long)]
    manifest: PathBuf,
    /// Override the manifest seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the manifest output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(expected: &str, args: &RunArgs) -> Result<()> {
    let mut manifest = RunManifest::load(&args.manifest)?;
    if manifest.command_name() != expected {
        bail!(
            "manifest {:?} declares command {:?}, but the {expected} subcommand was invoked",
            args.manifest,
            manifest.command_name()
        );
    }
    if let Some(seed) = args.seed {
        manifest.set_seed(seed);
    }
    if let Some(out) = &args.out {
        manifest.set_out_dir(out.clone());
    }
    let outputs = rclab_cli::run(manifest).context(format!("{expected} run"))?;
    for artifact in &outputs.artifacts {
        println!("wrote {}", artifact.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::TrainTeacher(a) => ("train-teacher", a),
        Command::GenCache(a) => ("gen-cache", a),
        Command::Distill(a) => ("distill", a),
        Command::Eval(a) => ("eval", a),
        Command::SwapExp(a) => ("swap-exp", a),
        Command::Overlap(a) => ("overlap", a),
        Command::Report(a) => ("report", a),
    };
    match execute(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
