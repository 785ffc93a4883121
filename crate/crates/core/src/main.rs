use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sphereloss::experiments::{emit_reports, load_config, run_experiment, Experiment, ExperimentConfig, REPORT_FILE};

const DEFAULT_OUT: &str = "sphereloss-out";

#[derive(Parser)]
#[command(name = "sphereloss", version, about = "Angular-margin loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Target logit against target angle for each configured loss.
    LogitCurves(RunArgs),
    /// Grid of angle pairs where the true class does not win.
    OverlapMap(RunArgs),
    /// Per-layer parameter and FLOP counts of an architecture.
    Flops(RunArgs),
    /// Train one model with one loss.
    Train(RunArgs),
    /// Train once per margin and compare.
    MarginSweep(RunArgs),
    /// Pretrain with one loss, then fine-tune with another.
    TwoStage(RunArgs),
    /// Train a teacher, then a student pulled towards its embeddings.
    Distill(RunArgs),
    /// Verification, TAR@FAR and identification on fixed embeddings.
    Eval(RunArgs),
    /// Merge every summary.json under --out into one comparison CSV.
    Report {
        #[arg(long, env = "SPHERELOSS_OUT")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; built-in defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, env = "SPHERELOSS_OUT")]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn run(kind: &str, args: RunArgs) -> Result<()> {
    let (mut config, base) = match &args.config {
        Some(path) => {
            let config = load_config(path)?;
            if config.experiment.kind() != kind {
                bail!(
                    "{} describes a `{}` experiment, not `{kind}`",
                    path.display(),
                    config.experiment.kind()
                );
            }
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (config, base)
        }
        None => {
            let Some(seed) = args.seed else {
                bail!("--seed is required when no --config is given");
            };
            let experiment = Experiment::default_for(kind).expect("every subcommand has a default");
            (
                ExperimentConfig {
                    seed,
                    out: None,
                    experiment,
                },
                PathBuf::from("."),
            )
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = match (args.out, &config.out) {
        (Some(o), _) => o,
        (None, Some(o)) => resolve(&base, o.clone()),
        (None, None) => PathBuf::from(DEFAULT_OUT),
    };
    let output = run_experiment(&config, &out, &base).with_context(|| format!("{kind} experiment failed"))?;
    for f in &output.files {
        println!("{}", f.display());
    }
    for s in &output.summaries {
        let acc = s.verification_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "{}: steps={} diverged={} verification_accuracy={acc}",
            s.run_id, s.steps, s.diverged
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let (kind, args) = match cli.command {
        Command::LogitCurves(a) => ("logit-curves", a),
        Command::OverlapMap(a) => ("overlap-map", a),
        Command::Flops(a) => ("flops", a),
        Command::Train(a) => ("train", a),
        Command::MarginSweep(a) => ("margin-sweep", a),
        Command::TwoStage(a) => ("two-stage", a),
        Command::Distill(a) => ("distill", a),
        Command::Eval(a) => ("eval", a),
        Command::Report { out } => {
            let csv = emit_reports(&out)?;
            let path = out.join(REPORT_FILE);
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
            return Ok(());
        }
    };
    run(kind, args)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
