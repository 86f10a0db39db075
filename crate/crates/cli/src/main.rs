use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bino_core::harness::commands;
use bino_core::harness::train::config_from_checkpoint;
use bino_core::harness::ExperimentConfig;
use bino_core::encoder::Checkpoint;
use bino_core::{BinoError, Result};
use clap::{Args, Parser, Subcommand};

/// Binocular micro-cell encoder experiments.
#[derive(Parser)]
#[command(name = "bino", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set distill.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ProbeInputs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark to a directory.
    GenBench {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distillation pretraining. Without `--data` the pairs are generated from `bench.*`.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export normalized descriptor maps of a dataset.
    ExportDesc {
        #[command(flatten)]
        io: ProbeInputs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Frozen descriptor stereo probe.
    ProbeStereo {
        #[command(flatten)]
        io: ProbeInputs,
        #[arg(long)]
        dmax: Option<usize>,
        #[arg(long)]
        p1: Option<f64>,
        #[arg(long)]
        p2: Option<f64>,
        #[arg(long = "lr-tol")]
        lr_tol: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Layerwise token geometry probe.
    ProbeMech {
        #[command(flatten)]
        io: ProbeInputs,
        #[arg(long)]
        temp: Option<f64>,
        /// none, replace-right, row-shuffle-right or duplicate-left.
        #[arg(long)]
        counterfactual: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// WTA and SGM matching scores against synthbench ground truth.
    EvalSynth {
        #[command(flatten)]
        io: ProbeInputs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn build_config(args: &ConfigArgs, base: ExperimentConfig, extra: &[(&str, Option<String>)]) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => base,
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| BinoError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn plain(args: &ConfigArgs) -> Result<ExperimentConfig> {
    build_config(args, ExperimentConfig::default(), &[])
}

/// A resumed run keeps the checkpoint's config unless one is given explicitly.
fn pretrain_config(args: &ConfigArgs, resume: Option<&Path>) -> Result<ExperimentConfig> {
    let base = match resume {
        Some(p) if args.config.is_none() => config_from_checkpoint(&Checkpoint::load(p)?)?,
        _ => ExperimentConfig::default(),
    };
    build_config(args, base, &[])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenBench { out, cfg } => {
            let m = commands::gen_bench(&plain(&cfg)?, &out)?;
            eprintln!("wrote {} pairs to {}", m.samples.len(), out.display());
        }
        Command::Pretrain { out, data, resume, cfg } => {
            let cfg = pretrain_config(&cfg, resume.as_deref())?;
            let o = commands::pretrain(&cfg, data.as_deref(), &out, resume.as_deref())?;
            if let Some(last) = o.log.last() {
                eprintln!("step {} loss {:.4}", last.step, last.loss);
            }
        }
        Command::ExportDesc { io, cfg } => {
            commands::export_desc(&plain(&cfg)?, &io.ckpt, &io.data, &io.out)?;
        }
        Command::ProbeStereo { io, dmax, p1, p2, lr_tol, cfg } => {
            let extra = [
                ("probe.dmax", dmax.map(|v| v.to_string())),
                ("probe.p1", p1.map(|v| v.to_string())),
                ("probe.p2", p2.map(|v| v.to_string())),
                ("probe.lr_tol", lr_tol.map(|v| v.to_string())),
            ];
            let cfg = build_config(&cfg, ExperimentConfig::default(), &extra)?;
            commands::probe_stereo(&cfg, &io.ckpt, &io.data, &io.out)?;
        }
        Command::ProbeMech { io, temp, counterfactual, cfg } => {
            let extra = [
                ("mech.temperature", temp.map(|v| v.to_string())),
                ("mech.counterfactual", counterfactual),
            ];
            let cfg = build_config(&cfg, ExperimentConfig::default(), &extra)?;
            commands::probe_mech(&cfg, &io.ckpt, &io.data, &io.out)?;
        }
        Command::EvalSynth { io, cfg } => {
            commands::eval_synth(&plain(&cfg)?, &io.ckpt, &io.data, &io.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bino: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
