//! One function per `bino` subcommand. Each writes a run manifest before starting
//! and finalizes it with the outcome.

use std::path::Path;

use serde_json::Value;

use super::config::ExperimentConfig;
use super::probe::{self, Dataset, Model};
use super::train::{self, PretrainOutcome};
use super::{manifest_for_file, write_json, RunManifest, RUN_MANIFEST_NAME};
use crate::encoder::Checkpoint;
use crate::fusion::ImagePair;
use crate::synthbench::{generate, write_dataset, BenchManifest};
use crate::Result;

fn finish<T>(manifest: RunManifest, outcome: Result<T>) -> Result<T> {
    manifest.finish(&outcome)?;
    outcome
}

pub fn gen_bench(cfg: &ExperimentConfig, out: &Path) -> Result<BenchManifest> {
    cfg.bench.validate()?;
    let mut m = RunManifest::begin(&out.join(RUN_MANIFEST_NAME), "gen-bench", &cfg.echo(), cfg.bench.seed)?;
    let outcome = generate(&cfg.bench).and_then(|samples| write_dataset(out, &cfg.bench, &samples));
    if let Ok(bm) = &outcome {
        m.add_output(&out.join(crate::synthbench::MANIFEST_NAME));
        for e in &bm.samples {
            for f in [&e.left, &e.right, &e.gt] {
                m.add_output(&out.join(f));
            }
        }
    }
    finish(m, outcome)
}

/// Training pairs from a synthbench directory, or generated in memory from `bench.*`.
pub fn training_pairs(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<ImagePair>> {
    match data {
        Some(root) => Ok(Dataset::load(root)?.pairs()),
        None => Ok(generate(&cfg.bench)?.into_iter().map(|s| s.pair).collect()),
    }
}

pub fn pretrain(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut m = RunManifest::begin(&out.join(RUN_MANIFEST_NAME), "pretrain", &cfg.echo(), cfg.run.seed)?;
    let outcome = (|| {
        let ck = resume.map(Checkpoint::load).transpose()?;
        let pairs = training_pairs(cfg, data)?;
        train::pretrain(cfg, &pairs, out, ck.as_ref())
    })();
    match &outcome {
        Ok(o) => {
            m.add_output(&o.log_path);
            for c in &o.checkpoints {
                m.add_output(c);
            }
        }
        Err(_) => {
            for name in [train::LOG_NAME, train::LAST_GOOD_NAME] {
                let p = out.join(name);
                if p.exists() {
                    m.add_output(&p);
                }
            }
        }
    }
    finish(m, outcome)
}

fn load(cfg: &ExperimentConfig, ckpt: &Path, data: &Path) -> Result<(Model, Dataset, ExperimentConfig)> {
    let model = Model::load(ckpt)?;
    let dataset = Dataset::load(data)?;
    let eff = probe::effective_config(&model, cfg);
    Ok((model, dataset, eff))
}

fn report_command(
    name: &str,
    cfg: &ExperimentConfig,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    run: impl FnOnce(&Model, &ExperimentConfig, &Dataset) -> Result<Value>,
) -> Result<Value> {
    let (model, dataset, eff) = load(cfg, ckpt, data)?;
    let mut m = RunManifest::begin(&manifest_for_file(out), name, &eff.echo(), eff.run.seed)?;
    let outcome = run(&model, cfg, &dataset).and_then(|rep| {
        write_json(out, &rep)?;
        Ok(rep)
    });
    if outcome.is_ok() {
        m.add_output(out);
    }
    finish(m, outcome)
}

pub fn probe_stereo(cfg: &ExperimentConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<Value> {
    report_command("probe-stereo", cfg, ckpt, data, out, probe::probe_stereo)
}

pub fn probe_mech(cfg: &ExperimentConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<Value> {
    report_command("probe-mech", cfg, ckpt, data, out, probe::probe_mech)
}

pub fn eval_synth(cfg: &ExperimentConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<Value> {
    report_command("eval-synth", cfg, ckpt, data, out, probe::eval_synth)
}

/// Writes normalized descriptor maps as a tensor archive (checkpoint container).
pub fn export_desc(cfg: &ExperimentConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, dataset, eff) = load(cfg, ckpt, data)?;
    let mut m = RunManifest::begin(&manifest_for_file(out), "export-desc", &eff.echo(), eff.run.seed)?;
    let outcome = probe::export_desc(&model, &dataset.samples).and_then(|descs| {
        probe::descriptor_archive(&eff.echo(), &dataset.samples, &descs).save(out)
    });
    if outcome.is_ok() {
        m.add_output(out);
    }
    finish(m, outcome)
}
