//! Pretraining loop with periodic checkpoints and exact resume.
//!
//! Every step draws its batch, nuisance and masks from a generator seeded by
//! `(run.seed, step)`, so a run resumed from a checkpoint replays the same steps as
//! an uninterrupted one.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::distill::{apply_nuisance, DistillConfig, DistillState, Distiller, StepStats};
use crate::encoder::{Checkpoint, Encoder};
use crate::fusion::ImagePair;
use crate::tensor::{Moments, Tensor};
use crate::{BinoError, Result};

pub const LOG_NAME: &str = "train_log.csv";
pub const FINAL_NAME: &str = "final.bin";
pub const LAST_GOOD_NAME: &str = "last_good.bin";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.bin")
}

pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ (step as u64).wrapping_add(1).wrapping_mul(0xE703_7ED1_A0B4_28DB)
}

pub fn distiller(cfg: &ExperimentConfig) -> Result<Distiller> {
    Distiller::new(Encoder::new(cfg.encoder.clone())?, cfg.distill.clone())
}

pub fn initial_state(cfg: &ExperimentConfig, d: &Distiller) -> DistillState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    d.init_state(cfg.run.seed, &mut rng)
}

/// Draws `cfg.batch` pairs with replacement and applies the nuisance model.
pub fn sample_batch<R: Rng + ?Sized>(data: &[ImagePair], cfg: &DistillConfig, rng: &mut R) -> Vec<ImagePair> {
    (0..cfg.batch)
        .map(|_| {
            let mut p = data[rng.random_range(0..data.len())].clone();
            p.gt_disp = None;
            p.valid = None;
            apply_nuisance(&mut p, &cfg.nuisance, rng);
            p
        })
        .collect()
}

const META_STEP: &str = "ckpt.step";
const META_ADAM_STEP: &str = "ckpt.adam_step";

pub fn state_checkpoint(cfg: &ExperimentConfig, st: &DistillState) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (k, v) in cfg.echo() {
        ck.set_meta(k, v);
    }
    ck.set_meta(META_STEP, st.step.to_string());
    ck.set_meta(META_ADAM_STEP, st.moments.step.to_string());
    ck.push_params("student", &st.student);
    ck.push_params("teacher", &st.teacher);
    ck.push_params("adam.m", &st.moments.first);
    ck.push_params("adam.v", &st.moments.second);
    let k = st.center.len();
    ck.push("center", Tensor::new(vec![k], st.center.clone()).expect("center shape"));
    ck
}

/// Experiment config recorded in a checkpoint's metadata.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut any = false;
    for (k, v) in &ck.meta {
        if k.starts_with("ckpt.") {
            continue;
        }
        cfg.set(k, v)
            .map_err(|e| BinoError::Data(format!("checkpoint metadata: {e}")))?;
        any = true;
    }
    if !any {
        return Err(BinoError::Data("checkpoint carries no configuration".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta_value(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| BinoError::Data(format!("checkpoint lacks '{key}'")))
}

pub fn restore(ck: &Checkpoint) -> Result<(ExperimentConfig, DistillState)> {
    let cfg = config_from_checkpoint(ck)?;
    let student = ck.params("student")?;
    let teacher = ck.params("teacher")?;
    let first = ck.params("adam.m")?;
    let second = ck.params("adam.v")?;
    if !student.is_aligned_with(&teacher) || !student.is_aligned_with(&first) || !student.is_aligned_with(&second) {
        return Err(BinoError::Data("checkpoint parameter sets disagree".into()));
    }
    let center = ck
        .get("center")
        .ok_or_else(|| BinoError::Data("checkpoint lacks the teacher center".into()))?
        .data()
        .to_vec();
    if center.len() != cfg.distill.proj_dim {
        return Err(BinoError::Data("center size differs from distill.proj_dim".into()));
    }
    let state = DistillState {
        student,
        teacher,
        center,
        moments: Moments {
            first,
            second,
            step: meta_usize(ck, META_ADAM_STEP)? as u64,
        },
        step: meta_usize(ck, META_STEP)?,
    };
    Ok((cfg, state))
}

pub struct PretrainOutcome {
    pub state: DistillState,
    /// Steps run in this invocation.
    pub log: Vec<StepStats>,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn open_log(path: &Path, start: usize) -> Result<std::fs::File> {
    let mut text = format!("{}\n", StepStats::CSV_HEADER);
    if start > 0 {
        if let Ok(old) = std::fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < start) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    std::fs::write(path, text).map_err(|e| BinoError::io(path, e))?;
    std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| BinoError::io(path, e))
}

/// Runs (or continues) distillation up to `distill.steps`, writing the loss log and
/// checkpoints into `out`. A non-finite step stops the run, saves the untouched
/// state as `last_good.bin` and returns the error.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data: &[ImagePair],
    out: &Path,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(BinoError::Data("no training pairs".into()));
    }
    let d = distiller(cfg)?;
    for p in data {
        cfg.encoder.geometry.check_pair(p)?;
    }
    let mut state = match resume {
        Some(ck) => {
            let (ck_cfg, st) = restore(ck)?;
            if ck_cfg.echo() != cfg.echo() {
                return Err(BinoError::Config(
                    "resume config differs from the checkpoint's recorded config".into(),
                ));
            }
            st
        }
        None => initial_state(cfg, &d),
    };
    std::fs::create_dir_all(out).map_err(|e| BinoError::io(out, e))?;
    let log_path = out.join(LOG_NAME);
    let mut log_file = open_log(&log_path, state.step)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while state.step < cfg.distill.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.run.seed, state.step));
        let batch = sample_batch(data, &cfg.distill, &mut rng);
        let stats = match d.train_step(&mut state, &batch, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                let path = out.join(LAST_GOOD_NAME);
                state_checkpoint(cfg, &state).save(&path)?;
                return Err(e);
            }
        };
        writeln!(log_file, "{}", stats.csv_line()).map_err(|e| BinoError::io(&log_path, e))?;
        log.push(stats);
        let every = cfg.run.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < cfg.distill.steps {
            let path = out.join(checkpoint_name(state.step));
            state_checkpoint(cfg, &state).save(&path)?;
            checkpoints.push(path);
        }
    }
    let path = out.join(FINAL_NAME);
    state_checkpoint(cfg, &state).save(&path)?;
    checkpoints.push(path);
    Ok(PretrainOutcome {
        state,
        log,
        log_path,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::generate;

    fn tiny() -> (ExperimentConfig, Vec<ImagePair>) {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("encoder.depth", "1"),
            ("encoder.dim", "8"),
            ("encoder.heads", "2"),
            ("encoder.ffn_ratio", "2"),
            ("encoder.height", "8"),
            ("encoder.width", "16"),
            ("distill.proj_dim", "6"),
            ("distill.head_hidden", "5"),
            ("distill.batch", "2"),
            ("distill.steps", "4"),
            ("bench.height", "8"),
            ("bench.width", "16"),
            ("bench.shift", "0,4"),
            ("bench.count", "3"),
            ("run.checkpoint_every", "2"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let data = generate(&cfg.bench).unwrap().into_iter().map(|s| s.pair).collect();
        (cfg, data)
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (cfg, data) = tiny();
        let a = tempfile::tempdir().unwrap();
        let full = pretrain(&cfg, &data, a.path(), None).unwrap();
        assert_eq!(full.log.len(), 4);
        assert_eq!(full.checkpoints.len(), 2);

        let b = tempfile::tempdir().unwrap();
        let ck = Checkpoint::load(&a.path().join(checkpoint_name(2))).unwrap();
        let resumed = pretrain(&cfg, &data, b.path(), Some(&ck)).unwrap();
        assert_eq!(resumed.log, full.log[2..]);
        assert_eq!(resumed.state, full.state);

        let again = tempfile::tempdir().unwrap();
        pretrain(&cfg, &data, again.path(), None).unwrap();
        for name in [LOG_NAME, FINAL_NAME] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(again.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn checkpoint_restores_state() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&cfg, &data, dir.path(), None).unwrap();
        let ck = Checkpoint::load(&dir.path().join(FINAL_NAME)).unwrap();
        let (back_cfg, back) = restore(&ck).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back, out.state);
    }

    #[test]
    fn seed_changes_first_loss() {
        let (cfg, data) = tiny();
        let mut other = cfg.clone();
        other.run.seed = 1;
        other.distill.steps = 1;
        let mut one = cfg.clone();
        one.distill.steps = 1;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let la = pretrain(&one, &data, a.path(), None).unwrap();
        let lb = pretrain(&other, &data, b.path(), None).unwrap();
        assert_eq!(la.log.len(), 1);
        assert_eq!(la.checkpoints.len(), 1);
        assert_ne!(la.log[0].loss, lb.log[0].loss);
        let text = std::fs::read_to_string(a.path().join(LOG_NAME)).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn divergence_keeps_last_good() {
        let (mut cfg, data) = tiny();
        cfg.distill.lr = 1e30;
        cfg.distill.lr_min = 1e30;
        let dir = tempfile::tempdir().unwrap();
        let err = pretrain(&cfg, &data, dir.path(), None).err().unwrap();
        assert_eq!(err.exit_code(), 4, "{err}");
        let ck = Checkpoint::load(&dir.path().join(LAST_GOOD_NAME)).unwrap();
        let (_, st) = restore(&ck).unwrap();
        assert!(st.student.tensors().iter().all(|t| t.is_finite()));
    }

    #[test]
    fn config_mismatch_on_resume() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        pretrain(&cfg, &data, dir.path(), None).unwrap();
        let ck = Checkpoint::load(&dir.path().join(FINAL_NAME)).unwrap();
        let mut other = cfg.clone();
        other.distill.lr = 1e-3;
        let err = pretrain(&other, &data, dir.path(), Some(&ck)).err().unwrap();
        assert_eq!(err.exit_code(), 2);
    }
}
