//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! run.seed = 7
//! encoder.depth = 4
//! distill.nuisance.occlusion = false
//! bench.preset = HARD_S1
//! ```
//!
//! Keys are namespaced by section (`encoder`, `distill`, `bench`, `probe`, `mech`, `run`).
//! Unknown keys and repeated keys are errors. Lines are applied in order, so
//! `bench.preset` should precede the keys it resets (shift, occlusion, photometric).

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::distill::DistillConfig;
use crate::encoder::EncoderConfig;
use crate::mech::{Counterfactual, DEFAULT_TEMPERATURE};
use crate::stereo::ProbeParams;
use crate::synthbench::BenchConfig;
use crate::{BinoError, Result};

/// A config section that can list every key with its current value.
pub trait KvEcho {
    fn echo(&self) -> Vec<(String, String)>;
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| BinoError::Config(format!("bad value '{value}' for {key}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechConfig {
    pub temperature: f64,
    pub counterfactual: Counterfactual,
    /// Upper bound on probed pairs; 0 means all.
    pub max_pairs: usize,
}

impl Default for MechConfig {
    fn default() -> Self {
        MechConfig {
            temperature: DEFAULT_TEMPERATURE,
            counterfactual: Counterfactual::None,
            max_pairs: 0,
        }
    }
}

impl MechConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "temperature" => self.temperature = parse_value(key, value)?,
            "counterfactual" => self.counterfactual = Counterfactual::parse(value)?,
            "max_pairs" => self.max_pairs = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for MechConfig {
    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("temperature".into(), self.temperature.to_string()),
            ("counterfactual".into(), self.counterfactual.name().into()),
            ("max_pairs".into(), self.max_pairs.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for RunConfig {
    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("seed".into(), self.seed.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub bench: BenchConfig,
    pub probe: ProbeParams,
    pub mech: MechConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BinoError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(BinoError::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| BinoError::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BinoError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets a fully qualified key such as `distill.nuisance.noise`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, rest) = key
            .split_once('.')
            .ok_or_else(|| BinoError::Config(format!("key '{key}' has no section")))?;
        let known = match section {
            "encoder" => self.encoder.set(rest, value)?,
            "distill" => self.distill.set(rest, value)?,
            "bench" => self.bench.set(rest, value)?,
            "probe" => self.probe.set(rest, value)?,
            "mech" => self.mech.set(rest, value)?,
            "run" => self.run.set(rest, value)?,
            _ => false,
        };
        if !known {
            return Err(BinoError::Config(format!("unknown key '{key}'")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.distill.validate()?;
        self.bench.validate()?;
        self.probe.validate()?;
        if !(self.mech.temperature > 0.0) {
            return Err(BinoError::Config("mech.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, defaults included.
    pub fn echo(&self) -> Vec<(String, String)> {
        let sections: [(&str, Vec<(String, String)>); 6] = [
            ("encoder", self.encoder.echo()),
            ("distill", self.distill.echo()),
            ("bench", self.bench.echo()),
            ("probe", self.probe.echo()),
            ("mech", self.mech.echo()),
            ("run", self.run.echo()),
        ];
        sections
            .into_iter()
            .flat_map(|(s, kv)| kv.into_iter().map(move |(k, v)| (format!("{s}.{k}"), v)))
            .collect()
    }

    pub fn echo_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn strip_prefix(e: &BinoError) -> String {
    match e {
        BinoError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
