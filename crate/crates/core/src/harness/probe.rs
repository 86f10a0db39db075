//! Frozen-checkpoint evaluations: descriptor export, the stereo probe, the
//! synthetic PCK benchmark and the token-geometry probe.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, KvEcho};
use super::{par_map, report, train};
use crate::encoder::{Checkpoint, Encoder};
use crate::fusion::ImagePair;
use crate::mech::{counterfactual, layerwise_sweep, GeometryMetrics};
use crate::stereo::{
    build_cost_volume, disparity_metrics, export_descriptors, match_pair, retrieval_eval, sample_hard_subsets,
    sgm, soft_refine, wta, DescriptorMap, DisparityMetrics, MatchSide, ProbeParams,
};
use crate::synthbench::{load_dataset, score_matching, BenchConfig, BenchSample};
use crate::tensor::{ParamSet, Tensor};
use crate::{BinoError, Result};

/// A frozen encoder: the EMA teacher of a training checkpoint.
pub struct Model {
    pub cfg: ExperimentConfig,
    pub encoder: Encoder,
    pub params: ParamSet<f32>,
    pub step: usize,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, state) = train::restore(ck)?;
        Ok(Model {
            encoder: Encoder::new(cfg.encoder.clone())?,
            params: state.teacher,
            step: state.step,
            cfg,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub struct Dataset {
    pub config: BenchConfig,
    pub samples: Vec<BenchSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let (config, samples) = load_dataset(root)?;
        Ok(Dataset { config, samples })
    }

    pub fn pairs(&self) -> Vec<ImagePair> {
        self.samples.iter().map(|s| s.pair.clone()).collect()
    }
}

fn check_geometry(model: &Model, data: &Dataset) -> Result<()> {
    let g = model.encoder.geometry();
    let b = &data.config;
    if (g.height, g.width, g.patch_h, g.patch_w) != (b.height, b.width, b.patch_h, b.patch_w) {
        return Err(BinoError::Geometry(format!(
            "checkpoint expects {}x{} images with {}x{} patches, dataset has {}x{} with {}x{}",
            g.height, g.width, g.patch_h, g.patch_w, b.height, b.width, b.patch_h, b.patch_w
        )));
    }
    if data.samples.is_empty() {
        return Err(BinoError::Data("dataset has no pairs".into()));
    }
    Ok(())
}

/// The checkpoint's config with evaluation settings (`probe`, `mech`, `run`) taken from `cmd`.
pub fn effective_config(model: &Model, cmd: &ExperimentConfig) -> ExperimentConfig {
    let mut c = model.cfg.clone();
    c.probe = cmd.probe;
    c.mech = cmd.mech;
    c.run = cmd.run;
    c
}

fn provenance(model: &Model, data: &Dataset, condition: &str) -> Value {
    let dataset: std::collections::BTreeMap<String, String> = data.config.echo().into_iter().collect();
    json!({
        "dataset": "synthbench",
        "split": format!("{}-seed{}", data.config.preset.name(), data.config.seed),
        "condition": condition,
        "pairs": data.samples.len(),
        "checkpoint_step": model.step,
        "dataset_config": dataset,
    })
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    train::step_seed(seed ^ 0x5EED_0F_C0FFEE, index)
}

/// L2-normalized `(left, right)` descriptor maps for every sample.
pub fn export_desc(model: &Model, samples: &[BenchSample]) -> Result<Vec<[DescriptorMap; 2]>> {
    par_map(samples, |_, s| {
        let mut d = export_descriptors(&model.encoder, &model.params, &[&s.pair.left, &s.pair.right], true)?;
        let r = d.pop().expect("two maps");
        let l = d.pop().expect("two maps");
        Ok([l, r])
    })
    .into_iter()
    .collect()
}

/// Tensor archive `<index>/left`, `<index>/right` of shape `[rows, cols, dim]`.
pub fn descriptor_archive(echo: &[(String, String)], samples: &[BenchSample], descs: &[[DescriptorMap; 2]]) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (k, v) in echo {
        ck.set_meta(k.clone(), v.clone());
    }
    for (s, [l, r]) in samples.iter().zip(descs) {
        for (side, d) in [("left", l), ("right", r)] {
            let t = Tensor::new(vec![d.rows, d.cols, d.dim], d.data.clone()).expect("descriptor shape");
            ck.push(format!("{:05}/{side}", s.index), t);
        }
    }
    ck
}

fn clamp_dmax(pp: &ProbeParams, cols: usize) -> Result<ProbeParams> {
    let mut p = *pp;
    p.dmax = p.dmax.min(cols);
    if p.window >= p.dmax {
        return Err(BinoError::Config(format!(
            "refine window {} must be below the effective disparity range {}",
            p.window, p.dmax
        )));
    }
    Ok(p)
}

#[derive(Default)]
struct Pooled {
    pred: Vec<f64>,
    gt: Vec<f64>,
    valid: Vec<bool>,
}

impl Pooled {
    fn push(&mut self, pred: &[f64], gt: &[f64], valid: &[bool]) {
        self.pred.extend_from_slice(pred);
        self.gt.extend_from_slice(gt);
        self.valid.extend_from_slice(valid);
    }

    fn score(&self) -> Result<Value> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        Ok(serde_json::to_value(score_matching(&f(&self.pred), &f(&self.gt), &self.valid)?).expect("score"))
    }

    fn disparity(&self, token_px: f64) -> Result<Option<DisparityMetrics>> {
        if !self.valid.iter().any(|&v| v) {
            return Ok(None);
        }
        disparity_metrics(&self.pred, &self.gt, &self.valid, token_px).map(Some)
    }
}

fn gt_tokens(s: &BenchSample, model: &Model) -> (Vec<f64>, Vec<bool>) {
    let gt = s.gt_tokens(model.encoder.geometry()).into_iter().map(f64::from).collect();
    (gt, s.valid().to_vec())
}

/// Export, cosine cost, WTA and SGM with soft refinement, scored as PCK@{0,1,2}/EPE in tokens.
pub fn eval_synth(model: &Model, cmd: &ExperimentConfig, data: &Dataset) -> Result<Value> {
    check_geometry(model, data)?;
    let cfg = effective_config(model, cmd);
    let cols = model.encoder.geometry().patch_cols();
    let pp = clamp_dmax(&cfg.probe, cols)?;
    let descs = export_desc(model, &data.samples)?;
    let per: Vec<Result<(Vec<f64>, Vec<f64>)>> = par_map(&descs, |_, [dl, dr]| {
        let vol = build_cost_volume(dl, dr, pp.dmax, MatchSide::Left)?;
        let w: Vec<f64> = wta(&vol).into_iter().map(|d| d as f64).collect();
        let (agg, disp) = sgm(&vol, pp.p1, pp.p2)?;
        let refined = soft_refine(&agg, &disp, pp.window, pp.temperature)?;
        Ok((w, refined))
    });
    let (mut pw, mut ps) = (Pooled::default(), Pooled::default());
    let mut pairs = Vec::new();
    for (s, r) in data.samples.iter().zip(per) {
        let (w, refined) = r?;
        let (gt, valid) = gt_tokens(s, model);
        let mut one_w = Pooled::default();
        one_w.push(&w, &gt, &valid);
        let mut one_s = Pooled::default();
        one_s.push(&refined, &gt, &valid);
        pairs.push(json!({
            "index": s.index,
            "shift_px": s.shift_px,
            "wta": one_w.score()?,
            "sgmloc": one_s.score()?,
        }));
        pw.push(&w, &gt, &valid);
        ps.push(&refined, &gt, &valid);
    }
    let metrics = json!({
        "wta": pw.score()?,
        "sgmloc": ps.score()?,
        "dmax_effective": pp.dmax,
    });
    let mut rep = report("eval-synth", &cfg.echo(), cfg.run.seed, provenance(model, data, "normal"), metrics);
    rep["pairs"] = Value::Array(pairs);
    Ok(rep)
}

fn metric_or_null(m: Option<DisparityMetrics>, f: impl Fn(&DisparityMetrics) -> f64) -> Value {
    m.map_or(Value::Null, |m| json!(f(&m)))
}

fn stereo_keys(wta: Option<DisparityMetrics>, sgm: Option<DisparityMetrics>, lr: Option<DisparityMetrics>, keep: f64) -> Value {
    json!({
        "gt_wta_epe": metric_or_null(wta, |m| m.epe_px),
        "gt_wta_bad1tok": metric_or_null(wta, |m| m.bad1tok),
        "gt_wta_d1": metric_or_null(wta, |m| m.d1),
        "gt_sgmloc_epe": metric_or_null(sgm, |m| m.epe_px),
        "gt_sgmloc_bad1tok": metric_or_null(sgm, |m| m.bad1tok),
        "gt_sgmloc_d1": metric_or_null(sgm, |m| m.d1),
        "gtlr_sgmloc_epe": metric_or_null(lr, |m| m.epe_px),
        "gtlr_sgmloc_bad1tok": metric_or_null(lr, |m| m.bad1tok),
        "gtlr_sgmloc_d1": metric_or_null(lr, |m| m.d1),
        "lr_keep": keep,
        "gt_count": wta.map_or(0, |m| m.count),
    })
}

/// No-linkage stereo probe: GT-only and GT+LR disparity metrics plus pooled retrieval.
pub fn probe_stereo(model: &Model, cmd: &ExperimentConfig, data: &Dataset) -> Result<Value> {
    check_geometry(model, data)?;
    let cfg = effective_config(model, cmd);
    let geo = model.encoder.geometry();
    let token_px = geo.patch_col_px() as f64;
    let pp = clamp_dmax(&cfg.probe, geo.patch_cols())?;
    let descs = export_desc(model, &data.samples)?;
    let results = par_map(&descs, |_, [dl, dr]| match_pair(dl, dr, &pp));
    let (mut aw, mut asg, mut alr) = (Pooled::default(), Pooled::default(), Pooled::default());
    let (mut kept, mut total) = (0usize, 0usize);
    let mut pairs = Vec::new();
    for (s, r) in data.samples.iter().zip(results) {
        let r = r?;
        let (gt, valid) = gt_tokens(s, model);
        let w: Vec<f64> = r.wta.iter().map(|&d| d as f64).collect();
        let both: Vec<bool> = valid.iter().zip(&r.lr_valid).map(|(&a, &b)| a && b).collect();
        let n_valid = valid.iter().filter(|&&v| v).count();
        let n_both = both.iter().filter(|&&v| v).count();
        let keep = if n_valid > 0 { 100.0 * n_both as f64 / n_valid as f64 } else { 0.0 };
        let (mut ow, mut os, mut ol) = (Pooled::default(), Pooled::default(), Pooled::default());
        ow.push(&w, &gt, &valid);
        os.push(&r.refined, &gt, &valid);
        ol.push(&r.refined, &gt, &both);
        let mut entry = stereo_keys(ow.disparity(token_px)?, os.disparity(token_px)?, ol.disparity(token_px)?, keep);
        entry["index"] = json!(s.index);
        pairs.push(entry);
        aw.push(&w, &gt, &valid);
        asg.push(&r.refined, &gt, &valid);
        alr.push(&r.refined, &gt, &both);
        kept += n_both;
        total += n_valid;
    }
    let keep = if total > 0 { 100.0 * kept as f64 / total as f64 } else { 0.0 };
    let mut metrics = stereo_keys(aw.disparity(token_px)?, asg.disparity(token_px)?, alr.disparity(token_px)?, keep);
    metrics["dmax_effective"] = json!(pp.dmax);
    if descs.len() >= 2 {
        let left: Vec<Vec<f32>> = descs.iter().map(|[l, _]| l.mean_pool()).collect();
        let right: Vec<Vec<f32>> = descs.iter().map(|[_, r]| r.mean_pool()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.run.seed, usize::MAX));
        let subsets = sample_hard_subsets(descs.len(), pp.hard_negatives, &mut rng);
        metrics["retrieval"] = serde_json::to_value(retrieval_eval(&left, &right, &subsets)?).expect("retrieval");
    } else {
        metrics["retrieval"] = Value::Null;
    }
    let mut rep = report("probe-stereo", &cfg.echo(), cfg.run.seed, provenance(model, data, "normal"), metrics);
    rep["pairs"] = Value::Array(pairs);
    Ok(rep)
}

/// Layerwise token geometry of native `(L, R)` forwards, optionally under a counterfactual.
pub fn probe_mech(model: &Model, cmd: &ExperimentConfig, data: &Dataset) -> Result<Value> {
    check_geometry(model, data)?;
    let cfg = effective_config(model, cmd);
    let geo = *model.encoder.geometry();
    let kind = cfg.mech.counterfactual;
    let n = match cfg.mech.max_pairs {
        0 => data.samples.len(),
        m => m.min(data.samples.len()),
    };
    let pool = data.pairs();
    let idx: Vec<usize> = (0..n).collect();
    let per = par_map(&idx, |_, &i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.run.seed, i));
        let pair = counterfactual(&pool, i, kind, &geo, &mut rng)?;
        let tp = geo.patch_col_px() as f32;
        let gt_cols: Vec<f32> = pair
            .gt_disp
            .as_ref()
            .ok_or_else(|| BinoError::Data(format!("pair {i} has no ground truth")))?
            .iter()
            .map(|d| d / tp)
            .collect();
        layerwise_sweep(
            &model.encoder,
            &model.params,
            &[(pair, gt_cols)],
            cfg.mech.temperature,
            kind.provenance(),
        )
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = per[0].iter().map(|(k, _)| k.clone()).collect();
    let mut layers = serde_json::Map::new();
    let mut last = GeometryMetrics::default();
    for (li, name) in names.iter().enumerate() {
        let items: Vec<GeometryMetrics> = per.iter().map(|s| s[li].1).collect();
        let m = GeometryMetrics::mean(&items);
        layers.insert(name.clone(), serde_json::to_value(m).expect("metrics"));
        last = m;
    }
    let mut metrics = serde_json::to_value(last).expect("metrics");
    metrics["layers"] = Value::Object(layers);
    metrics["layer_order"] = json!(names);
    metrics["temperature"] = json!(cfg.mech.temperature);
    metrics["counterfactual"] = json!(kind.name());
    let mut prov = provenance(model, data, kind.name());
    prov["pairs"] = json!(n);
    Ok(report("probe-mech", &cfg.echo(), cfg.run.seed, prov, metrics))
}
