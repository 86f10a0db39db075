//! One-view masked EMA teacher/student token distillation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{normal_tensor, Encoder, ParamBinder};
use crate::fusion::{fuse, sample_one_view_mask, sample_view_mask, ImagePair, Provenance, View};
use crate::harness::config::{parse_value, KvEcho};
use crate::imageio::Image;
use crate::tensor::{AdamW, AdamWConfig, Graph, Moments, NodeId, ParamSet, Real, Tensor};
use crate::{BinoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotoMode {
    Shared,
    Independent,
}

impl PhotoMode {
    pub fn name(&self) -> &'static str {
        match self {
            PhotoMode::Shared => "shared",
            PhotoMode::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(PhotoMode::Shared),
            "independent" => Ok(PhotoMode::Independent),
            _ => Err(BinoError::Config(format!("unknown photometric mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceConfig {
    pub occlusion: bool,
    /// Inclusive range of rectangles per view.
    pub occ_count: (usize, usize),
    /// Area fraction of each rectangle.
    pub occ_area: (f64, f64),
    pub photometric: bool,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
    pub photo_mode: PhotoMode,
    pub noise: bool,
    pub noise_sigma: (f64, f64),
}

impl NuisanceConfig {
    pub fn off() -> Self {
        NuisanceConfig {
            occlusion: false,
            photometric: false,
            noise: false,
            ..Self::hard()
        }
    }

    /// Occlusion, independent photometric jitter and noise all enabled.
    pub fn hard() -> Self {
        NuisanceConfig {
            occlusion: true,
            occ_count: (1, 2),
            occ_area: (0.01, 0.05),
            photometric: true,
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            gamma: (0.8, 1.25),
            photo_mode: PhotoMode::Independent,
            noise: true,
            noise_sigma: (0.0, 0.02),
        }
    }

    pub fn is_off(&self) -> bool {
        !(self.occlusion || self.photometric || self.noise)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (a, b): (f64, f64)| {
            if a <= b && a.is_finite() && b.is_finite() {
                Ok(())
            } else {
                Err(BinoError::Config(format!("{name}: empty range [{a}, {b}]")))
            }
        };
        range("occ_area", self.occ_area)?;
        if self.occ_area.0 < 0.0 || self.occ_area.1 > 1.0 {
            return Err(BinoError::Config("occ_area must lie in [0,1]".into()));
        }
        if self.occ_count.0 > self.occ_count.1 {
            return Err(BinoError::Config("occ_count: min above max".into()));
        }
        range("brightness", self.brightness)?;
        range("contrast", self.contrast)?;
        range("gamma", self.gamma)?;
        range("noise_sigma", self.noise_sigma)?;
        if self.gamma.0 <= 0.0 || self.noise_sigma.0 < 0.0 {
            return Err(BinoError::Config("gamma must be positive and sigma nonnegative".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "occlusion" => self.occlusion = parse_value(key, value)?,
            "occ_count" => self.occ_count = parse_pair(key, value)?,
            "occ_area" => self.occ_area = parse_pair(key, value)?,
            "photometric" => self.photometric = parse_value(key, value)?,
            "brightness" => self.brightness = parse_pair(key, value)?,
            "contrast" => self.contrast = parse_pair(key, value)?,
            "gamma" => self.gamma = parse_pair(key, value)?,
            "photo_mode" => self.photo_mode = PhotoMode::parse(value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_pair(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for NuisanceConfig {
    fn echo(&self) -> Vec<(String, String)> {
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        vec![
            ("occlusion".into(), self.occlusion.to_string()),
            ("occ_count".into(), format!("{},{}", self.occ_count.0, self.occ_count.1)),
            ("occ_area".into(), pair(self.occ_area)),
            ("photometric".into(), self.photometric.to_string()),
            ("brightness".into(), pair(self.brightness)),
            ("contrast".into(), pair(self.contrast)),
            ("gamma".into(), pair(self.gamma)),
            ("photo_mode".into(), self.photo_mode.name().into()),
            ("noise".into(), self.noise.to_string()),
            ("noise_sigma".into(), pair(self.noise_sigma)),
        ]
    }
}

/// Parses `a,b`.
pub fn parse_pair<T: std::str::FromStr>(key: &str, value: &str) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| BinoError::Config(format!("{key}: expected 'lo,hi', got '{value}'")))?;
    Ok((parse_value(key, a.trim())?, parse_value(key, b.trim())?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSchedule {
    /// Linear ramp `start -> end` over `ramp` (fraction of steps), then constant.
    Scheduled { start: f64, end: f64, ramp: f64 },
    Fixed(f64),
}

impl MaskSchedule {
    pub fn ratio_at(&self, step: usize, steps: usize) -> f64 {
        match *self {
            MaskSchedule::Fixed(r) => r,
            MaskSchedule::Scheduled { start, end, ramp } => {
                let span = ramp * steps as f64;
                if span <= 0.0 {
                    return end;
                }
                let t = (step as f64 / span).min(1.0);
                start + (end - start) * t
            }
        }
    }
}

/// Ratio of the masked view's cells at `step` of `steps`.
pub fn mask_ratio_at(step: usize, steps: usize, schedule: &MaskSchedule) -> f64 {
    schedule.ratio_at(step, steps)
}

/// Cosine ramp from `start` at step 0 to `end` at `steps`.
pub fn cosine_ramp(start: f64, end: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return end;
    }
    let t = (step as f64 / steps as f64).min(1.0);
    end - (end - start) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub tau_t: f64,
    pub tau_s: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub mask: MaskSchedule,
    /// Ablation: mask the same cells in both views instead of one.
    pub mask_both_views: bool,
    pub proj_dim: usize,
    pub head_hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub nuisance: NuisanceConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_t: 0.04,
            tau_s: 0.1,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            mask: MaskSchedule::Scheduled {
                start: 0.3,
                end: 0.7,
                ramp: 0.8,
            },
            mask_both_views: false,
            proj_dim: 512,
            head_hidden: 256,
            steps: 1000,
            batch: 4,
            lr: 3e-4,
            lr_min: 1e-5,
            warmup_steps: 0,
            weight_decay: 0.04,
            nuisance: NuisanceConfig::hard(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(BinoError::Config(format!("{name} = {v} outside [0,1]")))
            }
        };
        unit("center_momentum", self.center_momentum)?;
        unit("ema_start", self.ema_start)?;
        unit("ema_end", self.ema_end)?;
        match self.mask {
            MaskSchedule::Fixed(r) => unit("mask_fixed", r)?,
            MaskSchedule::Scheduled { start, end, ramp } => {
                unit("mask_start", start)?;
                unit("mask_end", end)?;
                unit("mask_ramp", ramp)?;
            }
        }
        if self.tau_t <= 0.0 || self.tau_s <= 0.0 {
            return Err(BinoError::Config("temperatures must be positive".into()));
        }
        if self.proj_dim == 0 || self.head_hidden == 0 || self.batch == 0 {
            return Err(BinoError::Config("proj_dim, head_hidden and batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.weight_decay >= 0.0) {
            return Err(BinoError::Config("lr, lr_min and weight_decay must be nonnegative".into()));
        }
        self.nuisance.validate()
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.tau_t >= self.tau_s {
            w.push(format!(
                "tau_t ({}) is not below tau_s ({}): teacher is not sharpened",
                self.tau_t, self.tau_s
            ));
        }
        w
    }

    pub fn ema_at(&self, step: usize) -> f64 {
        cosine_ramp(self.ema_start, self.ema_end, step, self.steps)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps);
        cosine_ramp(self.lr, self.lr_min, step - self.warmup_steps, span)
    }

    pub fn mask_ratio_at(&self, step: usize) -> f64 {
        mask_ratio_at(step, self.steps, &self.mask)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if let Some(rest) = key.strip_prefix("nuisance.") {
            return self.nuisance.set(rest, value);
        }
        match key {
            "tau_t" => self.tau_t = parse_value(key, value)?,
            "tau_s" => self.tau_s = parse_value(key, value)?,
            "center_momentum" => self.center_momentum = parse_value(key, value)?,
            "ema_start" => self.ema_start = parse_value(key, value)?,
            "ema_end" => self.ema_end = parse_value(key, value)?,
            "mask_schedule" => {
                self.mask = match value {
                    "scheduled" => MaskSchedule::Scheduled {
                        start: 0.3,
                        end: 0.7,
                        ramp: 0.8,
                    },
                    "fixed" => MaskSchedule::Fixed(0.5),
                    _ => return Err(BinoError::Config(format!("unknown mask_schedule '{value}'"))),
                }
            }
            "mask_start" | "mask_end" | "mask_ramp" => {
                let v: f64 = parse_value(key, value)?;
                match &mut self.mask {
                    MaskSchedule::Scheduled { start, end, ramp } => match key {
                        "mask_start" => *start = v,
                        "mask_end" => *end = v,
                        _ => *ramp = v,
                    },
                    MaskSchedule::Fixed(_) => {
                        return Err(BinoError::Config(format!("{key} set with mask_schedule = fixed")))
                    }
                }
            }
            "mask_fixed" => match &mut self.mask {
                MaskSchedule::Fixed(r) => *r = parse_value(key, value)?,
                MaskSchedule::Scheduled { .. } => {
                    return Err(BinoError::Config("mask_fixed set with mask_schedule = scheduled".into()))
                }
            },
            "mask_both_views" => self.mask_both_views = parse_value(key, value)?,
            "proj_dim" => self.proj_dim = parse_value(key, value)?,
            "head_hidden" => self.head_hidden = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_min" => self.lr_min = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for DistillConfig {
    fn echo(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("tau_t".into(), self.tau_t.to_string()),
            ("tau_s".into(), self.tau_s.to_string()),
            ("center_momentum".into(), self.center_momentum.to_string()),
            ("ema_start".into(), self.ema_start.to_string()),
            ("ema_end".into(), self.ema_end.to_string()),
        ];
        match self.mask {
            MaskSchedule::Scheduled { start, end, ramp } => {
                v.push(("mask_schedule".into(), "scheduled".into()));
                v.push(("mask_start".into(), start.to_string()));
                v.push(("mask_end".into(), end.to_string()));
                v.push(("mask_ramp".into(), ramp.to_string()));
            }
            MaskSchedule::Fixed(r) => {
                v.push(("mask_schedule".into(), "fixed".into()));
                v.push(("mask_fixed".into(), r.to_string()));
            }
        }
        v.extend([
            ("mask_both_views".into(), self.mask_both_views.to_string()),
            ("proj_dim".into(), self.proj_dim.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_min".into(), self.lr_min.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
        ]);
        v.extend(
            self.nuisance
                .echo()
                .into_iter()
                .map(|(k, val)| (format!("nuisance.{k}"), val)),
        );
        v
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl PhotoParams {
    pub fn apply(&self, img: &mut Image) {
        for v in img.data_mut() {
            let x = (*v as f64 * self.contrast + self.brightness).max(0.0);
            *v = x.powf(self.gamma).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Axis-aligned rectangle `[y0, y0+h) × [x0, x0+w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Draws a rectangle whose area is close to `frac · H·W`, aspect ratio in [1/2, 2].
pub fn sample_occluder<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, frac: f64) -> Rect {
    let target = frac * (height * width) as f64;
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let h = ((target * aspect).sqrt().round() as usize).clamp(1, height);
    let w = ((target / h as f64).round() as usize).clamp(1, width);
    let h = if target > 0.0 { h } else { 0 };
    let w = if target > 0.0 { w } else { 0 };
    let y0 = rng.random_range(0..=height - h);
    let x0 = rng.random_range(0..=width - w);
    Rect { y0, x0, h, w }
}

fn fill_rect(img: &mut Image, r: &Rect) {
    for c in 0..Image::CHANNELS {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                img.set(c, y, x, 0.0);
            }
        }
    }
}

/// Occlusion, photometric jitter and noise. Returns the occluders drawn per view.
pub fn apply_nuisance<R: Rng + ?Sized>(
    pair: &mut ImagePair,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> [Vec<Rect>; 2] {
    let (h, w) = (pair.height(), pair.width());
    let mut rects: [Vec<Rect>; 2] = [Vec::new(), Vec::new()];
    if cfg.photometric {
        let draw = |rng: &mut R| PhotoParams {
            brightness: uniform(rng, cfg.brightness),
            contrast: uniform(rng, cfg.contrast),
            gamma: uniform(rng, cfg.gamma),
        };
        let pl = draw(rng);
        let pr = match cfg.photo_mode {
            PhotoMode::Shared => pl,
            PhotoMode::Independent => draw(rng),
        };
        pl.apply(&mut pair.left);
        pr.apply(&mut pair.right);
    }
    if cfg.occlusion {
        for (slot, img) in rects.iter_mut().zip([&mut pair.left, &mut pair.right]) {
            let n = rng.random_range(cfg.occ_count.0..=cfg.occ_count.1);
            for _ in 0..n {
                let frac = uniform(rng, cfg.occ_area);
                let r = sample_occluder(rng, h, w, frac);
                fill_rect(img, &r);
                slot.push(r);
            }
        }
    }
    if cfg.noise {
        let sl = uniform(rng, cfg.noise_sigma);
        let sr = match cfg.photo_mode {
            PhotoMode::Shared => sl,
            PhotoMode::Independent => uniform(rng, cfg.noise_sigma),
        };
        for (img, sigma) in [(&mut pair.left, sl), (&mut pair.right, sr)] {
            if sigma <= 0.0 {
                continue;
            }
            let dist = Normal::new(0.0, sigma).expect("positive sigma");
            for v in img.data_mut() {
                *v = (*v as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    rects
}

pub const HEAD_INIT_STD: f64 = 0.02;

/// Adds the projection head `d -> hidden -> K` to `params`. Small weights keep the
/// initial teacher distribution close to uniform.
pub fn init_head<R: rand::RngCore>(
    params: &mut ParamSet<f32>,
    dim: usize,
    hidden: usize,
    k: usize,
    rng: &mut R,
) {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    let mut crng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    params.insert("head.w1", normal_tensor(&mut crng, &[dim, hidden], HEAD_INIT_STD));
    params.insert("head.b1", Tensor::zeros(&[hidden]));
    params.insert("head.w2", normal_tensor(&mut crng, &[hidden, k], HEAD_INIT_STD));
    params.insert("head.b2", Tensor::zeros(&[k]));
}

/// Two-layer MLP applied to every token row of `x`.
pub fn token_head<T: Real>(g: &mut Graph<T>, bind: &mut ParamBinder<'_, T>, x: NodeId) -> Result<NodeId> {
    let (w1, b1) = (bind.get(g, "head.w1")?, bind.get(g, "head.b1")?);
    let h = g.linear(x, w1, b1)?;
    let h = g.gelu(h)?;
    let (w2, b2) = (bind.get(g, "head.w2")?, bind.get(g, "head.b2")?);
    Ok(g.linear(h, w2, b2)?)
}

/// Centered, sharpened teacher distribution `softmax((z - μ) / τ_t)` per row.
pub fn teacher_probs(z_t: &[f32], center: &[f32], tau_t: f64) -> Vec<f32> {
    teacher_probs_f64(z_t, center, tau_t).into_iter().map(|v| v as f32).collect()
}

fn teacher_probs_f64(z_t: &[f32], center: &[f32], tau_t: f64) -> Vec<f64> {
    let k = center.len();
    let mut out = Vec::with_capacity(z_t.len());
    for row in z_t.chunks_exact(k) {
        let s: Vec<f64> = row
            .iter()
            .zip(center)
            .map(|(z, m)| (*z as f64 - *m as f64) / tau_t)
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / sum));
    }
    out
}

/// `-(1/N) Σ_j p_t[j] · log softmax(z_s[j] / τ_s)` on the tape; `p_t` is a constant.
pub fn distill_loss_graph<T: Real>(g: &mut Graph<T>, z_s: NodeId, p_t: Tensor<T>, tau_s: f64) -> Result<NodeId> {
    let n = g.value(z_s).rows();
    if p_t.shape() != g.value(z_s).shape() {
        return Err(BinoError::Geometry(format!(
            "teacher targets {:?} vs student logits {:?}",
            p_t.shape(),
            g.value(z_s).shape()
        )));
    }
    let s = g.scale(z_s, 1.0 / tau_s)?;
    let axis = g.value(s).shape().len() - 1;
    let ls = g.log_softmax(s, axis)?;
    let pt = g.constant(p_t);
    let prod = g.mul(pt, ls)?;
    let tot = g.sum(prod)?;
    Ok(g.scale(tot, -1.0 / n as f64)?)
}

/// Loss value without a tape, `[N × K]` logits.
pub fn distill_loss(z_t: &[f32], z_s: &[f32], center: &[f32], tau_t: f64, tau_s: f64) -> Result<f64> {
    let k = center.len();
    if k == 0 || z_t.len() != z_s.len() || z_t.len() % k != 0 || z_t.is_empty() {
        return Err(BinoError::Geometry("logit extents do not match the center".into()));
    }
    let mut g = Graph::<f64>::no_grad();
    let zs = g.constant(Tensor::new(vec![z_s.len() / k, k], z_s.iter().map(|&v| v as f64).collect())?);
    let pt = Tensor::new(vec![z_s.len() / k, k], teacher_probs_f64(z_t, center, tau_t))?;
    let loss = distill_loss_graph(&mut g, zs, pt, tau_s)?;
    Ok(g.value(loss).data()[0])
}

/// `μ' = m·μ + (1-m)·mean_rows(z_t)`.
pub fn update_center(center: &mut [f32], z_t: &[f32], momentum: f64) {
    let k = center.len();
    let n = z_t.len() / k;
    let mut mean = vec![0.0f64; k];
    for row in z_t.chunks_exact(k) {
        for (m, z) in mean.iter_mut().zip(row) {
            *m += *z as f64;
        }
    }
    for (c, m) in center.iter_mut().zip(mean) {
        *c = (momentum * *c as f64 + (1.0 - momentum) * m / n as f64) as f32;
    }
}

/// `θ_t ← m·θ_t + (1-m)·θ_s`.
pub fn update_teacher(teacher: &mut ParamSet<f32>, student: &ParamSet<f32>, momentum: f64) -> Result<()> {
    if !teacher.is_aligned_with(student) {
        return Err(BinoError::Geometry("teacher and student parameters are not aligned".into()));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = (momentum * *a as f64 + (1.0 - momentum) * *b as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub center: Vec<f32>,
    pub moments: Moments<f32>,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub mask_ratio: f64,
    pub ema_momentum: f64,
    pub lr: f64,
    pub left_masked: usize,
    pub right_masked: usize,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,loss,mask_ratio,ema_momentum";

    pub fn csv_line(&self) -> String {
        format!("{},{:.9},{:.6},{:.9}", self.step, self.loss, self.mask_ratio, self.ema_momentum)
    }
}

/// Student forward artifacts kept for inspection.
pub struct StudentPass {
    pub graph: Graph<f32>,
    pub loss: NodeId,
    pub param_nodes: Vec<Option<NodeId>>,
    pub teacher_logits: Vec<f32>,
}

pub struct Distiller {
    pub encoder: Encoder,
    pub cfg: DistillConfig,
}

impl Distiller {
    pub fn new(encoder: Encoder, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Distiller { encoder, cfg })
    }

    pub fn init_state<R: rand::RngCore>(&self, seed: u64, rng: &mut R) -> DistillState {
        let mut student = self.encoder.init_params(seed);
        init_head(
            &mut student,
            self.encoder.cfg.dim,
            self.cfg.head_hidden,
            self.cfg.proj_dim,
            rng,
        );
        DistillState {
            teacher: student.clone(),
            moments: Moments::for_params(&student),
            center: vec![0.0; self.cfg.proj_dim],
            student,
            step: 0,
        }
    }

    /// Teacher logits `[B·N × K]` on the unmasked fused inputs.
    pub fn teacher_logits(&self, teacher: &ParamSet<f32>, batch: &[ImagePair]) -> Result<Vec<f32>> {
        let fused = batch
            .iter()
            .map(|p| fuse(p, self.encoder.cfg.fusion, Provenance::Normal))
            .collect::<Result<Vec<_>>>()?;
        let patches = self.encoder.patch_matrix(&fused)?;
        let mut g = Graph::<f32>::no_grad();
        let mut bind = ParamBinder::new(teacher, false);
        let nodes = self.encoder.forward_graph(&mut g, &mut bind, patches)?;
        let z = token_head(&mut g, &mut bind, nodes.depos)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Student inputs: one view per sample masked (both under the ablation flag).
    pub fn mask_batch<R: Rng + ?Sized>(
        &self,
        batch: &[ImagePair],
        ratio: f64,
        rng: &mut R,
    ) -> Result<(Vec<ImagePair>, [usize; 2])> {
        let geo = &self.encoder.cfg.geometry;
        let mut counts = [0usize; 2];
        let mut out = Vec::with_capacity(batch.len());
        for p in batch {
            let mut s = p.clone();
            if self.cfg.mask_both_views {
                let mut m = sample_view_mask(geo, View::Left, ratio, rng)?;
                m.apply(&mut s, geo);
                m.view = View::Right;
                m.apply(&mut s, geo);
                counts[0] += 1;
                counts[1] += 1;
            } else {
                let m = sample_one_view_mask(geo, ratio, rng)?;
                counts[(m.view == View::Right) as usize] += 1;
                m.apply(&mut s, geo);
            }
            out.push(s);
        }
        Ok((out, counts))
    }

    /// Records the student loss for `batch` against fixed teacher targets.
    pub fn student_pass(
        &self,
        student: &ParamSet<f32>,
        masked: &[ImagePair],
        teacher_logits: Vec<f32>,
        center: &[f32],
    ) -> Result<StudentPass> {
        let fused = masked
            .iter()
            .map(|p| fuse(p, self.encoder.cfg.fusion, Provenance::Normal))
            .collect::<Result<Vec<_>>>()?;
        let patches = self.encoder.patch_matrix(&fused)?;
        let mut g = Graph::<f32>::new();
        let mut bind = ParamBinder::new(student, true);
        let nodes = self.encoder.forward_graph(&mut g, &mut bind, patches)?;
        let z_s = token_head(&mut g, &mut bind, nodes.depos)?;
        let k = self.cfg.proj_dim;
        let p_t = teacher_probs(&teacher_logits, center, self.cfg.tau_t);
        let p_t = Tensor::new(vec![p_t.len() / k, k], p_t)?;
        let loss = distill_loss_graph(&mut g, z_s, p_t, self.cfg.tau_s)?;
        let param_nodes = (0..student.len()).map(|i| bind.node_of(i)).collect();
        Ok(StudentPass {
            graph: g,
            loss,
            param_nodes,
            teacher_logits,
        })
    }

    pub fn train_step<R: Rng + ?Sized>(
        &self,
        state: &mut DistillState,
        batch: &[ImagePair],
        rng: &mut R,
    ) -> Result<StepStats> {
        let step = state.step;
        let ratio = self.cfg.mask_ratio_at(step);
        let ema = self.cfg.ema_at(step);
        let lr = self.cfg.lr_at(step);

        let z_t = self.teacher_logits(&state.teacher, batch)?;
        if step == 0 {
            // the running center starts from the first batch instead of zero
            update_center(&mut state.center, &z_t, 0.0);
        }
        let (masked, counts) = self.mask_batch(batch, ratio, rng)?;
        let pass = self.student_pass(&state.student, &masked, z_t, &state.center)?;
        let loss = pass.graph.value(pass.loss).data()[0] as f64;
        if !loss.is_finite() {
            return Err(BinoError::Numerical(format!(
                "non-finite loss {loss} at step {step} (lr {lr}, mask ratio {ratio})"
            )));
        }
        let mut grads = pass.graph.backward(pass.loss)?;
        let grads: Vec<Tensor<f32>> = pass
            .param_nodes
            .iter()
            .zip(state.student.tensors())
            .map(|(id, p)| {
                id.and_then(|id| grads.take(id))
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect();
        let optim = AdamW::new(AdamWConfig {
            lr,
            weight_decay: self.cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let decay = Encoder::decay_mask(&state.student);
        optim
            .step(&mut state.student, &grads, &mut state.moments, lr, &decay)
            .map_err(|e| BinoError::Numerical(format!("step {step}: {e}")))?;
        update_teacher(&mut state.teacher, &state.student, ema)?;
        update_center(&mut state.center, &pass.teacher_logits, self.cfg.center_momentum);
        state.step += 1;
        Ok(StepStats {
            step,
            loss,
            mask_ratio: ratio,
            ema_momentum: ema,
            lr,
            left_masked: counts[0],
            right_masked: counts[1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::fusion::TokenGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Distiller {
        let enc = Encoder::new(EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            ffn_ratio: 2,
            geometry: TokenGeometry::new(8, 8, 4, 4).unwrap(),
            ..Default::default()
        })
        .unwrap();
        Distiller::new(
            enc,
            DistillConfig {
                proj_dim: 6,
                head_hidden: 5,
                steps: 10,
                batch: 2,
                lr: 1e-2,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn pair(seed: u64) -> ImagePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || {
            let data = (0..3 * 64).map(|_| rng.random::<f32>()).collect();
            Image::new(8, 8, data).unwrap()
        };
        ImagePair::new(img(), img()).unwrap()
    }

    #[test]
    fn mask_schedule_endpoints() {
        let s = MaskSchedule::Scheduled {
            start: 0.3,
            end: 0.7,
            ramp: 0.8,
        };
        assert_eq!(s.ratio_at(0, 100), 0.3);
        assert!((s.ratio_at(40, 100) - 0.5).abs() < 1e-12);
        assert!((s.ratio_at(100, 100) - 0.7).abs() < 1e-12);
        assert_eq!(MaskSchedule::Fixed(0.5).ratio_at(77, 100), 0.5);
    }

    #[test]
    fn ema_and_lr_ramps() {
        let c = DistillConfig {
            steps: 100,
            ..Default::default()
        };
        assert!((c.ema_at(0) - 0.996).abs() < 1e-12);
        assert!((c.ema_at(100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(0) - 3e-4).abs() < 1e-12);
        assert!((c.lr_at(100) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn center_update_limits() {
        let z = [1.0f32, 2.0, 3.0, 5.0];
        let mut c = vec![7.0f32, 7.0];
        update_center(&mut c, &z, 1.0);
        assert_eq!(c, [7.0, 7.0]);
        update_center(&mut c, &z, 0.0);
        assert_eq!(c, [2.0, 3.5]);
        let v = [0.5f32, -1.0];
        let mut c = vec![0.0f32; 2];
        for _ in 0..300 {
            update_center(&mut c, &v, 0.9);
        }
        assert!((c[0] - 0.5).abs() < 1e-6 && (c[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn teacher_update_limits() {
        let d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = d.init_state(1, &mut rng).student;
        let b = d.init_state(2, &mut rng).student;
        let mut t = a.clone();
        update_teacher(&mut t, &b, 1.0).unwrap();
        assert_eq!(t, a);
        update_teacher(&mut t, &b, 0.0).unwrap();
        assert_eq!(t, b);
    }

    #[test]
    fn loss_at_equal_logits_is_entropy() {
        let z = [0.3f32, -1.0, 2.0, 0.0, 0.5, 0.5];
        let l = distill_loss(&z, &z, &[0.0; 3], 1.0, 1.0).unwrap();
        let p = teacher_probs(&z, &[0.0; 3], 1.0);
        let h: f64 = -p.iter().map(|&q| q as f64 * (q as f64).ln()).sum::<f64>() / 2.0;
        assert!((l - h).abs() < 1e-6);
    }

    #[test]
    fn one_hot_teacher_uniform_student() {
        let k = 5;
        let mut zt = vec![0.0f32; k];
        zt[2] = 10.0;
        let l = distill_loss(&zt, &vec![0.0; k], &vec![0.0; k], 0.04, 0.1).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn nuisance_off_is_identity_and_shared_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = pair(1);
        let mut q = p.clone();
        apply_nuisance(&mut q, &NuisanceConfig::off(), &mut rng);
        assert_eq!(p, q);

        let mut cfg = NuisanceConfig::off();
        cfg.photometric = true;
        cfg.photo_mode = PhotoMode::Shared;
        let img = pair(2).left;
        let mut q = ImagePair::duplicated(&img);
        apply_nuisance(&mut q, &cfg, &mut rng);
        assert_eq!(q.left, q.right);
        assert_ne!(q.left, img);
    }

    #[test]
    fn train_step_is_deterministic_and_lr0_freezes_student() {
        let d = tiny();
        let batch = [pair(1), pair(2)];
        let run = |d: &Distiller| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut st = d.init_state(4, &mut rng);
            let losses: Vec<f64> = (0..3)
                .map(|_| d.train_step(&mut st, &batch, &mut rng).unwrap().loss)
                .collect();
            (st, losses)
        };
        let (_, a) = run(&d);
        let (_, b) = run(&d);
        assert_eq!(a, b);

        let mut cfg = d.cfg.clone();
        cfg.lr = 0.0;
        cfg.lr_min = 0.0;
        let d0 = Distiller::new(Encoder::new(d.encoder.cfg.clone()).unwrap(), cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut st = d0.init_state(4, &mut rng);
        let before = st.student.clone();
        d0.train_step(&mut st, &batch, &mut rng).unwrap();
        assert_eq!(st.student, before);
        assert_eq!(st.teacher, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn kv_echo_round_trip() {
        let mut c = DistillConfig::default();
        c.set("mask_schedule", "fixed").unwrap();
        c.set("nuisance.photo_mode", "shared").unwrap();
        c.set("nuisance.occ_area", "0.1,0.2").unwrap();
        let mut d = DistillConfig::default();
        for (k, v) in c.echo() {
            assert!(d.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(c, d);
    }

    proptest::proptest! {
        #[test]
        fn cross_entropy_bounds_teacher_entropy(
            zt in proptest::collection::vec(-3.0f32..3.0, 8),
            zs in proptest::collection::vec(-3.0f32..3.0, 8),
            c in proptest::collection::vec(-1.0f32..1.0, 4),
        ) {
            let p = teacher_probs(&zt, &c, 0.5);
            for row in p.chunks(4) {
                proptest::prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let h: f64 = -teacher_probs_f64(&zt, &c, 0.5).iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / 2.0;
            let loss = distill_loss(&zt, &zs, &c, 0.5, 0.5).unwrap();
            proptest::prop_assert!(loss >= h - 1e-9);
        }
    }
}
