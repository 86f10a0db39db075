//! Transformer encoder over fused micro-cell tokens.
//!
//! Tokens start as `t⁰[r,c] = e[r,c] + a[r]` (patch embedding plus a learned
//! row embedding); horizontal structure enters only through rotary phases on
//! `(r, p)` inside attention. After the last block the row embedding is
//! subtracted again to give the de-positioned readout.

mod checkpoint;
mod rope;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::fusion::{patchify, phase_decompose, FusedImage, FusionMode, TokenGeometry};
use crate::harness::config::{parse_value, KvEcho};
use crate::tensor::{Graph, NodeId, ParamSet, Real, RopeTable, Tensor};
use crate::{BinoError, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rope::{rope_angles, rope_table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosVariant {
    /// Row embedding plus rotary `(r, p)` phases.
    PatchPhase2d,
    /// Learned table over the flattened token index.
    OneD,
    /// Learned row table plus learned fused-column table.
    Factorized2d,
    /// Learned table over every `(r, c)` cell.
    FullGrid2d,
    /// Learned row table plus a table over patch columns `p`, shared by both phases.
    DeinterleavedCenter2d,
}

impl PosVariant {
    pub const ALL: [PosVariant; 5] = [
        PosVariant::PatchPhase2d,
        PosVariant::OneD,
        PosVariant::Factorized2d,
        PosVariant::FullGrid2d,
        PosVariant::DeinterleavedCenter2d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PosVariant::PatchPhase2d => "patch-phase-2d",
            PosVariant::OneD => "1d",
            PosVariant::Factorized2d => "factorized-2d",
            PosVariant::FullGrid2d => "full-2d-grid",
            PosVariant::DeinterleavedCenter2d => "deinterleaved-center-2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| BinoError::Config(format!("unknown positional variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnKind {
    Gelu,
    SwiGlu,
}

impl FfnKind {
    pub fn name(&self) -> &'static str {
        match self {
            FfnKind::Gelu => "gelu",
            FfnKind::SwiGlu => "swiglu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(FfnKind::Gelu),
            "swiglu" => Ok(FfnKind::SwiGlu),
            _ => Err(BinoError::Config(format!("unknown ffn kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub ffn_kind: FfnKind,
    pub geometry: TokenGeometry,
    pub pos_variant: PosVariant,
    pub rope_base: f64,
    pub fusion: FusionMode,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            dim: 96,
            heads: 4,
            ffn_ratio: 4,
            ffn_kind: FfnKind::Gelu,
            geometry: TokenGeometry {
                height: 48,
                width: 160,
                patch_h: 4,
                patch_w: 4,
            },
            pos_variant: PosVariant::PatchPhase2d,
            rope_base: 10000.0,
            fusion: FusionMode::default(),
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.dim * self.ffn_ratio
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(BinoError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(BinoError::Config(format!("head dim {} is odd", self.head_dim())));
        }
        if self.pos_variant == PosVariant::PatchPhase2d && self.head_dim() % 4 != 0 {
            return Err(BinoError::Config(format!(
                "patch-phase rotary needs head dim divisible by 4, got {}",
                self.head_dim()
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(BinoError::Config("ffn_ratio must be positive".into()));
        }
        if let FusionMode::Interleave { stride } = self.fusion {
            if self.geometry.width % stride != 0 {
                return Err(BinoError::Config(format!(
                    "width {} not divisible by stride {stride}",
                    self.geometry.width
                )));
            }
        }
        Ok(())
    }

    /// Sets one key (without the `encoder.` prefix). Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "depth" => self.depth = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse_value(key, value)?,
            "ffn_kind" => self.ffn_kind = FfnKind::parse(value)?,
            "pos_variant" => self.pos_variant = PosVariant::parse(value)?,
            "rope_base" => self.rope_base = parse_value(key, value)?,
            "fusion" => self.fusion = FusionMode::parse(value)?,
            "ln_eps" => self.ln_eps = parse_value(key, value)?,
            "height" => self.geometry.height = parse_value(key, value)?,
            "width" => self.geometry.width = parse_value(key, value)?,
            "patch_h" => self.geometry.patch_h = parse_value(key, value)?,
            "patch_w" => self.geometry.patch_w = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for EncoderConfig {
    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("depth".into(), self.depth.to_string()),
            ("dim".into(), self.dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("ffn_ratio".into(), self.ffn_ratio.to_string()),
            ("ffn_kind".into(), self.ffn_kind.name().into()),
            ("pos_variant".into(), self.pos_variant.name().into()),
            ("rope_base".into(), self.rope_base.to_string()),
            ("fusion".into(), self.fusion.name()),
            ("ln_eps".into(), self.ln_eps.to_string()),
            ("height".into(), self.geometry.height.to_string()),
            ("width".into(), self.geometry.width.to_string()),
            ("patch_h".into(), self.geometry.patch_h.to_string()),
            ("patch_w".into(), self.geometry.patch_w.to_string()),
        ]
    }
}

/// Token states of one forward pass for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Embedding state followed by each block output, each `[rows·cols × dim]`.
    pub per_layer_tokens: Vec<Vec<f32>>,
    /// Additive positional content per token (the broadcast row embedding for patch-phase).
    pub additive_pos: Vec<f32>,
    pub final_depos: Vec<f32>,
}

impl EncoderState {
    pub fn last_layer(&self) -> &[f32] {
        self.per_layer_tokens.last().expect("at least the embedding state")
    }

    pub fn token<'a>(&self, layer: &'a [f32], r: usize, c: usize) -> &'a [f32] {
        let i = (r * self.cols + c) * self.dim;
        &layer[i..i + self.dim]
    }
}

/// Graph nodes produced by [`Encoder::forward_graph`].
pub struct EncoderNodes {
    pub layers: Vec<NodeId>,
    pub additive_pos: NodeId,
    pub depos: NodeId,
}

/// Lazily binds named parameters to graph leaves.
pub struct ParamBinder<'p, T: Real> {
    params: &'p ParamSet<T>,
    ids: Vec<Option<NodeId>>,
    trainable: bool,
}

impl<'p, T: Real> ParamBinder<'p, T> {
    pub fn new(params: &'p ParamSet<T>, trainable: bool) -> Self {
        ParamBinder {
            params,
            ids: vec![None; params.len()],
            trainable,
        }
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| BinoError::Config(format!("missing parameter '{name}'")))?;
        if let Some(id) = self.ids[i] {
            return Ok(id);
        }
        let t = self.params.tensors()[i].clone();
        let id = if self.trainable {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.ids[i] = Some(id);
        Ok(id)
    }

    /// Node bound for parameter index `i`, if the forward pass used it.
    pub fn node_of(&self, i: usize) -> Option<NodeId> {
        self.ids[i]
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    rope: Option<Arc<RopeTable>>,
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Linear layer weights `[fan_in × fan_out]` with variance `1/fan_in`.
pub(crate) fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    normal_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

const POS_STD: f64 = 0.02;

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let rope = match cfg.pos_variant {
            PosVariant::PatchPhase2d => Some(Arc::new(rope_table(&cfg)?)),
            _ => None,
        };
        Ok(Encoder { cfg, rope })
    }

    pub fn geometry(&self) -> &TokenGeometry {
        &self.cfg.geometry
    }

    /// Deterministic initialization from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        let c = &self.cfg;
        let g = &c.geometry;
        let d = c.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("patch.w", linear_init(&mut rng, g.patch_dim(), d));
        p.insert("patch.b", Tensor::zeros(&[d]));
        match c.pos_variant {
            PosVariant::PatchPhase2d => {
                p.insert("pos.row", normal_tensor(&mut rng, &[g.rows(), d], POS_STD));
            }
            PosVariant::OneD => {
                p.insert("pos.seq", normal_tensor(&mut rng, &[g.tokens(), d], POS_STD));
            }
            PosVariant::Factorized2d => {
                p.insert("pos.row", normal_tensor(&mut rng, &[g.rows(), d], POS_STD));
                p.insert("pos.col", normal_tensor(&mut rng, &[g.fused_cols(), d], POS_STD));
            }
            PosVariant::FullGrid2d => {
                p.insert("pos.grid", normal_tensor(&mut rng, &[g.tokens(), d], POS_STD));
            }
            PosVariant::DeinterleavedCenter2d => {
                p.insert("pos.row", normal_tensor(&mut rng, &[g.rows(), d], POS_STD));
                p.insert("pos.pcol", normal_tensor(&mut rng, &[g.patch_cols(), d], POS_STD));
            }
        }
        let hidden = c.ffn_hidden();
        let w1_out = match c.ffn_kind {
            FfnKind::Gelu => hidden,
            FfnKind::SwiGlu => 2 * hidden,
        };
        for i in 0..c.depth {
            let b = format!("blocks.{i}");
            p.insert(format!("{b}.ln1.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{b}.ln1.b"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{b}.attn.{w}"), linear_init(&mut rng, d, d));
            }
            for bname in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("{b}.attn.{bname}"), Tensor::zeros(&[d]));
            }
            p.insert(format!("{b}.ln2.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{b}.ln2.b"), Tensor::zeros(&[d]));
            p.insert(format!("{b}.ffn.w1"), linear_init(&mut rng, d, w1_out));
            p.insert(format!("{b}.ffn.b1"), Tensor::zeros(&[w1_out]));
            p.insert(format!("{b}.ffn.w2"), linear_init(&mut rng, hidden, d));
            p.insert(format!("{b}.ffn.b2"), Tensor::zeros(&[d]));
        }
        p
    }

    /// Fused images to a `[B·tokens × patch_dim]` patch matrix.
    pub fn patch_matrix(&self, inputs: &[FusedImage]) -> Result<Tensor<f32>> {
        if inputs.is_empty() {
            return Err(BinoError::Data("empty encoder batch".into()));
        }
        let g = &self.cfg.geometry;
        let mut data = Vec::with_capacity(inputs.len() * g.tokens() * g.patch_dim());
        for f in inputs {
            if f.mode != self.cfg.fusion {
                return Err(BinoError::Geometry(format!(
                    "input fused with {} but encoder expects {}",
                    f.mode.name(),
                    self.cfg.fusion.name()
                )));
            }
            data.extend(patchify(f, g)?);
        }
        Ok(Tensor::new(vec![inputs.len() * g.tokens(), g.patch_dim()], data)?)
    }

    fn additive_pos<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBinder<'_, T>,
        batch: usize,
    ) -> Result<NodeId> {
        let geo = &self.cfg.geometry;
        let (rows, cols) = (geo.rows(), geo.fused_cols());
        let tokens = geo.tokens();
        let repeat = |f: &dyn Fn(usize, usize) -> usize| -> Vec<usize> {
            (0..batch)
                .flat_map(|_| (0..tokens).map(|n| f(n / cols, n % cols)))
                .collect()
        };
        let row_idx = repeat(&|r, _| r);
        let node = match self.cfg.pos_variant {
            PosVariant::PatchPhase2d => {
                let t = bind.get(g, "pos.row")?;
                g.gather_rows(t, &row_idx)?
            }
            PosVariant::OneD => {
                let t = bind.get(g, "pos.seq")?;
                g.gather_rows(t, &repeat(&|r, c| r * cols + c))?
            }
            PosVariant::FullGrid2d => {
                let t = bind.get(g, "pos.grid")?;
                g.gather_rows(t, &repeat(&|r, c| r * cols + c))?
            }
            PosVariant::Factorized2d => {
                let tr = bind.get(g, "pos.row")?;
                let tc = bind.get(g, "pos.col")?;
                let a = g.gather_rows(tr, &row_idx)?;
                let b = g.gather_rows(tc, &repeat(&|_, c| c))?;
                g.add(a, b)?
            }
            PosVariant::DeinterleavedCenter2d => {
                let tr = bind.get(g, "pos.row")?;
                let tp = bind.get(g, "pos.pcol")?;
                let a = g.gather_rows(tr, &row_idx)?;
                let b = g.gather_rows(tp, &repeat(&|_, c| phase_decompose(c).0))?;
                g.add(a, b)?
            }
        };
        debug_assert_eq!(g.value(node).shape(), [batch * rows * cols, self.cfg.dim]);
        Ok(node)
    }

    /// Records the forward pass for a batch of patch matrices on `g`.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBinder<'_, T>,
        patches: Tensor<T>,
    ) -> Result<EncoderNodes> {
        let c = &self.cfg;
        let tokens = c.geometry.tokens();
        if patches.shape().len() != 2
            || patches.shape()[1] != c.geometry.patch_dim()
            || patches.shape()[0] % tokens != 0
        {
            return Err(BinoError::Geometry(format!(
                "patch matrix {:?} does not match {} tokens of {} features",
                patches.shape(),
                tokens,
                c.geometry.patch_dim()
            )));
        }
        let batch = patches.shape()[0] / tokens;
        let x_in = g.constant(patches);
        let w = bind.get(g, "patch.w")?;
        let b = bind.get(g, "patch.b")?;
        let e = g.linear(x_in, w, b)?;
        let pos = self.additive_pos(g, bind, batch)?;
        let mut x = g.add(e, pos)?;
        let mut layers = vec![x];
        for i in 0..c.depth {
            x = self.block(g, bind, x, i, tokens).map_err(|e| match e {
                BinoError::Tensor(t) => BinoError::Numerical(format!("block {i}: {t}")),
                other => other,
            })?;
            layers.push(x);
        }
        let depos = g.sub(x, pos)?;
        Ok(EncoderNodes {
            layers,
            additive_pos: pos,
            depos,
        })
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBinder<'_, T>,
        x: NodeId,
        i: usize,
        tokens: usize,
    ) -> Result<NodeId> {
        let c = &self.cfg;
        let p = |s: &str| format!("blocks.{i}.{s}");
        let mut get = |g: &mut Graph<T>, s: &str| bind.get(g, &p(s));

        let (g1, b1) = (get(g, "ln1.g")?, get(g, "ln1.b")?);
        let h = g.layernorm(x, g1, b1, c.ln_eps)?;
        let mut proj = |g: &mut Graph<T>, w: &str, b: &str| -> Result<NodeId> {
            let (w, b) = (get(g, w)?, get(g, b)?);
            let y = g.linear(h, w, b)?;
            Ok(g.split_heads(y, tokens, c.heads)?)
        };
        let q = proj(g, "attn.wq", "attn.bq")?;
        let k = proj(g, "attn.wk", "attn.bk")?;
        let v = proj(g, "attn.wv", "attn.bv")?;
        let a = g.attention(q, k, v, self.rope.clone())?;
        let a = g.merge_heads(a, c.heads)?;
        let (wo, bo) = (get(g, "attn.wo")?, get(g, "attn.bo")?);
        let a = g.linear(a, wo, bo)?;
        let x = g.add(x, a)?;

        let (g2, b2) = (get(g, "ln2.g")?, get(g, "ln2.b")?);
        let h = g.layernorm(x, g2, b2, c.ln_eps)?;
        let (w1, bb1) = (get(g, "ffn.w1")?, get(g, "ffn.b1")?);
        let f = g.linear(h, w1, bb1)?;
        let f = match c.ffn_kind {
            FfnKind::Gelu => g.gelu(f)?,
            FfnKind::SwiGlu => g.swiglu(f)?,
        };
        let (w2, bb2) = (get(g, "ffn.w2")?, get(g, "ffn.b2")?);
        let f = g.linear(f, w2, bb2)?;
        Ok(g.add(x, f)?)
    }

    /// Inference pass (no gradients) returning per-input token states.
    pub fn forward(&self, params: &ParamSet<f32>, inputs: &[FusedImage]) -> Result<Vec<EncoderState>> {
        let patches = self.patch_matrix(inputs)?;
        let mut g = Graph::<f32>::no_grad();
        let mut bind = ParamBinder::new(params, false);
        let nodes = self.forward_graph(&mut g, &mut bind, patches)?;
        Ok(self.collect_states(&g, &nodes, inputs.len()))
    }

    pub fn collect_states<T: Real>(
        &self,
        g: &Graph<T>,
        nodes: &EncoderNodes,
        batch: usize,
    ) -> Vec<EncoderState> {
        let geo = &self.cfg.geometry;
        let per = geo.tokens() * self.cfg.dim;
        let slice = |id: NodeId, b: usize| -> Vec<f32> {
            g.value(id).data()[b * per..(b + 1) * per]
                .iter()
                .map(|v| v.f64() as f32)
                .collect()
        };
        (0..batch)
            .map(|b| EncoderState {
                rows: geo.rows(),
                cols: geo.fused_cols(),
                dim: self.cfg.dim,
                per_layer_tokens: nodes.layers.iter().map(|&id| slice(id, b)).collect(),
                additive_pos: slice(nodes.additive_pos, b),
                final_depos: slice(nodes.depos, b),
            })
            .collect()
    }

    /// Names of parameters that receive weight decay (matrices, not vectors or position tables).
    pub fn decay_mask(params: &ParamSet<f32>) -> Vec<bool> {
        params
            .iter()
            .map(|(name, t)| t.shape().len() == 2 && !name.starts_with("pos."))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{interleave, ImagePair};
    use crate::imageio::Image;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            ffn_ratio: 2,
            geometry: TokenGeometry::new(8, 16, 4, 4).unwrap(),
            ..Default::default()
        }
    }

    fn image(h: usize, w: usize, seed: u32) -> Image {
        let data = (0..3 * h * w)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f32 / 1000.0)
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn full_resolution_token_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.geometry.rows(), 12);
        assert_eq!(cfg.geometry.fused_cols(), 80);
        assert_eq!(cfg.geometry.tokens(), 960);
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.heads = 3;
        assert!(Encoder::new(c).is_err());
        let mut c = small_cfg();
        c.dim = 12;
        c.heads = 2; // head dim 6: odd pair count for the (r, p) split
        assert!(Encoder::new(c).is_err());
    }

    #[test]
    fn zero_image_gives_bias_plus_row_embedding() {
        let enc = Encoder::new(EncoderConfig {
            depth: 0,
            ..small_cfg()
        })
        .unwrap();
        let mut p = enc.init_params(1);
        *p.get_mut("pos.row").unwrap() = Tensor::zeros(&[2, 16]);
        let bias: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
        *p.get_mut("patch.b").unwrap() = Tensor::new(vec![16], bias.clone()).unwrap();
        let z = Image::zeros(8, 16);
        let fused = interleave(&ImagePair::duplicated(&z)).unwrap();
        let st = enc.forward(&p, &[fused]).unwrap();
        for tok in st[0].last_layer().chunks(16) {
            assert_eq!(tok, bias.as_slice());
        }
    }

    #[test]
    fn depth_zero_depos_is_patch_embedding() {
        let enc = Encoder::new(EncoderConfig {
            depth: 0,
            ..small_cfg()
        })
        .unwrap();
        let p = enc.init_params(3);
        let img = image(8, 16, 1);
        let fused = interleave(&ImagePair::duplicated(&img)).unwrap();
        let st = &enc.forward(&p, &[fused.clone()]).unwrap()[0];
        assert_eq!(st.per_layer_tokens.len(), 1);
        let patches = enc.patch_matrix(&[fused]).unwrap();
        let e = patches.matmul(p.get("patch.w").unwrap()).unwrap();
        for (a, b) in st.final_depos.iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn equal_rows_differ_by_row_embedding() {
        let enc = Encoder::new(small_cfg()).unwrap();
        let p = enc.init_params(4);
        // Both token rows of this image hold identical pixels.
        let mut img = Image::zeros(8, 16);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..16 {
                    img.set(c, y, x, ((y % 4) * 16 + x) as f32 / 64.0 * (c + 1) as f32 / 3.0);
                }
            }
        }
        let fused = interleave(&ImagePair::duplicated(&img)).unwrap();
        let st = &enc.forward(&p, &[fused]).unwrap()[0];
        let a = p.get("pos.row").unwrap().data();
        let l0 = &st.per_layer_tokens[0];
        for c in 0..st.cols {
            let t0 = st.token(l0, 0, c);
            let t1 = st.token(l0, 1, c);
            for j in 0..16 {
                let want = a[16 + j] - a[j];
                assert!((t1[j] - t0[j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn depos_identity_and_layer_count() {
        let enc = Encoder::new(small_cfg()).unwrap();
        let p = enc.init_params(5);
        let fused = interleave(&ImagePair::new(image(8, 16, 2), image(8, 16, 3)).unwrap()).unwrap();
        let st = &enc.forward(&p, &[fused.clone()]).unwrap()[0];
        assert_eq!(st.per_layer_tokens.len(), 3);
        for ((d, l), a) in st.final_depos.iter().zip(st.last_layer()).zip(&st.additive_pos) {
            assert_eq!(*d, l - a);
        }
        let again = &enc.forward(&p, &[fused]).unwrap()[0];
        assert_eq!(st, again);
    }

    #[test]
    fn column_shuffle_changes_output() {
        let enc = Encoder::new(small_cfg()).unwrap();
        let p = enc.init_params(6);
        let pair = ImagePair::new(image(8, 16, 4), image(8, 16, 5)).unwrap();
        let fused = interleave(&pair).unwrap();
        let mut shuffled = fused.clone();
        // swap fused columns 0..4 and 8..12 (token columns 0 and 2)
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..4 {
                    let a = shuffled.image.get(c, y, x);
                    let b = shuffled.image.get(c, y, x + 8);
                    shuffled.image.set(c, y, x, b);
                    shuffled.image.set(c, y, x + 8, a);
                }
            }
        }
        let a = enc.forward(&p, &[fused]).unwrap();
        let b = enc.forward(&p, &[shuffled]).unwrap();
        let (ta, tb) = (&a[0], &b[0]);
        // token (0,2) in the shuffled input carries the content of token (0,0)
        let d: f32 = ta
            .token(&ta.final_depos, 0, 0)
            .iter()
            .zip(tb.token(&tb.final_depos, 0, 2))
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(d > 1e-4);
    }

    #[test]
    fn all_variants_and_swiglu_run() {
        for v in PosVariant::ALL {
            for ffn in [FfnKind::Gelu, FfnKind::SwiGlu] {
                let enc = Encoder::new(EncoderConfig {
                    pos_variant: v,
                    ffn_kind: ffn,
                    ..small_cfg()
                })
                .unwrap();
                let p = enc.init_params(7);
                let fused = interleave(&ImagePair::duplicated(&image(8, 16, 9))).unwrap();
                let st = enc.forward(&p, &[fused]).unwrap();
                assert_eq!(st[0].final_depos.len(), 2 * 8 * 16);
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let mut c = EncoderConfig::default();
        c.set("pos_variant", "1d").unwrap();
        c.set("fusion", "concat").unwrap();
        let mut d = EncoderConfig::default();
        for (k, v) in c.echo() {
            assert!(d.set(&k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.set("nope", "1").unwrap());
    }
}
