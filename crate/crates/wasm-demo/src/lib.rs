//! Browser demo: a synthbench pair, its fused micro-cell image, and a
//! pixel-descriptor stereo probe (WTA and SGM) with live penalties.

use bino_core::fusion::{fuse, phase_pairs, FusionMode, ImagePair, Provenance, TokenGeometry};
use bino_core::imageio::Image;
use bino_core::mech::{geometry_metrics, phase_distribution};
use bino_core::stereo::{match_pair, DescriptorMap, ProbeParams};
use bino_core::synthbench::{constant_gt, make_sample, procedural_texture, score_matching, BenchConfig, Preset};
use bino_core::Result;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: bino_core::BinoError) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// Per-view patch vectors, mean-removed and unit length.
pub fn pixel_descriptors(img: &Image, geo: &TokenGeometry) -> Result<DescriptorMap> {
    let (ph, pw) = (geo.patch_h, geo.patch_w);
    let (rows, cols) = (geo.rows(), geo.patch_cols());
    let dim = Image::CHANNELS * ph * pw;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for p in 0..cols {
            let start = data.len();
            for c in 0..Image::CHANNELS {
                for y in 0..ph {
                    for x in 0..pw {
                        data.push(img.get(c, r * ph + y, p * pw + x));
                    }
                }
            }
            let patch = &mut data[start..];
            let mean = patch.iter().sum::<f32>() / dim as f32;
            patch.iter_mut().for_each(|v| *v -= mean);
        }
    }
    let mut m = DescriptorMap::new(rows, cols, dim, data)?;
    m.normalize();
    Ok(m)
}

pub struct MatchSummary {
    pub rows: usize,
    pub cols: usize,
    pub wta: Vec<f32>,
    pub sgm: Vec<f32>,
    pub gt: Vec<f32>,
    pub wta_pck1: f64,
    pub sgm_pck1: f64,
    pub lr_keep: f64,
}

pub fn match_scene(pair: &ImagePair, geo: &TokenGeometry, shift: usize, dmax: usize, p1: f64, p2: f64) -> Result<MatchSummary> {
    let dl = pixel_descriptors(&pair.left, geo)?;
    let dr = pixel_descriptors(&pair.right, geo)?;
    let pp = ProbeParams {
        dmax: dmax.clamp(2, geo.patch_cols()),
        p1,
        p2,
        ..ProbeParams::default()
    };
    pp.validate()?;
    let res = match_pair(&dl, &dr, &pp)?;
    let (gt_px, valid) = constant_gt(geo, shift);
    let gt: Vec<f32> = gt_px.iter().map(|g| g / geo.patch_col_px() as f32).collect();
    let wta: Vec<f32> = res.wta.iter().map(|&d| d as f32).collect();
    let sgm: Vec<f32> = res.sgm.iter().map(|&d| d as f32).collect();
    Ok(MatchSummary {
        rows: res.rows,
        cols: res.cols,
        wta_pck1: score_matching(&wta, &gt, &valid)?.pck1,
        sgm_pck1: score_matching(&sgm, &gt, &valid)?.pck1,
        wta,
        sgm,
        gt,
        lr_keep: res.lr_keep,
    })
}

/// RowConc and interior GT@1 of a uniform phase distribution on `geo`.
pub fn chance_levels(geo: &TokenGeometry) -> Result<(f64, f64)> {
    let pairs = phase_pairs(geo, FusionMode::default())?;
    let (rows, cols) = (geo.rows(), geo.patch_cols());
    let tokens = vec![1.0f32; rows * geo.fused_cols() * 4];
    let dist = phase_distribution(&tokens, rows, geo.fused_cols(), 4, &pairs, 1.0)?;
    let targets: Vec<Option<usize>> = (0..rows * cols)
        .map(|i| Some(i % cols).filter(|&p| p > 0 && p + 1 < cols))
        .collect();
    let m = geometry_metrics(&dist, &targets)?;
    Ok((m.row_conc, m.gt_at_1))
}

#[wasm_bindgen]
pub struct Scene {
    cfg: BenchConfig,
    pair: ImagePair,
    shift: usize,
}

#[wasm_bindgen]
impl Scene {
    /// A procedural pair with an explicit shift in pixels; `hard` adds occluders and photometric noise.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, shift: u32, hard: bool) -> std::result::Result<Scene, JsError> {
        Scene::build(seed as u64, shift as usize, hard).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn height(&self) -> usize {
        self.cfg.height
    }

    pub fn left_rgba(&self) -> Vec<u8> {
        rgba(&self.pair.left)
    }

    pub fn right_rgba(&self) -> Vec<u8> {
        rgba(&self.pair.right)
    }

    /// The fused image (twice the view width) under pixel interleaving or side-by-side concat.
    pub fn fused_rgba(&self, concat: bool) -> std::result::Result<Vec<u8>, JsError> {
        let mode = if concat { FusionMode::Concat } else { FusionMode::default() };
        let fused = fuse(&self.pair, mode, Provenance::Normal).map_err(js)?;
        Ok(rgba(&fused.image))
    }

    pub fn probe(&self, dmax: usize, p1: f64, p2: f64) -> std::result::Result<Probe, JsError> {
        let geo = self.cfg.geometry().map_err(js)?;
        match_scene(&self.pair, &geo, self.shift, dmax, p1, p2).map(Probe).map_err(js)
    }

    /// `[row_conc, gt_at_1]` of a uniform phase distribution on this grid.
    pub fn chance(&self) -> std::result::Result<Vec<f64>, JsError> {
        let geo = self.cfg.geometry().map_err(js)?;
        let (rc, g1) = chance_levels(&geo).map_err(js)?;
        Ok(vec![rc, g1])
    }
}

impl Scene {
    pub fn build(seed: u64, shift: usize, hard: bool) -> Result<Scene> {
        let preset = if hard { Preset::HardS1 } else { Preset::EasyS1 };
        let cfg = BenchConfig {
            seed,
            ..BenchConfig::preset(preset)
        };
        let shift = shift.min(cfg.width / 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = procedural_texture(&mut rng, cfg.height + 8, cfg.width + 16);
        let sample = make_sample(&cfg, 0, shift, &base, &mut rng)?;
        Ok(Scene {
            cfg,
            pair: sample.pair,
            shift,
        })
    }

    pub fn pair(&self) -> &ImagePair {
        &self.pair
    }
}

#[wasm_bindgen]
pub struct Probe(MatchSummary);

#[wasm_bindgen]
impl Probe {
    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn wta(&self) -> Vec<f32> {
        self.0.wta.clone()
    }

    pub fn sgm(&self) -> Vec<f32> {
        self.0.sgm.clone()
    }

    pub fn gt(&self) -> Vec<f32> {
        self.0.gt.clone()
    }

    pub fn wta_pck1(&self) -> f64 {
        self.0.wta_pck1
    }

    pub fn sgm_pck1(&self) -> f64 {
        self.0.sgm_pck1
    }

    pub fn lr_keep(&self) -> f64 {
        self.0.lr_keep
    }
}
