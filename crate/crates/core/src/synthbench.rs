//! Controlled dual-view pairs with a known constant horizontal shift.
//!
//! The right view is the left crop shifted so that `R[u] = L[u + s]`, with
//! reflect padding where `u + s` runs past the border. A left token at view
//! column `x` therefore matches the right view at `x - s`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{apply_nuisance, parse_pair, NuisanceConfig};
use crate::fusion::{ImagePair, TokenGeometry};
use crate::harness::config::{parse_value, KvEcho};
use crate::imageio::{read_image, write_ppm, Image};
use crate::{BinoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "EASY_S1")]
    EasyS1,
    #[serde(rename = "HARD_S1")]
    HardS1,
    #[serde(rename = "HARD_S2")]
    HardS2,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::EasyS1 => "EASY_S1",
            Preset::HardS1 => "HARD_S1",
            Preset::HardS2 => "HARD_S2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EASY_S1" => Ok(Preset::EasyS1),
            "HARD_S1" => Ok(Preset::HardS1),
            "HARD_S2" => Ok(Preset::HardS2),
            _ => Err(BinoError::Config(format!("unknown preset '{s}'"))),
        }
    }

    /// Shift range in per-view pixels.
    pub fn shift_range(&self) -> (usize, usize) {
        match self {
            Preset::EasyS1 | Preset::HardS1 => (2, 12),
            Preset::HardS2 => (2, 24),
        }
    }

    pub fn is_hard(&self) -> bool {
        !matches!(self, Preset::EasyS1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub preset: Preset,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub occlusion: bool,
    pub photometric: bool,
    pub seed: u64,
    /// Optional list of source images; procedural textures otherwise.
    pub sources: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::preset(Preset::HardS1)
    }
}

impl BenchConfig {
    pub fn preset(preset: Preset) -> Self {
        let (d_min, d_max) = preset.shift_range();
        BenchConfig {
            preset,
            count: 64,
            height: 48,
            width: 160,
            patch_h: 4,
            patch_w: 4,
            d_min,
            d_max,
            occlusion: preset.is_hard(),
            photometric: preset.is_hard(),
            seed: 0,
            sources: None,
        }
    }

    pub fn geometry(&self) -> Result<TokenGeometry> {
        TokenGeometry::new(self.height, self.width, self.patch_h, self.patch_w)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.d_min > self.d_max || self.d_max >= self.width {
            return Err(BinoError::Config(format!(
                "shift range [{}, {}] invalid for width {}",
                self.d_min, self.d_max, self.width
            )));
        }
        Ok(())
    }

    pub fn nuisance(&self) -> NuisanceConfig {
        let mut n = if self.preset.is_hard() {
            NuisanceConfig::hard()
        } else {
            NuisanceConfig::off()
        };
        n.occlusion &= self.occlusion;
        n.photometric &= self.photometric;
        n.noise &= self.photometric;
        n
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "preset" => {
                let p = Preset::parse(value)?;
                let keep = (self.count, self.height, self.width, self.patch_h, self.patch_w, self.seed);
                let sources = self.sources.take();
                *self = Self::preset(p);
                (self.count, self.height, self.width, self.patch_h, self.patch_w, self.seed) = keep;
                self.sources = sources;
            }
            "count" => self.count = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "patch_h" => self.patch_h = parse_value(key, value)?,
            "patch_w" => self.patch_w = parse_value(key, value)?,
            "shift" => (self.d_min, self.d_max) = parse_pair(key, value)?,
            "occlusion" => self.occlusion = parse_value(key, value)?,
            "photometric" => self.photometric = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "sources" => {
                self.sources = match value {
                    "" | "procedural" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for BenchConfig {
    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("preset".into(), self.preset.name().into()),
            ("count".into(), self.count.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("patch_h".into(), self.patch_h.to_string()),
            ("patch_w".into(), self.patch_w.to_string()),
            ("shift".into(), format!("{},{}", self.d_min, self.d_max)),
            ("occlusion".into(), self.occlusion.to_string()),
            ("photometric".into(), self.photometric.to_string()),
            ("seed".into(), self.seed.to_string()),
            (
                "sources".into(),
                self.sources
                    .as_ref()
                    .map_or("procedural".into(), |p| p.display().to_string()),
            ),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSample {
    pub index: usize,
    /// `gt_disp` in per-view pixels on the `rows × patch_cols` descriptor grid.
    pub pair: ImagePair,
    pub shift_px: usize,
    pub seed: u64,
    pub preset: Preset,
}

impl BenchSample {
    /// Ground truth in patch columns.
    pub fn gt_tokens(&self, geo: &TokenGeometry) -> Vec<f32> {
        let tp = geo.patch_col_px() as f32;
        self.pair
            .gt_disp
            .as_ref()
            .map(|g| g.iter().map(|d| d / tp).collect())
            .unwrap_or_default()
    }

    pub fn valid(&self) -> &[bool] {
        self.pair.valid.as_deref().unwrap_or(&[])
    }
}

/// Lattice value noise with bilinear interpolation.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let (gh, gw) = (h / cell + 3, w / cell + 3);
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = (y + oy) as f32 / cell as f32;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = (x + ox) as f32 / cell as f32;
            let (x0, tx) = (fx as usize, fx.fract());
            let at = |j: usize, i: usize| lattice[j * gw + i];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Multi-octave colored noise with a few solid shapes on top.
pub fn procedural_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let mut img = Image::zeros(h, w);
    let mix: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut fields = vec![vec![0.0f32; h * w]; 3];
    for field in fields.iter_mut() {
        let mut amp = 1.0;
        for cell in [16, 8, 4, 2] {
            for (f, n) in field.iter_mut().zip(value_noise(rng, h, w, cell)) {
                *f += amp * n;
            }
            amp *= 0.6;
        }
    }
    for c in 0..3 {
        for i in 0..h * w {
            let v: f32 = (0..3).map(|k| mix[c * 3 + k] * fields[k][i]).sum();
            img.data_mut()[c * h * w + i] = v;
        }
    }
    let shapes = rng.random_range(4..10);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let (cy, cx) = (rng.random_range(0..h) as f32, rng.random_range(0..w) as f32);
        let (ry, rx) = (rng.random_range(2.0..h as f32 / 3.0), rng.random_range(2.0..w as f32 / 6.0));
        let disc = rng.random_bool(0.5);
        let lo = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        img.set(c, y, x, col + lo);
                    }
                }
            }
        }
    }
    for c in 0..3 {
        let plane = &mut img.data_mut()[c * h * w..(c + 1) * h * w];
        let (mn, mx) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (mx - mn).max(1e-6);
        for v in plane.iter_mut() {
            *v = (*v - mn) / span;
        }
    }
    img
}

/// Reflect index into `[0, n)` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// `R[u] = L[u + s]` with reflect padding.
pub fn shift_view(left: &Image, s: usize) -> Image {
    let (h, w) = (left.height(), left.width());
    let mut out = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for u in 0..w {
                out.set(c, y, u, left.get(c, y, reflect((u + s) as isize, w)));
            }
        }
    }
    out
}

/// Per-cell ground truth (pixels) and validity for a constant shift `s` on the
/// patch-column grid. A left cell is valid when every pixel column `x` it covers has `x - s ≥ 0`;
/// invalid cells carry 0.
pub fn constant_gt(geo: &TokenGeometry, s: usize) -> (Vec<f32>, Vec<bool>) {
    let (rows, cols, tp) = (geo.rows(), geo.patch_cols(), geo.patch_col_px());
    let n = rows * cols;
    let valid: Vec<bool> = (0..n).map(|i| (i % cols) * tp >= s).collect();
    let gt = valid.iter().map(|&v| if v { s as f32 } else { 0.0 }).collect();
    (gt, valid)
}

fn load_sources(path: &Path) -> Result<Vec<Image>> {
    let text = std::fs::read_to_string(path).map_err(|e| BinoError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let imgs = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| read_image(&base.join(l)))
        .collect::<Result<Vec<_>>>()?;
    if imgs.is_empty() {
        return Err(BinoError::Data(format!("{}: no source images", path.display())));
    }
    Ok(imgs)
}

/// Seed for sample `index` of a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Generates one sample from an explicit shift; images are quantized to 8 bits.
pub fn make_sample(
    cfg: &BenchConfig,
    index: usize,
    shift: usize,
    base: &Image,
    rng: &mut ChaCha8Rng,
) -> Result<BenchSample> {
    let geo = cfg.geometry()?;
    let (h, w) = (cfg.height, cfg.width);
    if base.height() < h || base.width() < w {
        return Err(BinoError::Data(format!(
            "source {}x{} smaller than crop {h}x{w}",
            base.height(),
            base.width()
        )));
    }
    let y0 = rng.random_range(0..=base.height() - h);
    let x0 = rng.random_range(0..=base.width() - w);
    let left = base.crop(y0, x0, h, w)?.quantized();
    let right = shift_view(&left, shift);
    let mut pair = ImagePair::new(left, right)?;
    apply_nuisance(&mut pair, &cfg.nuisance(), rng);
    pair.left = pair.left.quantized();
    pair.right = pair.right.quantized();
    let (gt, valid) = constant_gt(&geo, shift);
    pair.gt_disp = Some(gt);
    pair.valid = Some(valid);
    Ok(BenchSample {
        index,
        pair,
        shift_px: shift,
        seed: cfg.seed,
        preset: cfg.preset,
    })
}

/// Samples `cfg.count` pairs; sample `i` depends only on `(seed, i)`.
pub fn generate(cfg: &BenchConfig) -> Result<Vec<BenchSample>> {
    cfg.validate()?;
    let sources = cfg.sources.as_deref().map(load_sources).transpose()?;
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
            let shift = rng.random_range(cfg.d_min..=cfg.d_max);
            let base = match &sources {
                Some(s) => s[rng.random_range(0..s.len())].clone(),
                None => procedural_texture(&mut rng, cfg.height + 8, cfg.width + 16),
            };
            make_sample(cfg, i, shift, &base, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub pck0: f64,
    pub pck1: f64,
    pub pck2: f64,
    pub epe: f64,
    pub count: usize,
}

/// PCK@{0,1,2} (percent) and EPE in token columns over valid cells.
pub fn score_matching(pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<MatchScore> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(BinoError::Geometry(format!(
            "prediction {} vs ground truth {} vs mask {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let mut hits = [0usize; 3];
    let mut err = 0.0f64;
    let mut n = 0usize;
    for ((p, g), _) in pred.iter().zip(gt).zip(valid).filter(|(_, &v)| v) {
        let e = (*p as f64 - *g as f64).abs();
        err += e;
        n += 1;
        for (k, h) in hits.iter_mut().enumerate() {
            if e <= k as f64 {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(BinoError::Data("no valid tokens to score".into()));
    }
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    Ok(MatchScore {
        pck0: pct(hits[0]),
        pck1: pct(hits[1]),
        pck2: pct(hits[2]),
        epe: err / n as f64,
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub shift_px: usize,
    pub left: String,
    pub right: String,
    pub gt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub preset: Preset,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn file_names(index: usize) -> (String, String, String) {
    (
        format!("{index:05}_L.ppm"),
        format!("{index:05}_R.ppm"),
        format!("{index:05}_gt.csv"),
    )
}

fn gt_csv(sample: &BenchSample, geo: &TokenGeometry) -> String {
    let cols = geo.patch_cols();
    let gt = sample.gt_tokens(geo);
    let mut s = String::from("row,col,disp_tokens\n");
    for (i, (&d, &v)) in gt.iter().zip(sample.valid()).enumerate() {
        if v {
            s.push_str(&format!("{},{},{}\n", i / cols, i % cols, d));
        }
    }
    s
}

/// Writes image triplets and the manifest under `root`.
pub fn write_dataset(root: &Path, cfg: &BenchConfig, samples: &[BenchSample]) -> Result<BenchManifest> {
    std::fs::create_dir_all(root).map_err(|e| BinoError::io(root, e))?;
    let geo = cfg.geometry()?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let (l, r, g) = file_names(s.index);
        write_ppm(&root.join(&l), &s.pair.left)?;
        write_ppm(&root.join(&r), &s.pair.right)?;
        let gp = root.join(&g);
        std::fs::write(&gp, gt_csv(s, &geo)).map_err(|e| BinoError::io(&gp, e))?;
        entries.push(ManifestEntry {
            index: s.index,
            shift_px: s.shift_px,
            left: l,
            right: r,
            gt: g,
        });
    }
    let manifest = BenchManifest {
        config: cfg.echo(),
        seed: cfg.seed,
        preset: cfg.preset,
        samples: entries,
    };
    let mp = root.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mp, text + "\n").map_err(|e| BinoError::io(&mp, e))?;
    Ok(manifest)
}

fn parse_gt_csv(text: &str, geo: &TokenGeometry, path: &Path) -> Result<(Vec<f32>, Vec<bool>)> {
    let (rows, cols) = (geo.rows(), geo.patch_cols());
    let mut gt = vec![0.0f32; rows * cols];
    let mut valid = vec![false; rows * cols];
    let bad = |line: &str| BinoError::Data(format!("{}: bad row '{line}'", path.display()));
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut it = line.split(',');
        let (Some(r), Some(c), Some(d), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad(line));
        };
        let r: usize = r.trim().parse().map_err(|_| bad(line))?;
        let c: usize = c.trim().parse().map_err(|_| bad(line))?;
        let d: f32 = d.trim().parse().map_err(|_| bad(line))?;
        if r >= rows || c >= cols {
            return Err(bad(line));
        }
        gt[r * cols + c] = d * geo.patch_col_px() as f32;
        valid[r * cols + c] = true;
    }
    Ok((gt, valid))
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<(BenchConfig, Vec<BenchSample>)> {
    let mp = root.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&mp).map_err(|e| BinoError::io(&mp, e))?;
    let manifest: BenchManifest = serde_json::from_str(&text)
        .map_err(|e| BinoError::Data(format!("{}: {e}", mp.display())))?;
    let mut cfg = BenchConfig::default();
    for (k, v) in &manifest.config {
        if !cfg.set(k, v)? {
            return Err(BinoError::Data(format!("{}: unknown config key '{k}'", mp.display())));
        }
    }
    let geo = cfg.geometry()?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let mut pair = ImagePair::new(read_image(&root.join(&e.left))?, read_image(&root.join(&e.right))?)?;
            geo.check_pair(&pair)?;
            let gp = root.join(&e.gt);
            let text = std::fs::read_to_string(&gp).map_err(|err| BinoError::io(&gp, err))?;
            let (gt, valid) = parse_gt_csv(&text, &geo, &gp)?;
            pair.gt_disp = Some(gt);
            pair.valid = Some(valid);
            Ok(BenchSample {
                index: e.index,
                pair,
                shift_px: e.shift_px,
                seed: manifest.seed,
                preset: manifest.preset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(preset: Preset) -> BenchConfig {
        BenchConfig {
            count: 4,
            height: 16,
            width: 32,
            ..BenchConfig::preset(preset)
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn zero_shift_gives_identical_views() {
        let cfg = small(Preset::EasyS1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = procedural_texture(&mut rng, 24, 48);
        let s = make_sample(&cfg, 0, 0, &base, &mut rng).unwrap();
        assert_eq!(s.pair.left, s.pair.right);
        assert!(s.pair.gt_disp.unwrap().iter().all(|&d| d == 0.0));
        assert!(s.pair.valid.unwrap().iter().all(|&v| v));
    }

    #[test]
    fn shift_definition_interior() {
        let cfg = small(Preset::EasyS1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = procedural_texture(&mut rng, 24, 48);
        let s = make_sample(&cfg, 0, 4, &base, &mut rng).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for u in 0..28 {
                    assert_eq!(s.pair.right.get(c, y, u), s.pair.left.get(c, y, u + 4));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let cfg = small(Preset::HardS2);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((2..=24).contains(&s.shift_px));
        }
    }

    #[test]
    fn s2_range_is_wider() {
        let (a, b) = Preset::HardS1.shift_range();
        let (c, d) = Preset::HardS2.shift_range();
        assert!(c <= a && d > b);
    }

    #[test]
    fn score_examples() {
        let gt = vec![2.0f32; 6];
        let valid = vec![true; 6];
        let s = score_matching(&gt, &gt, &valid).unwrap();
        assert_eq!((s.pck0, s.epe), (100.0, 0.0));
        let off: Vec<f32> = gt.iter().map(|g| g + 1.0).collect();
        let s = score_matching(&off, &gt, &valid).unwrap();
        assert_eq!((s.pck0, s.pck1, s.epe), (0.0, 100.0, 1.0));
        assert!(score_matching(&gt, &gt, &[false; 6]).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(Preset::HardS1);
        let samples = generate(&cfg).unwrap();
        write_dataset(dir.path(), &cfg, &samples).unwrap();
        let (cfg2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, samples);
    }

    proptest::proptest! {
        #[test]
        fn pck_is_monotone(pairs in proptest::collection::vec((0.0f32..10.0, -4.0f32..4.0, proptest::bool::weighted(0.8)), 1..50)) {
            let gt: Vec<f32> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<f32> = pairs.iter().map(|p| p.0 + p.1).collect();
            let mut valid: Vec<bool> = pairs.iter().map(|p| p.2).collect();
            valid[0] = true;
            let s = score_matching(&pred, &gt, &valid).unwrap();
            proptest::prop_assert!(s.pck0 <= s.pck1 && s.pck1 <= s.pck2 && s.pck2 <= 100.0);
            proptest::prop_assert!(s.epe >= 0.0 && s.count == valid.iter().filter(|&&v| v).count());
            let exact = score_matching(&gt, &gt, &valid).unwrap();
            proptest::prop_assert_eq!(exact.pck0, 100.0);
        }
    }
}
