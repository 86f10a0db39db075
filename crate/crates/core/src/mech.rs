//! Epipolar geometry of fused token states: even-to-odd phase similarity
//! distributions, their layerwise metrics, and counterfactual inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderState};
use crate::fusion::{fuse, phase_pairs, ImagePair, Provenance, TokenGeometry};
use crate::imageio::Image;
use crate::tensor::{dot, norm, ParamSet};
use crate::{BinoError, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Softmax rows over every odd-phase candidate, one row per even-phase query.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSimilarity {
    pub rows: usize,
    pub cols: usize,
    /// `[rows·cols × rows·cols]`, query `(r, p)` major.
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl PhaseSimilarity {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn query(&self, r: usize, p: usize) -> &[f64] {
        let n = self.cells();
        let i = r * self.cols + p;
        &self.probs[i * n..(i + 1) * n]
    }
}

/// Cosine similarity from even-phase tokens to odd-phase tokens of one layer.
pub fn phase_distribution(
    tokens: &[f32],
    rows: usize,
    fused_cols: usize,
    dim: usize,
    pairs: &[(usize, usize)],
    temperature: f64,
) -> Result<PhaseSimilarity> {
    if temperature <= 0.0 {
        return Err(BinoError::Config("similarity temperature must be positive".into()));
    }
    if tokens.len() != rows * fused_cols * dim {
        return Err(BinoError::Geometry(format!(
            "token grid {} != {rows}x{fused_cols}x{dim}",
            tokens.len()
        )));
    }
    let cols = pairs.len();
    let unit = |r: usize, c: usize| -> Vec<f64> {
        let v = &tokens[(r * fused_cols + c) * dim..][..dim];
        let n = norm(v);
        v.iter().map(|&x| if n > 0.0 { x as f64 / n } else { 0.0 }).collect()
    };
    let mut even = Vec::with_capacity(rows * cols);
    let mut odd = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for &(a, b) in pairs {
            even.push(unit(r, a));
            odd.push(unit(r, b));
        }
    }
    let n = rows * cols;
    let mut probs = Vec::with_capacity(n * n);
    let mut logits = vec![0.0f64; n];
    for e in &even {
        for (l, o) in logits.iter_mut().zip(&odd) {
            *l = dot(e, o) / temperature;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        probs.extend(logits.iter().map(|l| (l - mx).exp() / z));
    }
    Ok(PhaseSimilarity {
        rows,
        cols,
        probs,
        temperature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub row_conc: f64,
    pub gt_at_0: f64,
    pub gt_at_1: f64,
    pub mrr: f64,
    pub entropy: f64,
    pub acc_at_0: f64,
    pub acc_at_1: f64,
}

impl GeometryMetrics {
    fn add(&mut self, o: &GeometryMetrics) {
        self.row_conc += o.row_conc;
        self.gt_at_0 += o.gt_at_0;
        self.gt_at_1 += o.gt_at_1;
        self.mrr += o.mrr;
        self.entropy += o.entropy;
        self.acc_at_0 += o.acc_at_0;
        self.acc_at_1 += o.acc_at_1;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.row_conc *= f;
        self.gt_at_0 *= f;
        self.gt_at_1 *= f;
        self.mrr *= f;
        self.entropy *= f;
        self.acc_at_0 *= f;
        self.acc_at_1 *= f;
        self
    }

    /// Unweighted mean.
    pub fn mean(items: &[GeometryMetrics]) -> GeometryMetrics {
        let mut acc = GeometryMetrics::default();
        for m in items {
            acc.add(m);
        }
        if items.is_empty() {
            acc
        } else {
            acc.scaled(1.0 / items.len() as f64)
        }
    }
}

/// Metrics of a single query distribution `q` over `rows × cols` candidates
/// with target `(r, p_gt)`. GT@k and entropy use the same-row conditional;
/// MRR and Acc@k rank over every candidate.
pub fn query_metrics(q: &[f64], rows: usize, cols: usize, r: usize, p_gt: usize) -> Result<GeometryMetrics> {
    if r >= rows || p_gt >= cols || q.len() != rows * cols {
        return Err(BinoError::Geometry(format!(
            "target ({r}, {p_gt}) off the {rows}x{cols} grid"
        )));
    }
    let row = &q[r * cols..(r + 1) * cols];
    let row_conc: f64 = row.iter().sum();
    let t = r * cols + p_gt;
    let cond = |v: f64| if row_conc > 0.0 { v / row_conc } else { 0.0 };
    let gt_at_0 = cond(row[p_gt]);
    let lo = p_gt.saturating_sub(1);
    let hi = (p_gt + 1).min(cols - 1);
    let gt_at_1 = cond(row[lo..=hi].iter().sum());
    let rank = 1 + q
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != t && v >= q[t])
        .count();
    let entropy = if row_conc > 0.0 {
        -row
            .iter()
            .map(|&v| v / row_conc)
            .filter(|&c| c > 0.0)
            .map(|c| c * c.ln())
            .sum::<f64>()
    } else {
        0.0
    };
    let mut best = 0;
    for (j, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = j;
        }
    }
    let (br, bp) = (best / cols, best % cols);
    let off = bp.abs_diff(p_gt);
    Ok(GeometryMetrics {
        row_conc,
        gt_at_0,
        gt_at_1,
        mrr: 1.0 / rank as f64,
        entropy,
        acc_at_0: (br == r && off == 0) as u8 as f64,
        acc_at_1: (br == r && off <= 1) as u8 as f64,
    })
}

/// Averages [`query_metrics`] over queries that have a target.
pub fn geometry_metrics(dist: &PhaseSimilarity, targets: &[Option<usize>]) -> Result<GeometryMetrics> {
    if targets.len() != dist.cells() {
        return Err(BinoError::Geometry("one target slot per query expected".into()));
    }
    let mut items = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(p_gt) = *t {
            let (r, p) = (i / dist.cols, i % dist.cols);
            items.push(query_metrics(dist.query(r, p), dist.rows, dist.cols, r, p_gt)?);
        }
    }
    if items.is_empty() {
        return Err(BinoError::Data("no query has an on-grid target".into()));
    }
    Ok(GeometryMetrics::mean(&items))
}

/// Target column `round(p - d)` per cell from disparities in patch columns.
pub fn targets_from_disparity(gt_cols: &[f32], valid: &[bool], cols: usize) -> Vec<Option<usize>> {
    gt_cols
        .iter()
        .zip(valid)
        .enumerate()
        .map(|(i, (&d, &v))| {
            let t = ((i % cols) as f64 - d as f64).round();
            (v && t >= 0.0 && t < cols as f64).then_some(t as usize)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Counterfactual {
    None,
    ReplaceRight,
    RowShuffleRight,
    DuplicateLeft,
}

impl Counterfactual {
    pub fn name(&self) -> &'static str {
        match self {
            Counterfactual::None => "none",
            Counterfactual::ReplaceRight => "replace-right",
            Counterfactual::RowShuffleRight => "row-shuffle-right",
            Counterfactual::DuplicateLeft => "duplicate-left",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Counterfactual::None,
            Counterfactual::ReplaceRight,
            Counterfactual::RowShuffleRight,
            Counterfactual::DuplicateLeft,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| BinoError::Config(format!("unknown counterfactual '{s}'")))
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            Counterfactual::None => Provenance::Normal,
            Counterfactual::ReplaceRight => Provenance::ReplaceRight,
            Counterfactual::RowShuffleRight => Provenance::RowShuffleRight,
            Counterfactual::DuplicateLeft => Provenance::DuplicateLeft,
        }
    }
}

/// Permutes the `cell_w`-wide columns of each `cell_h`-tall band; `perms[r][k]`
/// is the source block for destination block `k` of band `r`.
pub fn shuffle_blocks(img: &Image, cell_h: usize, cell_w: usize, perms: &[Vec<usize>]) -> Image {
    let mut out = img.clone();
    for (r, perm) in perms.iter().enumerate() {
        for (k, &src) in perm.iter().enumerate() {
            for c in 0..Image::CHANNELS {
                for y in r * cell_h..(r + 1) * cell_h {
                    for x in 0..cell_w {
                        out.set(c, y, k * cell_w + x, img.get(c, y, src * cell_w + x));
                    }
                }
            }
        }
    }
    out
}

/// Applies an intervention to `pool[index]`. Ground truth follows the kept
/// target rule (zero disparity for duplicate-left).
pub fn counterfactual<R: Rng + ?Sized>(
    pool: &[ImagePair],
    index: usize,
    kind: Counterfactual,
    geo: &TokenGeometry,
    rng: &mut R,
) -> Result<ImagePair> {
    let base = pool
        .get(index)
        .ok_or_else(|| BinoError::Data(format!("sample {index} outside pool of {}", pool.len())))?;
    let mut out = base.clone();
    match kind {
        Counterfactual::None => {}
        Counterfactual::ReplaceRight => {
            if pool.len() < 2 {
                return Err(BinoError::Data("replace-right needs a donor pool of at least 2".into()));
            }
            let mut j = rng.random_range(0..pool.len() - 1);
            if j >= index {
                j += 1;
            }
            out.right = pool[j].right.clone();
        }
        Counterfactual::RowShuffleRight => {
            let perms: Vec<Vec<usize>> = (0..geo.rows())
                .map(|_| {
                    let mut p: Vec<usize> = (0..geo.patch_cols()).collect();
                    p.shuffle(rng);
                    p
                })
                .collect();
            out.right = shuffle_blocks(&base.right, geo.patch_h, geo.patch_col_px(), &perms);
        }
        Counterfactual::DuplicateLeft => {
            out.right = base.left.clone();
            let n = geo.rows() * geo.patch_cols();
            out.gt_disp = Some(vec![0.0; n]);
            out.valid = Some(vec![true; n]);
        }
    }
    Ok(out)
}

/// Named per-layer metrics, embedding state first, then the de-positioned readout.
pub type LayerMetrics = Vec<(String, GeometryMetrics)>;

fn layer_names(depth: usize) -> Vec<String> {
    let mut v: Vec<String> = (0..=depth).map(|i| format!("layer{i}_raw")).collect();
    v.push("final_depos".into());
    v
}

/// Metrics of every tapped layer of one forward state.
pub fn state_metrics(
    st: &EncoderState,
    pairs: &[(usize, usize)],
    targets: &[Option<usize>],
    temperature: f64,
) -> Result<Vec<GeometryMetrics>> {
    st.per_layer_tokens
        .iter()
        .chain(std::iter::once(&st.final_depos))
        .map(|layer| {
            let d = phase_distribution(layer, st.rows, st.cols, st.dim, pairs, temperature)?;
            geometry_metrics(&d, targets)
        })
        .collect()
}

/// Layerwise metrics averaged over `pairs` (native `(L, R)` forwards).
/// `gt_cols` supplies per-cell disparity in patch columns for each pair.
pub fn layerwise_sweep(
    enc: &Encoder,
    params: &ParamSet<f32>,
    samples: &[(ImagePair, Vec<f32>)],
    temperature: f64,
    provenance: Provenance,
) -> Result<LayerMetrics> {
    let geo = enc.geometry();
    let pp = phase_pairs(geo, enc.cfg.fusion)?;
    let names = layer_names(enc.cfg.depth);
    let mut per_layer: Vec<Vec<GeometryMetrics>> = vec![Vec::new(); names.len()];
    for (pair, gt_cols) in samples {
        geo.check_pair(pair)?;
        let valid = pair
            .valid
            .clone()
            .unwrap_or_else(|| vec![true; gt_cols.len()]);
        let targets = targets_from_disparity(gt_cols, &valid, geo.patch_cols());
        let fused = fuse(pair, enc.cfg.fusion, provenance)?;
        let st = enc.forward(params, &[fused])?.remove(0);
        for (slot, m) in per_layer.iter_mut().zip(state_metrics(&st, &pp, &targets, temperature)?) {
            slot.push(m);
        }
    }
    Ok(names
        .into_iter()
        .zip(per_layer.iter().map(|v| GeometryMetrics::mean(v)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(rows: usize, cols: usize) -> PhaseSimilarity {
        let n = rows * cols;
        PhaseSimilarity {
            rows,
            cols,
            probs: vec![1.0 / n as f64; n * n],
            temperature: 1.0,
        }
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let (rows, fc, dim) = (3, 8, 4);
        let tokens = vec![0.5f32; rows * fc * dim];
        let pairs: Vec<_> = (0..4).map(|p| (2 * p, 2 * p + 1)).collect();
        let d = phase_distribution(&tokens, rows, fc, dim, &pairs, 0.07).unwrap();
        for q in d.probs.chunks(12) {
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-12));
        }
        let m = geometry_metrics(&d, &vec![Some(1); 12]).unwrap();
        assert!((m.row_conc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rows, fc, dim) = (2, 6, 5);
        let tokens: Vec<f32> = (0..rows * fc * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pairs: Vec<_> = (0..3).map(|p| (2 * p, 2 * p + 1)).collect();
        let d = phase_distribution(&tokens, rows, fc, dim, &pairs, 1e-3).unwrap();
        for q in d.probs.chunks(6) {
            assert!(q.iter().cloned().fold(0.0, f64::max) > 0.999);
        }
    }

    #[test]
    fn chance_levels_on_full_grid() {
        let d = uniform(12, 40);
        let m = query_metrics(d.query(5, 20), 12, 40, 5, 20).unwrap();
        assert!((m.row_conc - 1.0 / 12.0).abs() < 1e-9);
        assert!((m.gt_at_1 - 3.0 / 40.0).abs() < 1e-9);
        let edge = query_metrics(d.query(5, 0), 12, 40, 5, 0).unwrap();
        assert!((edge.gt_at_1 - 2.0 / 40.0).abs() < 1e-9);
        assert!((m.entropy - 40f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn one_hot_at_target() {
        let mut q = vec![0.0; 12];
        q[4 + 2] = 1.0;
        let m = query_metrics(&q, 3, 4, 1, 2).unwrap();
        assert_eq!(
            m,
            GeometryMetrics {
                row_conc: 1.0,
                gt_at_0: 1.0,
                gt_at_1: 1.0,
                mrr: 1.0,
                entropy: 0.0,
                acc_at_0: 1.0,
                acc_at_1: 1.0
            }
        );
    }

    #[test]
    fn counterfactual_kinds() {
        let geo = TokenGeometry::new(8, 16, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool: Vec<ImagePair> = (0..3)
            .map(|_| {
                let a = crate::synthbench::procedural_texture(&mut rng, 8, 16);
                let b = crate::synthbench::procedural_texture(&mut rng, 8, 16);
                ImagePair::new(a, b).unwrap()
            })
            .collect();
        let d = counterfactual(&pool, 1, Counterfactual::DuplicateLeft, &geo, &mut rng).unwrap();
        assert_eq!(d.left, d.right);
        assert!(d.gt_disp.unwrap().iter().all(|&g| g == 0.0));
        let r = counterfactual(&pool, 1, Counterfactual::ReplaceRight, &geo, &mut rng).unwrap();
        assert!(r.right == pool[0].right || r.right == pool[2].right);
        assert!(counterfactual(&pool[..1], 0, Counterfactual::ReplaceRight, &geo, &mut rng).is_err());
        let ident: Vec<Vec<usize>> = vec![(0..4).collect(); 2];
        assert_eq!(shuffle_blocks(&pool[0].right, 4, 4, &ident), pool[0].right);
    }

    proptest::proptest! {
        #[test]
        fn query_metric_ranges(rows in 1usize..5, cols in 1usize..9, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let q: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            let (r, p) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let m = query_metrics(&q, rows, cols, r, p).unwrap();
            proptest::prop_assert!(m.row_conc > 0.0 && m.row_conc <= 1.0 + 1e-12);
            proptest::prop_assert!(m.gt_at_0 <= m.gt_at_1 + 1e-12 && m.gt_at_1 <= 1.0 + 1e-12);
            proptest::prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
            proptest::prop_assert!(m.entropy >= -1e-12 && m.entropy <= (cols as f64).ln() + 1e-9);
            proptest::prop_assert!(m.acc_at_0 <= m.acc_at_1);
        }
    }
}
