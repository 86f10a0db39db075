//! Frozen stereo probe: exported descriptors, cosine cost volume, WTA,
//! four-direction SGM, soft refinement and left-right consistency.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::fusion::{fuse, phase_pairs, ImagePair, Provenance};
use crate::harness::config::{parse_value, KvEcho};
use crate::imageio::Image;
use crate::tensor::{dot, norm, ParamSet};
use crate::{BinoError, Result};

/// `[rows × cols × dim]` descriptors on the patch-column grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub normalized: bool,
}

impl DescriptorMap {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(BinoError::Geometry(format!(
                "descriptor data {} != {rows}x{cols}x{dim}",
                data.len()
            )));
        }
        Ok(DescriptorMap {
            rows,
            cols,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn at(&self, r: usize, p: usize) -> &[f32] {
        let i = (r * self.cols + p) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn normalize(&mut self) {
        for v in self.data.chunks_exact_mut(self.dim) {
            let n = norm(v);
            if n > 0.0 {
                for x in v.iter_mut() {
                    *x = (*x as f64 / n) as f32;
                }
            }
        }
        self.normalized = true;
    }

    /// Mean over all cells.
    pub fn mean_pool(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for v in self.data.chunks_exact(self.dim) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += *x as f64;
            }
        }
        let n = (self.rows * self.cols) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }
}

/// Phase-averages a fused token grid `[rows × fused_cols × dim]`.
pub fn phase_average(
    tokens: &[f32],
    rows: usize,
    fused_cols: usize,
    dim: usize,
    pairs: &[(usize, usize)],
) -> DescriptorMap {
    let cols = pairs.len();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for &(a, b) in pairs {
            let ia = (r * fused_cols + a) * dim;
            let ib = (r * fused_cols + b) * dim;
            data.extend((0..dim).map(|j| 0.5 * (tokens[ia + j] + tokens[ib + j])));
        }
    }
    DescriptorMap {
        rows,
        cols,
        dim,
        data,
        normalized: false,
    }
}

/// Descriptor of a single image from a duplicated `(I, I)` forward.
pub fn export_descriptors(
    enc: &Encoder,
    params: &ParamSet<f32>,
    images: &[&Image],
    normalize: bool,
) -> Result<Vec<DescriptorMap>> {
    let geo = enc.geometry();
    let pairs = phase_pairs(geo, enc.cfg.fusion)?;
    let fused = images
        .iter()
        .map(|img| {
            let p = ImagePair::duplicated(img);
            geo.check_pair(&p)?;
            fuse(&p, enc.cfg.fusion, Provenance::Duplicated)
        })
        .collect::<Result<Vec<_>>>()?;
    let states = enc.forward(params, &fused)?;
    Ok(states
        .iter()
        .map(|st| {
            let mut d = phase_average(&st.final_depos, st.rows, st.cols, st.dim, &pairs);
            if normalize {
                d.normalize();
            }
            d
        })
        .collect())
}

/// Matching direction of a cost volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchSide {
    /// Left `(r, p)` against right `(r, p - δ)`.
    Left,
    /// Right `(r, p)` against left `(r, p + δ)`.
    Right,
}

/// `[rows × cols × dmax]` costs; `+∞` where the candidate leaves the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub rows: usize,
    pub cols: usize,
    pub dmax: usize,
    pub cost: Vec<f64>,
}

impl CostVolume {
    pub fn new(rows: usize, cols: usize, dmax: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != rows * cols * dmax || dmax == 0 {
            return Err(BinoError::Geometry(format!(
                "cost volume data {} != {rows}x{cols}x{dmax}",
                cost.len()
            )));
        }
        Ok(CostVolume {
            rows,
            cols,
            dmax,
            cost,
        })
    }

    pub fn at(&self, r: usize, p: usize) -> &[f64] {
        let i = (r * self.cols + p) * self.dmax;
        &self.cost[i..i + self.dmax]
    }
}

/// `cost(r, p, δ) = 1 - <a[r,p], b[r,p∓δ]>`.
pub fn build_cost_volume(
    a: &DescriptorMap,
    b: &DescriptorMap,
    dmax: usize,
    side: MatchSide,
) -> Result<CostVolume> {
    if (a.rows, a.cols, a.dim) != (b.rows, b.cols, b.dim) {
        return Err(BinoError::Geometry("descriptor maps differ in shape".into()));
    }
    if dmax == 0 || dmax > a.cols {
        return Err(BinoError::Config(format!(
            "dmax {dmax} must lie in [1, {}]",
            a.cols
        )));
    }
    let mut cost = Vec::with_capacity(a.rows * a.cols * dmax);
    for r in 0..a.rows {
        for p in 0..a.cols {
            let da = a.at(r, p);
            for d in 0..dmax {
                let q = match side {
                    MatchSide::Left => p.checked_sub(d),
                    MatchSide::Right => Some(p + d).filter(|&q| q < a.cols),
                };
                cost.push(match q {
                    Some(q) => 1.0 - dot(da, b.at(r, q)),
                    None => f64::INFINITY,
                });
            }
        }
    }
    CostVolume::new(a.rows, a.cols, dmax, cost)
}

/// First index of the minimum; ties go to the smaller index.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Per-cell argmin over δ.
pub fn wta(vol: &CostVolume) -> Vec<usize> {
    vol.cost.chunks_exact(vol.dmax).map(argmin).collect()
}

/// One scanline step of the SGM recursion.
fn sgm_step(c: &[f64], prev: &[f64], out: &mut [f64], p1: f64, p2: f64) {
    let m = prev.iter().cloned().fold(f64::INFINITY, f64::min);
    let n = c.len();
    for d in 0..n {
        let mut best = prev[d];
        if d > 0 {
            best = best.min(prev[d - 1] + p1);
        }
        if d + 1 < n {
            best = best.min(prev[d + 1] + p1);
        }
        best = best.min(m + p2);
        out[d] = c[d] + (best - m);
    }
}

/// Path costs along one direction `(dr, dc)` ∈ {(0,1),(0,-1),(1,0),(-1,0)}.
fn sgm_direction(vol: &CostVolume, dr: isize, dc: isize, p1: f64, p2: f64) -> Vec<f64> {
    let (rows, cols, n) = (vol.rows, vol.cols, vol.dmax);
    let mut out = vec![0.0; vol.cost.len()];
    let mut prev = vec![0.0; n];
    let order = |len: usize, step: isize| -> Vec<usize> {
        if step >= 0 {
            (0..len).collect()
        } else {
            (0..len).rev().collect()
        }
    };
    let rs = order(rows, dr);
    let cs = order(cols, dc);
    for &r in &rs {
        for &p in &cs {
            let i = (r * cols + p) * n;
            let pr = r as isize - dr;
            let pc = p as isize - dc;
            let has_prev = (dr != 0 || dc != 0)
                && pr >= 0
                && pc >= 0
                && (pr as usize) < rows
                && (pc as usize) < cols;
            if !has_prev {
                out[i..i + n].copy_from_slice(&vol.cost[i..i + n]);
                continue;
            }
            let j = (pr as usize * cols + pc as usize) * n;
            prev.copy_from_slice(&out[j..j + n]);
            sgm_step(&vol.cost[i..i + n], &prev, &mut out[i..i + n], p1, p2);
        }
    }
    out
}

pub const SGM_DIRECTIONS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

/// Sum of four directional path costs and its per-cell argmin.
pub fn sgm(vol: &CostVolume, p1: f64, p2: f64) -> Result<(CostVolume, Vec<usize>)> {
    if !(p1 >= 0.0 && p2 >= p1) {
        return Err(BinoError::Config(format!(
            "SGM penalties need P2 >= P1 >= 0, got P1={p1}, P2={p2}"
        )));
    }
    let mut agg = vec![0.0; vol.cost.len()];
    for (dr, dc) in SGM_DIRECTIONS {
        for (a, l) in agg.iter_mut().zip(sgm_direction(vol, dr, dc, p1, p2)) {
            *a += l;
        }
    }
    let agg = CostVolume::new(vol.rows, vol.cols, vol.dmax, agg)?;
    let disp = wta(&agg);
    Ok((agg, disp))
}

/// Soft-argmin of `-cost / temperature` within `±w` of each discrete optimum,
/// clamped to half a cell around it.
pub fn soft_refine(vol: &CostVolume, disp: &[usize], w: usize, temperature: f64) -> Result<Vec<f64>> {
    if w == 0 || w >= vol.dmax {
        return Err(BinoError::Config(format!(
            "refine window {w} invalid for {} disparities",
            vol.dmax
        )));
    }
    if temperature <= 0.0 {
        return Err(BinoError::Config("refine temperature must be positive".into()));
    }
    Ok(disp
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let c = &vol.cost[i * vol.dmax..(i + 1) * vol.dmax];
            let lo = d.saturating_sub(w);
            let hi = (d + w).min(vol.dmax - 1);
            let cmin = c[d];
            let (mut z, mut e) = (0.0, 0.0);
            for (k, &ck) in c.iter().enumerate().take(hi + 1).skip(lo) {
                if !ck.is_finite() {
                    continue;
                }
                let wgt = (-(ck - cmin) / temperature).exp();
                z += wgt;
                e += wgt * k as f64;
            }
            let r = if z > 0.0 { e / z } else { d as f64 };
            r.clamp(d as f64 - 0.5, d as f64 + 0.5)
        })
        .collect())
}

/// Cellwise `|dL(r,p) - dR(r, p - round dL)| <= tol`; returns the mask and the kept percentage.
pub fn lr_check(disp_l: &[f64], disp_r: &[f64], rows: usize, cols: usize, tol: f64) -> (Vec<bool>, f64) {
    let valid: Vec<bool> = (0..rows * cols)
        .map(|i| {
            let (r, p) = (i / cols, i % cols);
            let dl = disp_l[i];
            let q = p as f64 - dl.round();
            if q < 0.0 || q >= cols as f64 {
                return false;
            }
            (dl - disp_r[r * cols + q as usize]).abs() <= tol
        })
        .collect();
    let keep = if valid.is_empty() {
        0.0
    } else {
        100.0 * valid.iter().filter(|&&v| v).count() as f64 / valid.len() as f64
    };
    (valid, keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityMetrics {
    pub epe_px: f64,
    pub bad1tok: f64,
    pub d1: f64,
    pub count: usize,
}

/// Errors in pixels (via `token_px`), Bad@1tok and D1 in percent.
pub fn disparity_metrics(pred: &[f64], gt: &[f64], valid: &[bool], token_px: f64) -> Result<DisparityMetrics> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(BinoError::Geometry("prediction, ground truth and mask differ in length".into()));
    }
    let (mut epe, mut bad, mut d1, mut n) = (0.0, 0usize, 0usize, 0usize);
    for ((&p, &g), _) in pred.iter().zip(gt).zip(valid).filter(|(_, &v)| v) {
        let e_tok = (p - g).abs();
        let e_px = e_tok * token_px;
        epe += e_px;
        bad += (e_tok > 1.0) as usize;
        d1 += (e_px > f64::max(3.0, 0.05 * g * token_px)) as usize;
        n += 1;
    }
    if n == 0 {
        return Err(BinoError::Data("no valid cells for disparity metrics".into()));
    }
    Ok(DisparityMetrics {
        epe_px: epe / n as f64,
        bad1tok: 100.0 * bad as f64 / n as f64,
        d1: 100.0 * d1 as f64 / n as f64,
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeParams {
    pub dmax: usize,
    pub p1: f64,
    pub p2: f64,
    pub window: usize,
    pub temperature: f64,
    pub lr_tol: f64,
    /// Negatives drawn per query for Hard@k.
    pub hard_negatives: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            dmax: 24,
            p1: 0.1,
            p2: 0.8,
            window: 2,
            temperature: 1.0,
            lr_tol: 1.0,
            hard_negatives: 15,
        }
    }
}

impl ProbeParams {
    pub fn validate(&self) -> Result<()> {
        if self.dmax == 0 || self.window == 0 || self.window >= self.dmax {
            return Err(BinoError::Config(format!(
                "probe needs 1 <= window < dmax (window {}, dmax {})",
                self.window, self.dmax
            )));
        }
        if !(self.p1 >= 0.0 && self.p2 >= self.p1 && self.temperature > 0.0 && self.lr_tol >= 0.0) {
            return Err(BinoError::Config("probe needs 0 <= p1 <= p2, temperature > 0, lr_tol >= 0".into()));
        }
        if self.hard_negatives == 0 {
            return Err(BinoError::Config("hard_negatives must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dmax" => self.dmax = parse_value(key, value)?,
            "p1" => self.p1 = parse_value(key, value)?,
            "p2" => self.p2 = parse_value(key, value)?,
            "window" => self.window = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "lr_tol" => self.lr_tol = parse_value(key, value)?,
            "hard_negatives" => self.hard_negatives = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KvEcho for ProbeParams {
    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("dmax".into(), self.dmax.to_string()),
            ("p1".into(), self.p1.to_string()),
            ("p2".into(), self.p2.to_string()),
            ("window".into(), self.window.to_string()),
            ("temperature".into(), self.temperature.to_string()),
            ("lr_tol".into(), self.lr_tol.to_string()),
            ("hard_negatives".into(), self.hard_negatives.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityResult {
    pub rows: usize,
    pub cols: usize,
    pub wta: Vec<usize>,
    pub sgm: Vec<usize>,
    pub refined: Vec<f64>,
    pub lr_valid: Vec<bool>,
    pub lr_keep: f64,
}

/// Full left-view pipeline on a pair of normalized descriptor maps.
pub fn match_pair(dl: &DescriptorMap, dr: &DescriptorMap, pp: &ProbeParams) -> Result<DisparityResult> {
    let vol_l = build_cost_volume(dl, dr, pp.dmax, MatchSide::Left)?;
    let vol_r = build_cost_volume(dr, dl, pp.dmax, MatchSide::Right)?;
    let w = wta(&vol_l);
    let (agg_l, sgm_l) = sgm(&vol_l, pp.p1, pp.p2)?;
    let (agg_r, sgm_r) = sgm(&vol_r, pp.p1, pp.p2)?;
    let refined = soft_refine(&agg_l, &sgm_l, pp.window, pp.temperature)?;
    let refined_r = soft_refine(&agg_r, &sgm_r, pp.window, pp.temperature)?;
    let (lr_valid, lr_keep) = lr_check(&refined, &refined_r, dl.rows, dl.cols, pp.lr_tol);
    Ok(DisparityResult {
        rows: dl.rows,
        cols: dl.cols,
        wta: w,
        sgm: sgm_l,
        refined,
        lr_valid,
        lr_keep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top5: f64,
    pub hard1: f64,
    pub hard5: f64,
    pub margin: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d = norm(a) * norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Random negative subsets (indices `!= i`) of size `m` per query.
pub fn sample_hard_subsets<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            index::sample(rng, n - 1, m.min(n - 1))
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect()
}

/// Rank (1-based) of the positive among candidates; equal scores rank by
/// candidate index.
fn rank_of(pos: usize, cands: &[usize], sim: impl Fn(usize) -> f64) -> usize {
    let sp = sim(pos);
    1 + cands
        .iter()
        .filter(|&&j| j != pos)
        .filter(|&&j| {
            let s = sim(j);
            s > sp || (s == sp && j < pos)
        })
        .count()
}

/// Pooled left/right retrieval with positives on the diagonal.
pub fn retrieval_eval(left: &[Vec<f32>], right: &[Vec<f32>], subsets: &[Vec<usize>]) -> Result<RetrievalReport> {
    let n = left.len();
    if n < 2 || right.len() != n || subsets.len() != n {
        return Err(BinoError::Data(format!(
            "retrieval needs n >= 2 aligned pairs and subsets, got {n}"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let (mut t1, mut t5, mut h1, mut h5, mut margin) = (0, 0, 0, 0, 0.0);
    for i in 0..n {
        let sim = |j: usize| cosine(&left[i], &right[j]);
        let r = rank_of(i, &all, sim);
        t1 += (r <= 1) as usize;
        t5 += (r <= 5) as usize;
        let hard = &subsets[i];
        if hard.is_empty() || hard.contains(&i) {
            return Err(BinoError::Data(format!("bad negative subset for query {i}")));
        }
        let mut cands = hard.clone();
        cands.push(i);
        let rh = rank_of(i, &cands, sim);
        h1 += (rh <= 1) as usize;
        h5 += (rh <= 5) as usize;
        let neg = hard.iter().map(|&j| sim(j)).fold(f64::NEG_INFINITY, f64::max);
        margin += sim(i) - neg;
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(RetrievalReport {
        top1: pct(t1),
        top5: pct(t5),
        hard1: pct(h1),
        hard5: pct(h5),
        margin: margin / n as f64,
    })
}

/// `[T_even, T_odd, |T_even - T_odd|, T_even ⊙ T_odd]` for the pair covering patch column `p`.
pub fn pair_collapse_feature(
    tokens: &[f32],
    fused_cols: usize,
    dim: usize,
    r: usize,
    pair: (usize, usize),
) -> Vec<f32> {
    let a = &tokens[(r * fused_cols + pair.0) * dim..][..dim];
    let b = &tokens[(r * fused_cols + pair.1) * dim..][..dim];
    let mut u = Vec::with_capacity(4 * dim);
    u.extend_from_slice(a);
    u.extend_from_slice(b);
    u.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
    u.extend(a.iter().zip(b).map(|(x, y)| x * y));
    u
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::fusion::TokenGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize) -> DescriptorMap {
        let data = (0..rows * cols * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = DescriptorMap::new(rows, cols, dim, data).unwrap();
        m.normalize();
        m
    }

    #[test]
    fn self_match_is_zero_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_map(&mut rng, 3, 6, 5);
        let v = build_cost_volume(&d, &d, 4, MatchSide::Left).unwrap();
        for r in 0..3 {
            for p in 0..6 {
                assert!(v.at(r, p)[0].abs() < 1e-6);
            }
        }
        assert!(v.at(0, 1)[2].is_infinite());
        assert!(build_cost_volume(&d, &d, 7, MatchSide::Left).is_err());
    }

    #[test]
    fn wta_ties_and_sgm_without_penalties() {
        let v = CostVolume::new(1, 2, 3, vec![0.5; 6]).unwrap();
        assert_eq!(wta(&v), [0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cost: Vec<f64> = (0..4 * 5 * 3).map(|_| rng.random()).collect();
        let v = CostVolume::new(4, 5, 3, cost).unwrap();
        assert_eq!(sgm(&v, 0.0, 0.0).unwrap().1, wta(&v));
        assert!(sgm(&v, 0.5, 0.1).is_err());
    }

    #[test]
    fn sgm_hand_case_1x3x2() {
        // costs per column: (0,1), (1,0), (0,1); P1 = 0.5, P2 = 2
        let v = CostVolume::new(1, 3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let (agg, d) = sgm(&v, 0.5, 2.0).unwrap();
        // left-to-right paths: (0,1) (1,.5) (.5,1); right-to-left: (.5,1) (1,.5) (0,1);
        // both vertical paths repeat the raw costs on a single row
        let want = [0.5, 4.0, 4.0, 1.0, 0.5, 4.0];
        for (a, b) in agg.cost.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", agg.cost);
        }
        assert_eq!(d, [0, 1, 0]);
    }

    #[test]
    fn soft_refine_cases() {
        let v = CostVolume::new(1, 1, 6, vec![9.0, 9.0, 1.0, 0.0, 1.0, 9.0]).unwrap();
        let r = soft_refine(&v, &[3], 1, 1.0).unwrap();
        assert!((r[0] - 3.0).abs() < 1e-12);
        let v = CostVolume::new(1, 1, 4, vec![0.0, 0.1, 0.2, 5.0]).unwrap();
        let r = soft_refine(&v, &[0], 2, 1.0).unwrap();
        assert!((0.0..=2.0).contains(&r[0]));
    }

    #[test]
    fn lr_check_cases() {
        let z = vec![0.0; 6];
        assert_eq!(lr_check(&z, &z, 2, 3, 1.0).1, 100.0);
        let s = vec![2.5; 6];
        assert_eq!(lr_check(&z, &s, 2, 3, 1.0).1, 0.0);
    }

    #[test]
    fn disparity_metric_closed_form() {
        let gt = vec![3.0; 4];
        let pred = vec![4.5; 4];
        let m = disparity_metrics(&pred, &gt, &[true; 4], 2.0).unwrap();
        assert!((m.epe_px - 3.0).abs() < 1e-12);
        assert_eq!((m.bad1tok, m.d1), (100.0, 0.0));
        let pred = vec![5.0; 4];
        let m = disparity_metrics(&pred, &gt, &[true; 4], 2.0).unwrap();
        assert_eq!((m.bad1tok, m.d1), (100.0, 100.0));
    }

    #[test]
    fn retrieval_orthogonal_and_identical() {
        let n = 4;
        let e = |i: usize| (0..n).map(|j| (i == j) as u8 as f32).collect::<Vec<_>>();
        let left: Vec<_> = (0..n).map(e).collect();
        let subsets: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        let r = retrieval_eval(&left, &left, &subsets).unwrap();
        assert_eq!((r.top1, r.hard1), (100.0, 100.0));
        assert!(r.margin > 0.0);
        let same = vec![vec![1.0f32, 2.0]; n];
        let r = retrieval_eval(&same, &same, &subsets).unwrap();
        assert_eq!(r.margin, 0.0);
        assert_eq!(r.top1, 100.0 / n as f64);
    }

    #[test]
    fn pair_collapse_examples() {
        let v = [1.0f32, -2.0];
        let t: Vec<f32> = v.iter().chain(&v).copied().collect();
        let u = pair_collapse_feature(&t, 2, 2, 0, (0, 1));
        assert_eq!(u, [1.0, -2.0, 1.0, -2.0, 0.0, 0.0, 1.0, 4.0]);
        assert!(pair_collapse_feature(&[0.0; 4], 2, 2, 0, (0, 1)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn export_shape_and_determinism() {
        let cfg = EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            geometry: TokenGeometry::new(48, 160, 4, 4).unwrap(),
            ..Default::default()
        };
        let enc = Encoder::new(cfg).unwrap();
        let p = enc.init_params(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = crate::synthbench::procedural_texture(&mut rng, 48, 160);
        let a = export_descriptors(&enc, &p, &[&img], true).unwrap();
        let b = export_descriptors(&enc, &p, &[&img], true).unwrap();
        assert_eq!((a[0].rows, a[0].cols, a[0].dim), (12, 40, 8));
        assert_eq!(a, b);
        for v in a[0].data.chunks(8) {
            assert!((norm(v) - 1.0).abs() < 1e-5);
        }
    }

    proptest::proptest! {
        #[test]
        fn sgm_without_penalties_is_wta(rows in 1usize..5, cols in 1usize..7, dmax in 1usize..5, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = (0..rows * cols * dmax).map(|_| rng.random_range(0.0..2.0)).collect();
            let vol = CostVolume::new(rows, cols, dmax, cost).unwrap();
            let (_, d) = sgm(&vol, 0.0, 0.0).unwrap();
            proptest::prop_assert_eq!(d, wta(&vol));
        }

        #[test]
        fn sgm_aggregate_bounds(rows in 1usize..5, cols in 1usize..7, dmax in 1usize..5, p1 in 0.0f64..1.0, extra in 0.0f64..2.0, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..rows * cols * dmax).map(|_| rng.random_range(0.0..2.0)).collect();
            let vol = CostVolume::new(rows, cols, dmax, cost.clone()).unwrap();
            let (agg, _) = sgm(&vol, p1, p1 + extra).unwrap();
            // each path cost lies in [C, C + P2]
            for (a, c) in agg.cost.iter().zip(&cost) {
                proptest::prop_assert!(*a >= 4.0 * c - 1e-9);
                proptest::prop_assert!(*a <= 4.0 * (c + p1 + extra) + 1e-9);
            }
        }

        #[test]
        fn metric_ranges(n in 1usize..40, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-3.0..3.0)).collect();
            let valid = vec![true; n];
            let m = disparity_metrics(&pred, &gt, &valid, 4.0).unwrap();
            proptest::prop_assert!((0.0..=100.0).contains(&m.bad1tok) && (0.0..=100.0).contains(&m.d1));
            proptest::prop_assert!(m.epe_px >= 0.0);
            let dl: Vec<f64> = pred.iter().map(|v| v.abs()).collect();
            let (mask, keep) = lr_check(&dl, &dl, 1, n, 1.0);
            proptest::prop_assert!((0.0..=100.0).contains(&keep));
            proptest::prop_assert_eq!(mask.len(), n);
        }
    }
}
