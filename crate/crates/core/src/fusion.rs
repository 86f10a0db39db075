//! Binocular input fusion, the micro-cell token lattice and one-view masks.
//!
//! With interleave fusion, fused column `2u` holds left column `u` and
//! `2u + 1` holds right column `u`. A fused patch of width `p_w` therefore
//! covers `p_w / 2` columns of each view; two horizontally adjacent fused
//! tokens `c = 2p + q` (`q ∈ {0, 1}`) form one patch column `p` that spans
//! `p_w` pixels per view.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imageio::Image;
use crate::{BinoError, Result};

/// Rectified left/right pair with optional ground truth on the patch-column grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub left: Image,
    pub right: Image,
    /// Disparity in per-view pixels, `[rows × patch_cols]`.
    pub gt_disp: Option<Vec<f32>>,
    pub valid: Option<Vec<bool>>,
}

impl ImagePair {
    pub fn new(left: Image, right: Image) -> Result<Self> {
        if !left.same_shape(&right) {
            return Err(BinoError::Geometry(format!(
                "left {}x{} vs right {}x{}",
                left.height(),
                left.width(),
                right.height(),
                right.width()
            )));
        }
        Ok(ImagePair {
            left,
            right,
            gt_disp: None,
            valid: None,
        })
    }

    /// `(I, I)` for single-image use.
    pub fn duplicated(img: &Image) -> Self {
        ImagePair {
            left: img.clone(),
            right: img.clone(),
            gt_disp: None,
            valid: None,
        }
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Normal,
    Duplicated,
    ReplaceRight,
    RowShuffleRight,
    DuplicateLeft,
}

/// How the two views are laid out side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Alternating blocks of `stride` columns per view; stride 1 is pixel interleaving.
    /// Strides above 1 are experimental.
    Interleave { stride: usize },
    /// Left in `[0, W)`, right in `[W, 2W)`.
    Concat,
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::Interleave { stride: 1 }
    }
}

impl FusionMode {
    pub fn name(&self) -> String {
        match self {
            FusionMode::Interleave { stride } => format!("interleave-{stride}"),
            FusionMode::Concat => "concat".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "concat" {
            return Ok(FusionMode::Concat);
        }
        if s == "interleave" {
            return Ok(FusionMode::default());
        }
        if let Some(k) = s.strip_prefix("interleave-") {
            if let Ok(stride @ (1 | 2 | 4)) = k.parse::<usize>() {
                return Ok(FusionMode::Interleave { stride });
            }
        }
        Err(BinoError::Config(format!(
            "unknown fusion mode '{s}' (concat, interleave-1, interleave-2, interleave-4)"
        )))
    }

    /// Fused column receiving view column `u` of the given view.
    pub fn fused_col(&self, view: View, u: usize, width: usize) -> usize {
        let q = match view {
            View::Left => 0,
            View::Right => 1,
        };
        match *self {
            FusionMode::Interleave { stride } => {
                let (block, j) = (u / stride, u % stride);
                2 * stride * block + q * stride + j
            }
            FusionMode::Concat => q * width + u,
        }
    }
}

/// Fused `3 × H × 2W` input.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    pub image: Image,
    pub mode: FusionMode,
    pub provenance: Provenance,
}

impl FusedImage {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Right,
}

/// Places both views into one fused image according to `mode`.
pub fn fuse(pair: &ImagePair, mode: FusionMode, provenance: Provenance) -> Result<FusedImage> {
    if !pair.left.same_shape(&pair.right) {
        return Err(BinoError::Geometry("left and right shapes differ".into()));
    }
    let (h, w) = (pair.height(), pair.width());
    if let FusionMode::Interleave { stride } = mode {
        if stride == 0 || w % stride != 0 {
            return Err(BinoError::Geometry(format!(
                "width {w} not divisible by interleave stride {stride}"
            )));
        }
    }
    let mut out = Image::zeros(h, 2 * w);
    for (view, img) in [(View::Left, &pair.left), (View::Right, &pair.right)] {
        for u in 0..w {
            let fc = mode.fused_col(view, u, w);
            for c in 0..Image::CHANNELS {
                for y in 0..h {
                    out.set(c, y, fc, img.get(c, y, u));
                }
            }
        }
    }
    Ok(FusedImage {
        image: out,
        mode,
        provenance,
    })
}

/// Pixel interleaving: `X[.., 2u] = L[.., u]`, `X[.., 2u+1] = R[.., u]`.
pub fn interleave(pair: &ImagePair) -> Result<FusedImage> {
    fuse(pair, FusionMode::Interleave { stride: 1 }, Provenance::Normal)
}

/// Side-by-side layout used as the fusion ablation baseline.
pub fn concat_fuse(pair: &ImagePair) -> Result<FusedImage> {
    fuse(pair, FusionMode::Concat, Provenance::Normal)
}

/// Inverse of [`fuse`] for the fused image's own mode.
pub fn defuse(fused: &FusedImage) -> Result<ImagePair> {
    let (h, fw) = (fused.height(), fused.width());
    if fw % 2 != 0 {
        return Err(BinoError::Geometry(format!("fused width {fw} is odd")));
    }
    let w = fw / 2;
    if let FusionMode::Interleave { stride } = fused.mode {
        if w % stride != 0 {
            return Err(BinoError::Geometry(format!(
                "view width {w} not divisible by stride {stride}"
            )));
        }
    }
    let mut left = Image::zeros(h, w);
    let mut right = Image::zeros(h, w);
    for (view, img) in [(View::Left, &mut left), (View::Right, &mut right)] {
        for u in 0..w {
            let fc = fused.mode.fused_col(view, u, w);
            for c in 0..Image::CHANNELS {
                for y in 0..h {
                    img.set(c, y, u, fused.image.get(c, y, fc));
                }
            }
        }
    }
    ImagePair::new(left, right)
}

/// Splits a pixel-interleaved fused image back into its two views.
pub fn deinterleave(fused: &FusedImage) -> Result<ImagePair> {
    if fused.mode != (FusionMode::Interleave { stride: 1 }) {
        return Err(BinoError::Geometry(format!(
            "deinterleave expects stride-1 interleave, got {}",
            fused.mode.name()
        )));
    }
    defuse(fused)
}

/// Fused token column `c = 2p + q` as `(p, q)`.
pub fn phase_decompose(c: usize) -> (usize, usize) {
    (c / 2, c % 2)
}

/// Micro-cell lattice over a fused image of per-view size `height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    /// Patch width on the fused image (even).
    pub patch_w: usize,
}

impl TokenGeometry {
    pub fn new(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        let g = TokenGeometry {
            height,
            width,
            patch_h,
            patch_w,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let TokenGeometry {
            height: h,
            width: w,
            patch_h: ph,
            patch_w: pw,
        } = *self;
        if ph == 0 || pw == 0 || pw % 2 != 0 {
            return Err(BinoError::Geometry(format!(
                "patch {ph}x{pw}: width must be even and positive"
            )));
        }
        if h == 0 || h % ph != 0 {
            return Err(BinoError::Geometry(format!("height {h} not divisible by {ph}")));
        }
        // Fused token columns (2W/p_w) must pair up into patch columns.
        if w == 0 || w % pw != 0 {
            return Err(BinoError::Geometry(format!(
                "width {w} not divisible by fused patch width {pw}"
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch_h
    }

    /// Fused token columns, `2W / p_w`.
    pub fn fused_cols(&self) -> usize {
        2 * self.width / self.patch_w
    }

    /// Patch columns (phase pairs), `W / p_w`.
    pub fn patch_cols(&self) -> usize {
        self.width / self.patch_w
    }

    pub fn tokens(&self) -> usize {
        self.rows() * self.fused_cols()
    }

    /// Per-view pixels covered by one fused token.
    pub fn view_token_px(&self) -> usize {
        self.patch_w / 2
    }

    /// Per-view pixels covered by one patch column (descriptor cell).
    pub fn patch_col_px(&self) -> usize {
        self.patch_w
    }

    pub fn patch_dim(&self) -> usize {
        Image::CHANNELS * self.patch_h * self.patch_w
    }

    pub fn check_fused(&self, fused: &FusedImage) -> Result<()> {
        if fused.height() != self.height || fused.width() != 2 * self.width {
            return Err(BinoError::Geometry(format!(
                "fused image {}x{} does not match geometry {}x{}",
                fused.height(),
                fused.width(),
                self.height,
                2 * self.width
            )));
        }
        Ok(())
    }

    pub fn check_pair(&self, pair: &ImagePair) -> Result<()> {
        if pair.height() != self.height || pair.width() != self.width {
            return Err(BinoError::Geometry(format!(
                "pair {}x{} does not match geometry {}x{}",
                pair.height(),
                pair.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// The two fused token columns covering patch column `p` of a duplicated
/// input, as `(first, second)` in fused order. For pixel interleaving this is
/// `(2p, 2p + 1)`.
pub fn phase_pairs(geom: &TokenGeometry, mode: FusionMode) -> Result<Vec<(usize, usize)>> {
    let tok_w = geom.patch_w;
    let (w, pc) = (geom.width, geom.patch_col_px());
    (0..geom.patch_cols())
        .map(|p| {
            let mut cols: Vec<usize> = (p * pc..(p + 1) * pc)
                .flat_map(|u| [View::Left, View::Right].map(|v| mode.fused_col(v, u, w) / tok_w))
                .collect();
            cols.sort_unstable();
            cols.dedup();
            match cols[..] {
                [a, b] => Ok((a, b)),
                _ => Err(BinoError::Geometry(format!(
                    "{} with fused patch width {tok_w} does not pair tokens per patch column",
                    mode.name()
                ))),
            }
        })
        .collect()
}

/// Flattens every micro cell into a row: `[tokens × 3·p_h·p_w]`, tokens in
/// row-major `(r, c)` order, features ordered channel, row, column.
pub fn patchify(fused: &FusedImage, geom: &TokenGeometry) -> Result<Vec<f32>> {
    geom.check_fused(fused)?;
    let (ph, pw) = (geom.patch_h, geom.patch_w);
    let mut out = Vec::with_capacity(geom.tokens() * geom.patch_dim());
    for r in 0..geom.rows() {
        for c in 0..geom.fused_cols() {
            for ch in 0..Image::CHANNELS {
                for y in 0..ph {
                    for x in 0..pw {
                        out.push(fused.image.get(ch, r * ph + y, c * pw + x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cell-aligned mask over one view. Cells are `p_h × p_w/2` pixels, one per fused token.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMask {
    pub view: View,
    pub rows: usize,
    pub cols: usize,
    /// `true` = masked, `[rows × cols]`.
    pub cells: Vec<bool>,
    pub ratio: f64,
}

impl ViewMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    /// Zero-fills the masked cells of the corresponding view.
    pub fn apply(&self, pair: &mut ImagePair, geom: &TokenGeometry) {
        let img = match self.view {
            View::Left => &mut pair.left,
            View::Right => &mut pair.right,
        };
        let (ch, cw) = (geom.patch_h, geom.view_token_px());
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.cells[r * self.cols + c] {
                    continue;
                }
                for k in 0..Image::CHANNELS {
                    for y in r * ch..(r + 1) * ch {
                        for x in c * cw..(c + 1) * cw {
                            img.set(k, y, x, 0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Masks exactly `round(ratio · cells)` uniformly chosen cells of the given view.
pub fn sample_view_mask<R: Rng + ?Sized>(
    geom: &TokenGeometry,
    view: View,
    ratio: f64,
    rng: &mut R,
) -> Result<ViewMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(BinoError::Config(format!("mask ratio {ratio} outside [0,1]")));
    }
    let (rows, cols) = (geom.rows(), geom.fused_cols());
    let n = rows * cols;
    let k = (ratio * n as f64).round() as usize;
    let mut cells = vec![false; n];
    for i in index::sample(rng, n, k) {
        cells[i] = true;
    }
    Ok(ViewMask {
        view,
        rows,
        cols,
        cells,
        ratio: k as f64 / n as f64,
    })
}

/// Picks the masked view by a fair coin, then samples its cells.
pub fn sample_one_view_mask<R: Rng + ?Sized>(
    geom: &TokenGeometry,
    ratio: f64,
    rng: &mut R,
) -> Result<ViewMask> {
    let view = if rng.random_bool(0.5) {
        View::Left
    } else {
        View::Right
    };
    sample_view_mask(geom, view, ratio, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, offset: f32) -> Image {
        let data = (0..3 * h * w).map(|i| offset + i as f32 / 1000.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn interleave_definition_w2() {
        let l = Image::new(1, 2, vec![0.1, 0.2, 0.1, 0.2, 0.1, 0.2]).unwrap();
        let r = Image::new(1, 2, vec![0.3, 0.4, 0.3, 0.4, 0.3, 0.4]).unwrap();
        let f = interleave(&ImagePair::new(l, r).unwrap()).unwrap();
        assert_eq!(&f.image.data()[..4], &[0.1, 0.3, 0.2, 0.4]);
    }

    #[test]
    fn concat_definition_w2() {
        let l = Image::new(1, 2, vec![1., 2., 1., 2., 1., 2.]).unwrap();
        let r = Image::new(1, 2, vec![3., 4., 3., 4., 3., 4.]).unwrap();
        let pair = ImagePair::new(l, r).unwrap();
        let f = concat_fuse(&pair).unwrap();
        assert_eq!(&f.image.data()[..4], &[1., 2., 3., 4.]);
        assert_eq!(defuse(&f).unwrap(), pair);
    }

    #[test]
    fn duplicated_input_pairs_columns() {
        let img = ramp(2, 4, 0.0);
        let f = interleave(&ImagePair::duplicated(&img)).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for u in 0..4 {
                    assert_eq!(f.image.get(c, y, 2 * u), f.image.get(c, y, 2 * u + 1));
                }
            }
        }
        let back = deinterleave(&f).unwrap();
        assert_eq!(back.left, img);
        assert_eq!(back.right, img);
    }

    #[test]
    fn stride_blocks_round_trip() {
        let pair = ImagePair::new(ramp(2, 8, 0.0), ramp(2, 8, 5.0)).unwrap();
        for stride in [1, 2, 4] {
            let f = fuse(&pair, FusionMode::Interleave { stride }, Provenance::Normal).unwrap();
            assert_eq!(defuse(&f).unwrap(), pair);
        }
        let f = fuse(&pair, FusionMode::Interleave { stride: 2 }, Provenance::Normal).unwrap();
        // columns: L0 L1 R0 R1 L2 L3 ...
        assert_eq!(f.image.get(0, 0, 2), pair.right.get(0, 0, 0));
        assert_eq!(f.image.get(0, 0, 4), pair.left.get(0, 0, 2));
        assert!(deinterleave(&f).is_err());
    }

    #[test]
    fn shape_errors() {
        assert!(ImagePair::new(ramp(2, 4, 0.0), ramp(2, 6, 0.0)).is_err());
        let odd = FusedImage {
            image: ramp(1, 3, 0.0),
            mode: FusionMode::default(),
            provenance: Provenance::Normal,
        };
        assert!(deinterleave(&odd).is_err());
    }

    #[test]
    fn phase_decompose_examples() {
        assert_eq!(phase_decompose(0), (0, 0));
        assert_eq!(phase_decompose(5), (2, 1));
    }

    #[test]
    fn geometry_at_full_resolution() {
        let g = TokenGeometry::new(48, 160, 4, 4).unwrap();
        assert_eq!((g.rows(), g.fused_cols(), g.patch_cols()), (12, 80, 40));
        assert_eq!(g.view_token_px(), 2);
        assert!(TokenGeometry::new(48, 160, 4, 3).is_err());
        assert!(TokenGeometry::new(47, 160, 4, 4).is_err());
        assert!(TokenGeometry::new(48, 162, 4, 4).is_err());
    }

    #[test]
    fn patchify_covers_every_pixel_once() {
        let g = TokenGeometry::new(8, 8, 4, 4).unwrap();
        let n = 3 * 8 * 16;
        let img = Image::new(8, 16, (0..n).map(|i| i as f32).collect()).unwrap();
        let fused = FusedImage {
            image: img,
            mode: FusionMode::default(),
            provenance: Provenance::Normal,
        };
        let mut seen = patchify(&fused, &g).unwrap();
        assert_eq!(seen.len(), n);
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(seen.iter().enumerate().all(|(i, &v)| v == i as f32));
    }

    #[test]
    fn mask_extremes() {
        let g = TokenGeometry::new(8, 16, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_one_view_mask(&g, 0.0, &mut rng).unwrap();
        assert_eq!(m.count(), 0);
        let m = sample_view_mask(&g, View::Right, 1.0, &mut rng).unwrap();
        assert_eq!(m.count(), m.cells.len());
        let mut pair = ImagePair::new(ramp(8, 16, 0.5), ramp(8, 16, 0.5)).unwrap();
        let before = pair.clone();
        m.apply(&mut pair, &g);
        assert_eq!(pair.left, before.left);
        assert!(pair.right.data().iter().all(|&v| v == 0.0));
        assert!(sample_one_view_mask(&g, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mask_count_is_rounded_ratio() {
        let g = TokenGeometry::new(8, 16, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = sample_one_view_mask(&g, 0.3, &mut rng).unwrap();
        assert_eq!(m.count(), (0.3f64 * 16.0).round() as usize);
    }

    #[test]
    fn phase_pairs_per_mode() {
        let g = TokenGeometry::new(4, 16, 4, 4).unwrap();
        let il = phase_pairs(&g, FusionMode::default()).unwrap();
        assert_eq!(il, [(0, 1), (2, 3), (4, 5), (6, 7)]);
        let cc = phase_pairs(&g, FusionMode::Concat).unwrap();
        assert_eq!(cc, [(0, 4), (1, 5), (2, 6), (3, 7)]);
        let s4 = phase_pairs(&g, FusionMode::Interleave { stride: 4 }).unwrap();
        assert_eq!(s4, il);
    }

    proptest::proptest! {
        #[test]
        fn fuse_defuse_round_trip(h in 1usize..6, half in 1usize..8, stride_pow in 0u32..3, concat: bool, seed: u64) {
            let stride = 1usize << stride_pow;
            let w = 2 * half * stride;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut img = || Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
            let pair = ImagePair::new(img(), img()).unwrap();
            let mode = if concat { FusionMode::Concat } else { FusionMode::Interleave { stride } };
            let fused = fuse(&pair, mode, Provenance::Normal).unwrap();
            proptest::prop_assert_eq!(fused.width(), 2 * w);
            proptest::prop_assert_eq!(defuse(&fused).unwrap(), pair);
        }

        #[test]
        fn phase_decompose_inverts(c in 0usize..1 << 20) {
            let (p, q) = phase_decompose(c);
            proptest::prop_assert!(q < 2);
            proptest::prop_assert_eq!(2 * p + q, c);
        }

        #[test]
        fn one_view_mask_touches_one_view(ratio in 0.0f64..=1.0, seed: u64) {
            let geo = TokenGeometry::new(8, 16, 4, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = ImagePair::new(ramp(8, 16, 0.0), ramp(8, 16, 0.5)).unwrap();
            let m = sample_one_view_mask(&geo, ratio, &mut rng).unwrap();
            let mut masked = pair.clone();
            m.apply(&mut masked, &geo);
            let (kept, hit) = match m.view {
                View::Left => (&masked.right, &pair.right),
                View::Right => (&masked.left, &pair.left),
            };
            proptest::prop_assert_eq!(kept, hit);
        }
    }
}
