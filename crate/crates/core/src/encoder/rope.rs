use super::{EncoderConfig, PosVariant};
use crate::fusion::phase_decompose;
use crate::tensor::RopeTable;
use crate::{BinoError, Result};

/// Rotary phases for the patch-phase layout: the first half of each head's
/// channel pairs rotates with the token row `r`, the second half with the
/// patch column `p = c / 2`, so both phase tokens of a cell share angles.
///
/// Returns `[tokens × head_dim/2]` angles in row-major token order.
pub fn rope_angles(cfg: &EncoderConfig) -> Result<Vec<f64>> {
    if cfg.pos_variant != PosVariant::PatchPhase2d {
        return Err(BinoError::Config(format!(
            "rotary angles are defined for patch-phase-2d, not {}",
            cfg.pos_variant.name()
        )));
    }
    let hd = cfg.head_dim();
    if hd % 4 != 0 {
        return Err(BinoError::Config(format!(
            "patch-phase rotary needs head_dim divisible by 4, got {hd}"
        )));
    }
    let pairs = hd / 2;
    let half = pairs / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| cfg.rope_base.powf(-(j as f64) / half as f64))
        .collect();
    let (rows, cols) = (cfg.geometry.rows(), cfg.geometry.fused_cols());
    let mut out = Vec::with_capacity(rows * cols * pairs);
    for r in 0..rows {
        for c in 0..cols {
            let (p, _) = phase_decompose(c);
            out.extend(freqs.iter().map(|f| r as f64 * f));
            out.extend(freqs.iter().map(|f| p as f64 * f));
        }
    }
    Ok(out)
}

pub fn rope_table(cfg: &EncoderConfig) -> Result<RopeTable> {
    let angles = rope_angles(cfg)?;
    Ok(RopeTable::from_angles(
        cfg.geometry.tokens(),
        cfg.head_dim() / 2,
        &angles,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::TokenGeometry;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            geometry: TokenGeometry::new(8, 16, 4, 4).unwrap(),
            dim: 16,
            heads: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn phase_tokens_share_angles() {
        let c = cfg();
        let a = rope_angles(&c).unwrap();
        let pairs = c.head_dim() / 2;
        let cols = c.geometry.fused_cols();
        for r in 0..c.geometry.rows() {
            for p in 0..c.geometry.patch_cols() {
                let even = (r * cols + 2 * p) * pairs;
                let odd = (r * cols + 2 * p + 1) * pairs;
                assert_eq!(a[even..even + pairs], a[odd..odd + pairs]);
            }
        }
    }

    #[test]
    fn origin_has_zero_rotation() {
        let c = cfg();
        let a = rope_angles(&c).unwrap();
        assert!(a[..c.head_dim() / 2].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn other_variants_have_no_angles() {
        let c = EncoderConfig {
            pos_variant: PosVariant::OneD,
            ..cfg()
        };
        assert!(rope_angles(&c).is_err());
    }

    #[test]
    fn logits_depend_on_column_offset_only() {
        let c = EncoderConfig {
            geometry: TokenGeometry::new(8, 32, 4, 4).unwrap(),
            ..cfg()
        };
        let table = rope_table(&c).unwrap();
        let hd = c.head_dim();
        let n = c.geometry.tokens();
        let cols = c.geometry.fused_cols();
        let q: Vec<f64> = (0..hd).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let k: Vec<f64> = (0..hd).map(|i| ((i * 53 % 7) as f64 - 3.0) / 2.0).collect();
        let mut qs = q.repeat(n);
        let mut ks = k.repeat(n);
        table.rotate(&mut qs, false);
        table.rotate(&mut ks, false);
        let logit = |r: usize, c1: usize, c2: usize| -> f64 {
            let (a, b) = ((r * cols + c1) * hd, (r * cols + c2) * hd);
            qs[a..a + hd].iter().zip(&ks[b..b + hd]).map(|(x, y)| x * y).sum()
        };
        // p1 - p2 = 1 for several placements and both phases
        let reference = logit(1, 2 * 1, 0);
        for (p1, p2) in [(2, 1), (5, 4), (7, 6)] {
            for (q1, q2) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let l = logit(1, 2 * p1 + q1, 2 * p2 + q2);
                assert!((l - reference).abs() < 1e-9, "{l} vs {reference}");
            }
        }
        assert!((logit(1, 6, 0) - reference).abs() > 1e-6);
    }
}
