use super::{gemm, MatRef, Real};

/// Per-token rotary phases, one angle per channel pair `(2j, 2j+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    tokens: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// `angles` is `[tokens × pairs]`, row-major.
    pub fn from_angles(tokens: usize, pairs: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len(), tokens * pairs, "rope angle table extent");
        RopeTable {
            tokens,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        }
    }

    pub fn zeros(tokens: usize, pairs: usize) -> Self {
        Self::from_angles(tokens, pairs, &vec![0.0; tokens * pairs])
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Rotates `x` (`[tokens × 2·pairs]`) in place; `inverse` applies the transpose.
    pub(crate) fn rotate<T: Real>(&self, x: &mut [T], inverse: bool) {
        let hd = 2 * self.pairs;
        debug_assert_eq!(x.len(), self.tokens * hd);
        for (n, row) in x.chunks_exact_mut(hd).enumerate() {
            for j in 0..self.pairs {
                let c = self.cos[n * self.pairs + j];
                let s = if inverse {
                    -self.sin[n * self.pairs + j]
                } else {
                    self.sin[n * self.pairs + j]
                };
                let x0 = row[2 * j].f64();
                let x1 = row[2 * j + 1].f64();
                row[2 * j] = T::of(x0 * c - x1 * s);
                row[2 * j + 1] = T::of(x0 * s + x1 * c);
            }
        }
    }
}

pub(crate) struct AttnSaved<T> {
    pub q_rot: Vec<T>,
    pub k_rot: Vec<T>,
    pub probs: Vec<T>,
}

/// Scaled dot-product attention over `bh` independent `[n × hd]` slices.
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    bh: usize,
    n: usize,
    hd: usize,
    rope: Option<&RopeTable>,
) -> (Vec<T>, AttnSaved<T>) {
    let mut q_rot = q.to_vec();
    let mut k_rot = k.to_vec();
    if let Some(rope) = rope {
        for s in 0..bh {
            rope.rotate(&mut q_rot[s * n * hd..(s + 1) * n * hd], false);
            rope.rotate(&mut k_rot[s * n * hd..(s + 1) * n * hd], false);
        }
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![T::zero(); bh * n * n];
    let mut out = vec![T::zero(); bh * n * hd];
    for s in 0..bh {
        let qs = &q_rot[s * n * hd..(s + 1) * n * hd];
        let ks = &k_rot[s * n * hd..(s + 1) * n * hd];
        let vs = &v[s * n * hd..(s + 1) * n * hd];
        let ps = &mut probs[s * n * n..(s + 1) * n * n];
        gemm(MatRef::new(qs, n, hd), MatRef::new(ks, n, hd).t(), ps, T::zero());
        for row in ps.chunks_exact_mut(n) {
            let mx = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64() * scale));
            let mut z = 0.0f64;
            for x in row.iter_mut() {
                let e = (x.f64() * scale - mx).exp();
                z += e;
                *x = T::of(e);
            }
            for x in row.iter_mut() {
                *x = T::of(x.f64() / z);
            }
        }
        gemm(
            MatRef::new(ps, n, n),
            MatRef::new(vs, n, hd),
            &mut out[s * n * hd..(s + 1) * n * hd],
            T::zero(),
        );
    }
    (
        out,
        AttnSaved {
            q_rot,
            k_rot,
            probs,
        },
    )
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    saved: &AttnSaved<T>,
    v: &[T],
    d_out: &[T],
    bh: usize,
    n: usize,
    hd: usize,
    rope: Option<&RopeTable>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); bh * n * hd];
    let mut dk = vec![T::zero(); bh * n * hd];
    let mut dv = vec![T::zero(); bh * n * hd];
    let mut dp = vec![T::zero(); n * n];
    for s in 0..bh {
        let span = s * n * hd..(s + 1) * n * hd;
        let ps = &saved.probs[s * n * n..(s + 1) * n * n];
        let dos = &d_out[span.clone()];
        gemm(MatRef::new(ps, n, n).t(), MatRef::new(dos, n, hd), &mut dv[span.clone()], T::zero());
        gemm(MatRef::new(dos, n, hd), MatRef::new(&v[span.clone()], n, hd).t(), &mut dp, T::zero());
        for (drow, prow) in dp.chunks_exact_mut(n).zip(ps.chunks_exact(n)) {
            let inner: f64 = drow.iter().zip(prow).map(|(d, p)| d.f64() * p.f64()).sum();
            for (d, p) in drow.iter_mut().zip(prow) {
                *d = T::of(p.f64() * (d.f64() - inner)) * scale;
            }
        }
        gemm(
            MatRef::new(&dp, n, n),
            MatRef::new(&saved.k_rot[span.clone()], n, hd),
            &mut dq[span.clone()],
            T::zero(),
        );
        gemm(
            MatRef::new(&dp, n, n).t(),
            MatRef::new(&saved.q_rot[span.clone()], n, hd),
            &mut dk[span.clone()],
            T::zero(),
        );
        if let Some(rope) = rope {
            rope.rotate(&mut dq[span.clone()], true);
            rope.rotate(&mut dk[span], true);
        }
    }
    (dq, dk, dv)
}
