use super::{ParamSet, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

/// First and second moment buffers plus the step count used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real = f32> {
    pub first: ParamSet<T>,
    pub second: ParamSet<T>,
    pub step: u64,
}

impl<T: Real> Moments<T> {
    pub fn for_params(params: &ParamSet<T>) -> Self {
        Moments {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg }
    }

    /// Applies one update at learning rate `lr`. `decay_mask[i]` selects which
    /// parameters receive weight decay. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
        moments: &mut Moments<T>,
        lr: f64,
        decay_mask: &[bool],
    ) -> Result<(), TensorError> {
        if grads.len() != params.len()
            || decay_mask.len() != params.len()
            || !moments.first.is_aligned_with(params)
            || !moments.second.is_aligned_with(params)
        {
            return Err(TensorError::Shape {
                op: "adamw_step",
                detail: "moments, gradients and parameters are not aligned".into(),
            });
        }
        for (g, p) in grads.iter().zip(params.tensors()) {
            if g.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adamw_step",
                    detail: format!("gradient {:?} vs param {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "adamw_step" });
            }
        }
        let c = self.cfg;
        moments.step += 1;
        let t = moments.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let wd = if decay_mask[i] { c.weight_decay } else { 0.0 };
            let p = params.tensors_mut()[i].data_mut();
            let m = moments.first.tensors_mut()[i].data_mut();
            let v = moments.second.tensors_mut()[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].f64();
                let mj = c.beta1 * m[j].f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let pj = p[j].f64();
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p[j] = T::of(pj - lr * wd * pj - lr * upd);
            }
        }
        Ok(())
    }
}
