//! Adam with optional global-norm gradient clipping.

use super::tensor::{Real, Tensor};
use super::{NumError, Result};

pub struct Adam<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global L2 norm of all gradients to this value, if set.
    pub clip_norm: Option<f64>,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
    t: u64,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` pairs with `params[i]`; `None` means the
    /// parameter did not participate this step (its moments still decay).
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<R>],
        grads: &mut [Option<Tensor<R>>],
    ) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(NumError::DimensionMismatch {
                context: "adam params/grads".into(),
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let mut sq = 0.0f64;
        for g in grads.iter().flatten() {
            for &x in g.data() {
                let xf = x.to_f64();
                if !xf.is_finite() {
                    return Err(NumError::NonFinite("adam gradient".into()));
                }
                sq += xf * xf;
            }
        }
        let norm = sq.sqrt();
        if let Some(clip) = self.clip_norm {
            if norm > clip {
                let s = R::from_f64(clip / norm);
                for g in grads.iter_mut().flatten() {
                    for x in g.data_mut() {
                        *x = *x * s;
                    }
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr_t = R::from_f64(self.lr * bc2.sqrt() / bc1);
        let b1 = R::from_f64(self.beta1);
        let b2 = R::from_f64(self.beta2);
        let one_m_b1 = R::from_f64(1.0 - self.beta1);
        let one_m_b2 = R::from_f64(1.0 - self.beta2);
        let eps = R::from_f64(self.eps);
        for i in 0..params.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != params[i].shape() {
                return Err(NumError::DimensionMismatch {
                    context: format!("adam grad {i}"),
                    lhs: params[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let pd = params[i].data_mut();
            let gd = g.data();
            for j in 0..gd.len() {
                md[j] = b1 * md[j] + one_m_b1 * gd[j];
                vd[j] = b2 * vd[j] + one_m_b2 * gd[j] * gd[j];
                pd[j] = pd[j] - lr_t * md[j] / (vd[j].sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
