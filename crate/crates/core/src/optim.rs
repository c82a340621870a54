//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{contract_err, Result};
use crate::nn::Module;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Global L2 norm of the gradients currently held by `model`.
    pub fn grad_norm(model: &impl Module) -> f64 {
        let mut sq = 0.0;
        model.visit("", &mut |_, p| {
            if let Some(g) = p.grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        });
        sq.sqrt()
    }

    /// One update from the accumulated gradients; parameters are replaced by
    /// fresh leaves, so gradients start empty afterwards. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, model: &mut impl Module) -> Result<f64> {
        let norm = Self::grad_norm(model);
        if !norm.is_finite() {
            return contract_err("non-finite gradient norm");
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t as i32), 1.0 - c.beta2.powi(self.t as i32));
        let mut i = 0;
        let mut err = None;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            if m_all.len() <= i {
                m_all.push(vec![0.0; p.numel()]);
                v_all.push(vec![0.0; p.numel()]);
            }
            let (m, v) = (&mut m_all[i], &mut v_all[i]);
            i += 1;
            let Some(g) = p.grad() else { return };
            let mut w = p.to_vec();
            for j in 0..w.len() {
                let gj = g[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let (mh, vh) = (m[j] / bc1, v[j] / bc2);
                w[j] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[j]);
            }
            match p.replaced(w) {
                Ok(t) => *p = t,
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(norm),
        }
    }

    pub fn zero_grad(model: &impl Module) {
        model.visit("", &mut |_, p: &Tensor| p.zero_grad());
    }
}
