//! Adam with decoupled weight decay over a [`ParamBlock`].

use crate::error::{Error, Result};
use crate::model::ParamBlock;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First/second moment estimates shaped like the block they update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamBlock,
    pub v: ParamBlock,
    pub steps: u64,
}

impl AdamState {
    pub fn new(block: &ParamBlock) -> Self {
        AdamState {
            m: block.zeros_like(),
            v: block.zeros_like(),
            steps: 0,
        }
    }

    /// One update. `grads[i]` matches `block.params[i]`; the decay term
    /// `p ← p·(1 − lr·wd)` is applied before the adaptive step.
    pub fn step(&mut self, block: &mut ParamBlock, grads: &[&[f64]], lr: f64, cfg: &AdamConfig) -> Result<()> {
        block.check_compatible(&self.m, "adam")?;
        if grads.len() != block.params.len()
            || grads.iter().zip(&block.params).any(|(g, p)| g.len() != p.values.len())
        {
            return Err(Error::shape("adam", "gradients do not match the parameter block"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((p, m), v), g) in block
            .params
            .iter_mut()
            .zip(self.m.params.iter_mut())
            .zip(self.v.params.iter_mut())
            .zip(grads)
        {
            for (((x, mi), vi), &gi) in p
                .values
                .iter_mut()
                .zip(m.values.iter_mut())
                .zip(v.values.iter_mut())
                .zip(g.iter())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *x = *x * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
