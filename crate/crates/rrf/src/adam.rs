//! Adam, shaped for this project: parameters live in a handful of flat `f64`
//! groups (one per conv weight/bias array), and the optimizer keeps matching
//! first/second moment buffers. Any non-finite gradient is a hard error so
//! the trainer can fall back to skipping the GoP instead of signalling junk.

use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    /// One moment buffer pair per parameter group, sized to match.
    pub fn new(group_sizes: &[usize]) -> Self {
        AdamState {
            m: group_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: group_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update. `params` and `grads` must line up
    /// with the groups the state was created with.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ParamLength {
                op: "adam_step groups",
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[gi].len() || g.len() != self.m[gi].len() {
                return Err(TensorError::ParamLength {
                    op: "adam_step group size",
                    expected: self.m[gi].len(),
                    got: p.len().max(g.len()),
                });
            }
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..p.len() {
                let gv = g[i];
                if !gv.is_finite() {
                    return Err(TensorError::NonFinite("adam_step gradient"));
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
