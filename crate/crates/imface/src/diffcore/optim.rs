//! Adam optimizer with bias-corrected moments.

use super::tensor::Tensor;

/// Shared optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment accumulators and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize) -> Self {
        OptimizerState {
            m: Tensor::zeros(rows, cols),
            v: Tensor::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn like(t: &Tensor) -> Self {
        OptimizerState {
            m: Tensor {
                shape: t.shape.clone(),
                data: vec![0.0; t.len()],
            },
            v: Tensor {
                shape: t.shape.clone(),
                data: vec![0.0; t.len()],
            },
            step: 0,
        }
    }
}

/// One Adam update in place. `lr_scale` multiplies the configured learning
/// rate for this call (stage schedules scale per parameter group).
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    lr_scale: f64,
) {
    assert_eq!(param.len(), grad.len(), "adam: param/grad shape mismatch");
    assert_eq!(param.len(), state.m.len(), "adam: param/state shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.lr * lr_scale;
    for i in 0..param.len() {
        let g = grad.data[i];
        let m = cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v.data[i] + (1.0 - cfg.beta2) * g * g;
        state.m.data[i] = m;
        state.v.data[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        param.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}
