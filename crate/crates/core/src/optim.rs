//! AdamW: Adam with bias-corrected moments and decoupled weight decay.

use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> AdamWState {
        let m = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        let v = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        AdamWState { m, v, step: 0 }
    }
}

/// One update. Weight decay is applied directly to the parameters,
/// separately from the gradient-driven Adam step.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamWState, cfg: &AdamWConfig) {
    assert_eq!(grads.len(), params.len(), "gradient count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let p = params.tensor_mut(i);
        let g = grads[i].data();
        debug_assert_eq!(p.shape(), grads[i].shape(), "grad shape mismatch at param {i}");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..g.len() {
            let pd = &mut p.data_mut()[j];
            *pd -= cfg.lr * cfg.weight_decay * *pd;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pd -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn scalar_params(v: f64) -> ParamSet {
        // smallest route to a real ParamSet: borrow the model builder is
        // overkill here, so build one through the public surface
        let mut model = Model::new(ModelConfig::default()).unwrap();
        // shrink to a single scalar by reusing slot 0's first element only
        // is awkward; instead test against slot 0 wholesale
        for i in 0..model.params.len() {
            model.params.tensor_mut(i).data_mut().iter_mut().for_each(|x| *x = v);
        }
        model.params
    }

    #[test]
    fn zero_grad_zero_decay_no_change() {
        let mut params = scalar_params(0.5);
        let grads: Vec<Tensor> = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        let mut state = AdamWState::new(&params);
        let before: Vec<f64> = (0..params.len()).flat_map(|i| params.tensor(i).data().to_vec()).collect();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut params, &grads, &mut state, &cfg);
        let after: Vec<f64> = (0..params.len()).flat_map(|i| params.tensor(i).data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_grad_decoupled_decay_scales() {
        let mut params = scalar_params(2.0);
        let grads: Vec<Tensor> = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        let mut state = AdamWState::new(&params);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        adamw_step(&mut params, &grads, &mut state, &cfg);
        // theta <- theta * (1 - lr*wd) = 2.0 * 0.999
        for i in 0..params.len() {
            for &x in params.tensor(i).data() {
                assert!((x - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_trajectory_matches_recurrence() {
        // independent hand-rolled recurrence for a single scalar parameter
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.02, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let grad_seq = [0.3, -0.2, 0.7, 0.1, -0.5];
        let mut expected = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grad_seq.iter().enumerate() {
            let t = (t + 1) as i32;
            expected -= cfg.lr * cfg.weight_decay * expected;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            expected -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }

        let mut params = scalar_params(1.0);
        let mut state = AdamWState::new(&params);
        for &g in &grad_seq {
            let grads: Vec<Tensor> = (0..params.len())
                .map(|i| Tensor::filled(params.tensor(i).shape(), g))
                .collect();
            adamw_step(&mut params, &grads, &mut state, &cfg);
        }
        // every scalar saw the same gradient sequence, so all match
        for i in 0..params.len() {
            for &x in params.tensor(i).data() {
                assert!((x - expected).abs() < 1e-12, "got {x}, want {expected}");
            }
        }
        assert_eq!(state.step, 5);
    }
}
