//! Adam with decoupled weight decay. Decay touches only parameters flagged
//! `decay` in the [`ParamSet`] (projection weights), never biases, norm
//! parameters or embeddings.

use serde::{Deserialize, Serialize};

use crate::engine::params::{Gradients, ParamSet};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup from 0 over this many steps; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState<S> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<S>) -> Self {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        let v = params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        Self { cfg, step: 0, m, v }
    }

    fn effective_lr(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps > 0 && step <= self.cfg.warmup_steps {
            self.cfg.lr * step as f64 / self.cfg.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }
}

/// One optimizer step. `grads` slots must shape-match `params`.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &Gradients<S>,
    state: &mut OptimState<S>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam_step: {} grads / {} moments for {} params",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for i in 0..params.len() {
        if let Some(g) = grads.slot(i) {
            if g.shape() != params.tensor(i).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "adam_step: grad shape {:?} vs param {:?} for {}",
                    g.shape(),
                    params.tensor(i).shape(),
                    params.get(i).name
                )));
            }
        }
    }

    state.step += 1;
    let t = state.step;
    let lr = S::from_config(state.effective_lr(t));
    let b1 = S::from_config(state.cfg.beta1);
    let b2 = S::from_config(state.cfg.beta2);
    let eps = S::from_config(state.cfg.eps);
    let one = S::one();
    let bias1 = one - b1.powi(t as i32);
    let bias2 = one - b2.powi(t as i32);

    for i in 0..params.len() {
        let decay = params.get(i).decay;
        let wd = if decay {
            S::from_config(state.cfg.weight_decay)
        } else {
            S::zero()
        };
        let zero_grad;
        let g: &Tensor<S> = match grads.slot(i) {
            Some(g) => g,
            None => {
                zero_grad = Tensor::zeros(params.tensor(i).shape().to_vec());
                &zero_grad
            }
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / bias1;
            let vhat = v[j] / bias2;
            p[j] = p[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64, decay: bool) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v), decay);
        p
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = single_param(1.5, false);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut state = OptimState::new(cfg, &params);
        let grads = Gradients::zeros(1);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params.tensor(0).item(), 1.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // Bias correction makes the first update exactly lr / (1 + eps).
        let mut params = single_param(0.0, false);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut state = OptimState::new(cfg, &params);
        let mut grads = Gradients::zeros(1);
        grads.add_scaled(&[Some(Tensor::scalar(1.0))], 1.0);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let p = params.tensor(0).item();
        assert!((p + 0.1).abs() < 1e-6, "param should drop by ~lr, got {p}");
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let run = || {
            let mut params = single_param(0.3, true);
            let mut state = OptimState::new(AdamConfig::default(), &params);
            let mut grads = Gradients::zeros(1);
            grads.add_scaled(&[Some(Tensor::scalar(0.7))], 1.0);
            adam_step(&mut params, &grads, &mut state).unwrap();
            adam_step(&mut params, &grads, &mut state).unwrap();
            params.tensor(0).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = single_param(0.0, false);
        let mut state = OptimState::new(AdamConfig::default(), &params);
        let mut grads = Gradients::zeros(1);
        grads.add_scaled(&[Some(Tensor::from_rows(1, 2, vec![1.0, 2.0]))], 1.0);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
