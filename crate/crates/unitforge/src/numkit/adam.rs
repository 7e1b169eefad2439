//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{NumkitError, Tensor};

/// Betas and epsilon are not stated by the training recipe this follows;
/// (0.9, 0.98, 1e-6) are the usual speech pre-training defaults and are
/// recorded in config rather than hard-coded at call sites.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], cfg: AdamConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
            cfg,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }
}

/// One Adam update in place. Weight decay is decoupled from the moment
/// estimates (AdamW style).
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NumkitError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumkitError::ShapeMismatch(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NumkitError::ShapeMismatch(format!(
                "adam_step param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(NumkitError::NonFinite("adam_step gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c = &state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[j]);
        }
        if !params[i].all_finite() {
            return Err(NumkitError::NonFinite("adam_step update"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(vec![1, 3])];
        let mut state = AdamState::new(&params, cfg_no_decay());
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_grad_sign() {
        // With fresh state, bias correction makes m_hat = g and v_hat = g^2,
        // so the update is lr * g / (|g| + eps) = lr * sign(g) up to eps.
        let mut params = vec![Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap()];
        let grads = vec![Tensor::from_vec(vec![1, 2], vec![3.0, -0.25]).unwrap()];
        let mut state = AdamState::new(&params, cfg_no_decay());
        let lr = 0.01;
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        assert!((params[0].data()[0] + lr).abs() < 1e-6);
        assert!((params[0].data()[1] - lr).abs() < 1e-4);
    }

    #[test]
    fn nan_grad_is_rejected() {
        let mut params = vec![Tensor::zeros(vec![1, 1])];
        let grads = vec![Tensor::from_vec(vec![1, 1], vec![f64::NAN]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(adam_step(&mut params, &grads, &mut state, 0.1).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(vec![1, 2])];
        let grads = vec![Tensor::zeros(vec![2, 1])];
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(adam_step(&mut params, &grads, &mut state, 0.1).is_err());
    }

    #[test]
    fn weight_decay_shrinks_params_even_with_zero_grad() {
        let mut params = vec![Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap()];
        let grads = vec![Tensor::zeros(vec![1, 1])];
        let mut state = AdamState::new(
            &params,
            AdamConfig {
                weight_decay: 0.01,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut params, &grads, &mut state, 0.5).unwrap();
        assert!((params[0].data()[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
    }
}
