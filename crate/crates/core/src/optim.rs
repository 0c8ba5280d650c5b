//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S = f32> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }
}

/// One Adam update in place. Weight decay is applied as `p -= lr * wd * p` before the
/// moment update.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(TensorError::shape(
                "adam_step",
                format!(
                    "param {} shape {:?}, grad {:?}, moment {:?}",
                    i,
                    p.shape(),
                    g.shape(),
                    state.first_moment[i].shape()
                ),
            ));
        }
    }

    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let lr = S::lit(c.lr);
    let decay = S::lit(c.lr * c.weight_decay);
    let (b1, b2, eps) = (S::lit(c.beta1), S::lit(c.beta2), S::lit(c.eps));
    let bias1 = S::one() - S::lit(c.beta1.powi(t));
    let bias2 = S::one() - S::lit(c.beta2.powi(t));

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *pv -= decay * *pv;
            m[j] = b1 * m[j] + (S::one() - b1) * gv;
            v[j] = b2 * v[j] + (S::one() - b2) * gv * gv;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
