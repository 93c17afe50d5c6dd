use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

/// Per-parameter buffers. SGD uses `first` as velocity; Adam uses both moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        Self {
            kind,
            step: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    fn check(&self, params: &[Tensor<f32>], grads: &[Vec<f32>]) -> Result<(), TrainError> {
        let ok_first = self.first.len() == params.len()
            && self.first.iter().zip(params).all(|(b, p)| b.len() == p.len());
        let ok_second = self.kind != OptimizerKind::Adam
            || (self.second.len() == params.len()
                && self.second.iter().zip(params).all(|(b, p)| b.len() == p.len()));
        let ok_grads =
            grads.len() == params.len() && grads.iter().zip(params).all(|(g, p)| g.len() == p.len());
        if ok_first && ok_second && ok_grads {
            Ok(())
        } else {
            Err(TrainError::ShapeMismatch("optimizer buffers, gradients and parameters differ".into()))
        }
    }
}

/// Cosine annealing from `lr_init` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: u64, total: u64, lr_init: f64, lr_min: f64) -> Result<f64, TrainError> {
    if t > total || total == 0 {
        return Err(TrainError::OutOfRange(format!("step {t} outside 0..={total}")));
    }
    let frac = t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// `v <- momentum v + g + wd w; w <- w - lr v`.
pub fn step_sgd(
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.check(params, grads)?;
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        for ((w, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam with the weight-decay term added to the gradient.
pub fn step_adam(
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
    hp: AdamParams,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = (1.0 - hp.beta1.powi(t)) as f32;
    let c2 = (1.0 - hp.beta2.powi(t)) as f32;
    let (b1, b2, eps, lr, wd) = (
        hp.beta1 as f32,
        hp.beta2 as f32,
        hp.eps as f32,
        lr as f32,
        weight_decay as f32,
    );
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] + wd * *w;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
