use ndarray::{ArrayD, Zip};

use super::TrainConfig;
use crate::net::TrainableParams;
use crate::scalar::Scalar;

/// Step counter and per-tensor moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub t: u64,
    pub m: Vec<ArrayD<S>>,
    pub v: Vec<ArrayD<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &TrainableParams<S>) -> Self {
        let zeros: Vec<ArrayD<S>> = params.named_tensors().iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// Bias-corrected Adam update with decoupled weight decay:
/// `w ← w·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<S: Scalar>(
    params: &mut TrainableParams<S>,
    grads: &TrainableParams<S>,
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = S::lit(1.0 - b1.powi(state.t as i32));
    let bc2 = S::lit(1.0 - b2.powi(state.t as i32));
    let (b1, b2) = (S::lit(b1), S::lit(b2));
    let (one, lr_s, eps) = (S::one(), S::lit(lr), S::lit(cfg.eps));
    let decay = S::lit(1.0 - lr * cfg.weight_decay);
    let grads = grads.named_tensors();
    for (((mut w, (_, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        Zip::from(&mut w).and(&g).and(m).and(v).for_each(|w, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *w = *w * decay - lr_s * mh / (vh.sqrt() + eps);
        });
    }
}
