//! LayerNorm → Linear → ReLU → Linear → Sigmoid regression head.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::ops::{layer_norm, layer_norm_backward, normal_matrix, LnCache};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead<S> {
    pub ln_g: Array1<S>,
    pub ln_b: Array1<S>,
    /// `hidden × d_model`
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    /// `1 × hidden`
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

pub(crate) struct HeadCache<S> {
    ln: LnCache<S>,
    y0: Array2<S>,
    z1: Array2<S>,
    a1: Array2<S>,
    pub(crate) out: S,
}

/// Logistic function kept strictly inside (0, 1) at the precision of `S`.
fn sigmoid<S: Scalar>(z: S) -> S {
    let eps = S::epsilon();
    (S::one() / (S::one() + (-z).exp())).max(eps).min(S::one() - eps)
}

impl<S: Scalar> RegressionHead<S> {
    pub fn init<R: Rng>(rng: &mut R, d_model: usize, hidden: usize) -> Self {
        Self {
            ln_g: Array1::ones(d_model),
            ln_b: Array1::zeros(d_model),
            w1: normal_matrix(rng, hidden, d_model, 1.0 / (d_model as f64).sqrt()).mapv(S::lit_f32),
            b1: Array1::zeros(hidden),
            w2: normal_matrix(rng, 1, hidden, 1.0 / (hidden as f64).sqrt()).mapv(S::lit_f32),
            b2: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln_g: Array1::zeros(self.ln_g.raw_dim()),
            ln_b: Array1::zeros(self.ln_b.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn n_params(&self) -> usize {
        self.ln_g.len() + self.ln_b.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Prediction in (0, 1) from one hidden state.
    pub fn forward(&self, h: &Array1<S>) -> S {
        self.forward_cached(h).out
    }

    pub(crate) fn forward_cached(&self, h: &Array1<S>) -> HeadCache<S> {
        let x = h.view().insert_axis(Axis(0));
        let (y0, ln) = layer_norm(&x, &self.ln_g, &self.ln_b);
        let z1 = y0.dot(&self.w1.t()) + &self.b1;
        let a1 = z1.mapv(|v| v.max(S::zero()));
        let z2 = a1.dot(&self.w2.t())[[0, 0]] + self.b2[0];
        HeadCache { ln, y0, z1, a1, out: sigmoid(z2) }
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dh`.
    pub(crate) fn backward(&self, c: &HeadCache<S>, d_out: S, g: &mut RegressionHead<S>) -> Array1<S> {
        let dz2 = d_out * c.out * (S::one() - c.out);
        g.w2.scaled_add(dz2, &c.a1);
        g.b2[0] += dz2;
        let mut dz1 = self.w2.mapv(|w| w * dz2);
        dz1.zip_mut_with(&c.z1, |d, &z| {
            if z <= S::zero() {
                *d = S::zero()
            }
        });
        g.w1 += &dz1.t().dot(&c.y0);
        g.b1 += &dz1.row(0);
        let dy0 = dz1.dot(&self.w1);
        let dh = layer_norm_backward(&dy0.view(), &c.ln, &self.ln_g, Some((&mut g.ln_g, &mut g.ln_b)));
        dh.row(0).to_owned()
    }
}
