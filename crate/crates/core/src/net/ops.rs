//! Row-wise building blocks with explicit backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x · wᵀ` for a weight stored as `out × in`.
pub(crate) fn linear<S: Scalar>(x: &ArrayView2<S>, w: &Array2<S>) -> Array2<S> {
    x.dot(&w.t())
}

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng) as f32)
}

pub(crate) struct LnCache<S> {
    pub xhat: Array2<S>,
    pub inv: Array1<S>,
}

pub(crate) fn layer_norm<S: Scalar>(x: &ArrayView2<S>, g: &Array1<S>, b: &Array1<S>) -> (Array2<S>, LnCache<S>) {
    let d = S::from_usize(x.ncols()).unwrap();
    let eps = S::lit(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, iv) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(S::zero(), |a, &v| a + v * v) / d;
        *iv = S::one() / (var + eps).sqrt();
        let s = *iv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv })
}

/// Returns `dx`; accumulates `dg`, `db` when given.
pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &ArrayView2<S>,
    cache: &LnCache<S>,
    g: &Array1<S>,
    param_grads: Option<(&mut Array1<S>, &mut Array1<S>)>,
) -> Array2<S> {
    if let Some((dg, db)) = param_grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = S::from_usize(dy.ncols()).unwrap();
    let mut dx = dy * g;
    for ((mut row, xh), &iv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh).fold(S::zero(), |a, (&u, &v)| a + u * v) / d;
        Zip::from(&mut row).and(&xh).for_each(|u, &v| *u = iv * (*u - m1 - v * m2));
    }
    dx
}

const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + S::lit(GELU_A) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    let t = (c * (x + S::lit(GELU_A) * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0 * GELU_A) * x * x)
}

/// In-place softmax of one row, ignoring entries past `limit` (set to zero).
pub(crate) fn softmax_prefix<S: Scalar>(row: &mut [S], limit: usize) {
    let max = row[..limit].iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in row[..limit].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row[..limit].iter_mut() {
        *v /= sum;
    }
    for v in row[limit..].iter_mut() {
        *v = S::zero();
    }
}

pub(crate) fn all_finite<S: Scalar>(a: &Array2<S>) -> bool {
    a.iter().all(|v| v.is_finite())
}
