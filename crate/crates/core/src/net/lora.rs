//! Low-rank adapters on frozen projections.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use super::ops::normal_matrix;
use super::NetError;
use crate::scalar::Scalar;

pub const LORA_INIT_STD: f64 = 0.02;

/// `W·x + scale·B·(A·x)` with `A: r × d_in`, `B: d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S> {
    pub a: Array2<S>,
    pub b: Array2<S>,
    pub scale: S,
}

impl<S: Scalar> LoraAdapter<S> {
    /// Gaussian `A`, zero `B`: the adapter starts as an exact no-op.
    pub fn init<R: Rng>(rng: &mut R, rank: usize, d_in: usize, d_out: usize, alpha: f64) -> Self {
        Self {
            a: normal_matrix(rng, rank, d_in, LORA_INIT_STD).mapv(S::lit_f32),
            b: Array2::zeros((d_out, rank)),
            scale: S::lit(alpha / rank as f64),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self { a: Array2::zeros(self.a.raw_dim()), b: Array2::zeros(self.b.raw_dim()), scale: self.scale }
    }

    /// Row-batched adapter path: returns `u = drop(x)·Aᵀ` and
    /// `scale·u·Bᵀ`.
    pub(crate) fn delta_rows(&self, x: &ArrayView2<S>, mask: Option<&Array2<S>>) -> (Array2<S>, Array2<S>) {
        let u = match mask {
            Some(m) => (x * m).dot(&self.a.t()),
            None => x.dot(&self.a.t()),
        };
        let delta = u.dot(&self.b.t()) * self.scale;
        (u, delta)
    }
}

/// `W·x + (α/r)·B·(A·drop(x))`. `mask` holds inverted-dropout multipliers
/// (training mode); `None` is eval mode.
pub fn lora_apply<S: Scalar>(
    w: &ArrayView2<S>,
    x: &ArrayView1<S>,
    adapter: &LoraAdapter<S>,
    mask: Option<&ArrayView1<S>>,
) -> Result<Array1<S>, NetError> {
    let (d_out, d_in) = w.dim();
    if x.len() != d_in || adapter.d_in() != d_in || adapter.d_out() != d_out || adapter.b.ncols() != adapter.rank() {
        return Err(NetError::Shape {
            expected: format!("W {d_out}x{d_in}, x {d_in}, A rx{d_in}, B {d_out}xr"),
            got: format!(
                "x {}, A {}x{}, B {}x{}",
                x.len(),
                adapter.a.nrows(),
                adapter.a.ncols(),
                adapter.b.nrows(),
                adapter.b.ncols()
            ),
        });
    }
    let dropped = match mask {
        Some(m) if m.len() == d_in => x * m,
        Some(m) => {
            return Err(NetError::Shape { expected: format!("mask {d_in}"), got: format!("mask {}", m.len()) });
        }
        None => x.to_owned(),
    };
    Ok(w.dot(x) + adapter.b.dot(&adapter.a.dot(&dropped)) * adapter.scale)
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Array2<S> {
    let keep = S::lit(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { S::zero() } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_one_dimensional_case() {
        let adapter = LoraAdapter { a: array![[0.5f64]], b: array![[2.0]], scale: 2.0 };
        let y = lora_apply(&array![[1.0]].view(), &array![1.0].view(), &adapter, None).unwrap();
        assert_eq!(y[0], 3.0);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = normal_matrix(&mut rng, 5, 7, 1.0);
        let x = Array1::from_iter((0..7).map(|i| i as f32 - 3.0));
        for r in [2, 4, 8] {
            let ad = LoraAdapter::<f32>::init(&mut rng, r, 7, 5, 2.0 * r as f64);
            assert_eq!(ad.scale, 2.0);
            assert_eq!(lora_apply(&w.view(), &x.view(), &ad, None).unwrap(), w.dot(&x));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let ad = LoraAdapter { a: Array2::<f64>::zeros((2, 3)), b: Array2::zeros((4, 2)), scale: 2.0 };
        let w = Array2::<f64>::zeros((4, 3));
        assert!(matches!(lora_apply(&w.view(), &Array1::zeros(5).view(), &ad, None), Err(NetError::Shape { .. })));
        let m = Array1::ones(2);
        assert!(lora_apply(&w.view(), &Array1::zeros(3).view(), &ad, Some(&m.view())).is_err());
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let m: Array2<f64> = dropout_mask(&mut ChaCha8Rng::seed_from_u64(1), 100, 100, 0.1);
        let zeros = m.iter().filter(|&&v| v == 0.0).count();
        assert!((800..1200).contains(&zeros), "{zeros}");
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
        let again: Array2<f64> = dropout_mask(&mut ChaCha8Rng::seed_from_u64(1), 100, 100, 0.1);
        assert_eq!(m, again);
    }
}
