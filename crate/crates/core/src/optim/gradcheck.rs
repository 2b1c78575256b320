use crate::net::{EncodedInput, Mode, Model, NetError};

use super::mae_loss;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst relative error per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub groups: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub n_checked: usize,
}

/// Compares reverse-mode gradients of the MAE loss against central
/// differences with step `h`, for every trainable element. Dropout masks are
/// fixed by `mode`, so both sides see the same network.
pub fn check_gradients(
    model: &Model<f64>,
    x: &EncodedInput<f64>,
    target: f64,
    mode: Mode,
    h: f64,
) -> Result<GradCheck, NetError> {
    let (_, analytic) = model.forward_backward(x, mode, |o| mae_loss(o, target).1)?;
    let analytic: Vec<(String, Vec<f64>)> =
        analytic.named_tensors().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect();
    let mut probe = model.clone();
    let loss = |m: &Model<f64>| -> Result<f64, NetError> { Ok(mae_loss(m.forward(x, mode)?, target).0) };
    let mut groups = Vec::new();
    let mut n_checked = 0;
    for (ti, (name, grads)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (ei, &a) in grads.iter().enumerate() {
            let orig = probe.params.tensors_mut()[ti].as_slice_mut().expect("contiguous")[ei];
            probe.params.tensors_mut()[ti].as_slice_mut().unwrap()[ei] = orig + h;
            let up = loss(&probe)?;
            probe.params.tensors_mut()[ti].as_slice_mut().unwrap()[ei] = orig - h;
            let down = loss(&probe)?;
            probe.params.tensors_mut()[ti].as_slice_mut().unwrap()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
            n_checked += 1;
        }
        groups.push((name.clone(), worst));
    }
    let max_rel_error = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(GradCheck { groups, max_rel_error, n_checked })
}
