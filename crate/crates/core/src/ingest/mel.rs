//! Log-mel filterbank energies: 25 ms Hann frames, 10 ms hop, 64 bands.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use super::{AudioBuffer, IngestError, TARGET_RATE};

pub const N_MELS: usize = 64;
/// Samples per frame at 16 kHz (25 ms).
pub const FRAME_LEN: usize = 400;
/// Samples between frame starts at 16 kHz (10 ms).
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
/// Added to band power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// `frames x N_MELS` log band energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrameMatrix {
    pub data: Array2<f32>,
}

impl MelFrameMatrix {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn frame_count_for(samples: usize) -> usize {
        if samples < FRAME_LEN {
            0
        } else {
            (samples - FRAME_LEN) / FRAME_HOP + 1
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over the `FFT_SIZE / 2 + 1` power bins,
/// spanning 0 Hz to Nyquist. Returns `(weights, center_hz)`.
pub fn mel_filterbank() -> (Array2<f64>, Vec<f64>) {
    let n_bins = FFT_SIZE / 2 + 1;
    let nyquist = TARGET_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect();
    let mut w = Array2::zeros((N_MELS, n_bins));
    for m in 0..N_MELS {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * TARGET_RATE as f64 / FFT_SIZE as f64;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            w[[m, k]] = v;
        }
    }
    (w, edges[1..=N_MELS].to_vec())
}

/// Log-mel features of 16 kHz audio. Deterministic and allocation-bounded by
/// the frame count.
pub fn log_mel(a: &AudioBuffer) -> Result<MelFrameMatrix, IngestError> {
    if a.sample_rate != TARGET_RATE {
        return Err(IngestError::UnsupportedRate(a.sample_rate));
    }
    let n = a.samples.len();
    if n < FRAME_LEN {
        return Err(IngestError::TooShort(n));
    }
    let frames = MelFrameMatrix::frame_count_for(n);
    let (bank, _) = mel_filterbank();
    // Sparse view of the filterbank: (first bin, weights).
    let sparse: Vec<(usize, Vec<f32>)> = bank
        .outer_iter()
        .map(|row| {
            let first = row.iter().position(|&v| v > 0.0).unwrap_or(0);
            let last = row.iter().rposition(|&v| v > 0.0).map_or(first, |l| l + 1);
            (first, row.slice(ndarray::s![first..last]).iter().map(|&v| v as f32).collect())
        })
        .collect();
    let window: Vec<f32> = (0..FRAME_LEN)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / FRAME_LEN as f64).cos()) as f32)
        .collect();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0f32, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0f32; FFT_SIZE / 2 + 1];
    let mut out = Array2::<f32>::zeros((frames, crate::ingest::N_MELS));
    for (f, mut row) in out.outer_iter_mut().enumerate() {
        let frame = &a.samples[f * FRAME_HOP..f * FRAME_HOP + FRAME_LEN];
        for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(s * w, 0.0);
        }
        buf[FRAME_LEN..].iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (v, (first, weights)) in row.iter_mut().zip(&sparse) {
            let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| (w * p) as f64).sum();
            *v = (e + LOG_FLOOR).ln() as f32;
        }
    }
    Ok(MelFrameMatrix { data: out })
}
