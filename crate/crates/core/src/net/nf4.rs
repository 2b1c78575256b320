//! 4-bit NormalFloat blockwise quantization of frozen weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const NF4_BLOCK: usize = 64;

/// The 16 NormalFloat levels (bitsandbytes `NF4` table), ascending.
pub const NF4_LEVELS: [f32; 16] = [
    -1.0,
    -0.696_192_8,
    -0.525_073_05,
    -0.394_917_5,
    -0.284_441_38,
    -0.184_773_43,
    -0.091_050_036,
    0.0,
    0.079_580_3,
    0.160_930_2,
    0.246_112_3,
    0.337_915_24,
    0.440_709_83,
    0.562_617,
    0.722_956_84,
    1.0,
];

pub const NF4_ZERO_CODE: u8 = 7;

/// Half of the widest gap between adjacent levels, found by scanning.
pub fn nf4_half_max_gap() -> f32 {
    NF4_LEVELS.windows(2).map(|w| w[1] - w[0]).fold(0.0, f32::max) / 2.0
}

/// Index of the nearest level to `x` (ties go to the lower level).
pub fn nearest_code(x: f32) -> u8 {
    // midpoints between adjacent levels partition the line
    let mut code = 0u8;
    for i in 0..15 {
        let mid = 0.5 * (NF4_LEVELS[i] + NF4_LEVELS[i + 1]);
        if x > mid {
            code = i as u8 + 1;
        }
    }
    code
}

/// Packed 4-bit codes plus one absmax scale per 64-element block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeight {
    pub rows: usize,
    pub cols: usize,
    /// Two codes per byte, low nibble first, row-major element order.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
}

impl QuantizedWeight {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code(&self, i: usize) -> u8 {
        let b = self.codes[i / 2];
        if i % 2 == 0 {
            b & 0x0f
        } else {
            b >> 4
        }
    }
}

pub fn quantize_nf4(w: &Array2<f32>) -> QuantizedWeight {
    let (rows, cols) = w.dim();
    let flat: Vec<f32> = w.iter().copied().collect();
    let mut codes = vec![0u8; flat.len().div_ceil(2)];
    let mut scales = Vec::with_capacity(flat.len().div_ceil(NF4_BLOCK));
    for (bi, block) in flat.chunks(NF4_BLOCK).enumerate() {
        let scale = block.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        scales.push(scale);
        for (j, &x) in block.iter().enumerate() {
            let c = if scale == 0.0 { NF4_ZERO_CODE } else { nearest_code(x / scale) };
            let i = bi * NF4_BLOCK + j;
            codes[i / 2] |= if i % 2 == 0 { c } else { c << 4 };
        }
    }
    QuantizedWeight { rows, cols, codes, scales }
}

pub fn dequantize_nf4(q: &QuantizedWeight) -> Array2<f32> {
    let data = (0..q.len()).map(|i| NF4_LEVELS[q.code(i) as usize] * q.scales[i / NF4_BLOCK]).collect();
    Array2::from_shape_vec((q.rows, q.cols), data).expect("shape matches code count")
}
