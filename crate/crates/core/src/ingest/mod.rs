//! Audio loading, resampling, normalization, transcript parsing and log-mel
//! features.

mod mel;
mod resample;
mod transcript;
mod wav;

use thiserror::Error;

pub use mel::{log_mel, mel_filterbank, MelFrameMatrix, FFT_SIZE, FRAME_HOP, FRAME_LEN, LOG_FLOOR, N_MELS};
pub use resample::resample_to_16k;
pub use transcript::{
    excerpt_for_window, parse_transcript, parse_transcript_str, transcript_to_string, Speaker,
    TranscriptSentence,
};
pub use wav::{encode_wav, load_wav, read_wav, read_wav_range, write_wav};

pub const TARGET_RATE: u32 = 16_000;

/// Peak level after [`peak_normalize`].
pub const PEAK_LEVEL: f32 = 0.95;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported sample rate {0} Hz (expected 16000, 44100 or 48000)")]
    UnsupportedRate(u32),
    #[error("window duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("audio too short for one frame: {0} samples")]
    TooShort(usize),
    #[error("transcript parse error: {0}")]
    Parse(String),
}

/// Mono PCM samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Anything that can render a fixed-duration 16 kHz window of a session.
///
/// Implemented by decoded buffers and by the synthetic generator, which
/// renders windows procedurally without materializing whole sessions.
pub trait AudioSource {
    fn duration_s(&self) -> f64;
    fn window(&self, t0: f64, dur: f64) -> Result<AudioBuffer, IngestError>;
}

impl AudioSource for AudioBuffer {
    fn duration_s(&self) -> f64 {
        AudioBuffer::duration_s(self)
    }

    fn window(&self, t0: f64, dur: f64) -> Result<AudioBuffer, IngestError> {
        slice_audio(self, t0, dur)
    }
}

/// Scales so the peak magnitude is [`PEAK_LEVEL`]. Silence is returned as is.
pub fn peak_normalize(a: &AudioBuffer) -> AudioBuffer {
    let peak = a.peak();
    if peak == 0.0 {
        return a.clone();
    }
    let gain = PEAK_LEVEL / peak;
    AudioBuffer::new(a.samples.iter().map(|s| s * gain).collect(), a.sample_rate)
}

/// Half-open window `[t0, t0 + dur)` on the sample grid. The start sample is
/// `round(t0 * sr)` and the length `round(dur * sr)`; anything past the end of
/// the buffer is zero.
pub fn slice_audio(a: &AudioBuffer, t0: f64, dur: f64) -> Result<AudioBuffer, IngestError> {
    if !(dur > 0.0) {
        return Err(IngestError::InvalidDuration(dur));
    }
    let sr = a.sample_rate as f64;
    let start = (t0.max(0.0) * sr).round() as usize;
    let len = (dur * sr).round() as usize;
    let mut out = vec![0.0f32; len];
    if start < a.samples.len() {
        let end = (start + len).min(a.samples.len());
        out[..end - start].copy_from_slice(&a.samples[start..end]);
    }
    Ok(AudioBuffer::new(out, a.sample_rate))
}

/// Decode, resample to 16 kHz and peak-normalize.
pub fn load_preprocessed(path: &std::path::Path) -> Result<AudioBuffer, IngestError> {
    let raw = load_wav(path)?;
    Ok(peak_normalize(&resample_to_16k(&raw)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|i| i as f32 / n as f32).collect(), TARGET_RATE)
    }

    #[test]
    fn normalize_scales_peak() {
        let a = AudioBuffer::new(vec![0.25, -0.5, 0.1], TARGET_RATE);
        let b = peak_normalize(&a);
        assert!((b.samples[1] + 0.95).abs() < 1e-7);
        assert!((b.samples[0] - 0.25 * 1.9).abs() < 1e-7);
    }

    #[test]
    fn normalize_silence_and_fixed_point() {
        let z = AudioBuffer::new(vec![0.0; 10], TARGET_RATE);
        assert_eq!(peak_normalize(&z), z);
        let a = AudioBuffer::new(vec![0.95, -0.3], TARGET_RATE);
        let b = peak_normalize(&a);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn slice_lengths_and_padding() {
        let a = ramp(60 * 16000);
        assert_eq!(slice_audio(&a, 0.0, 30.0).unwrap().samples.len(), 480_000);
        let tail = slice_audio(&a, 50.0, 30.0).unwrap();
        assert_eq!(tail.samples.len(), 480_000);
        assert!(tail.samples[160_000..].iter().all(|&s| s == 0.0));
        assert_eq!(tail.samples[0], a.samples[800_000]);
        assert!(matches!(slice_audio(&a, 0.0, 0.0), Err(IngestError::InvalidDuration(_))));
    }

    #[test]
    fn slice_at_fractional_start() {
        let a = ramp(2_100_000);
        let w = slice_audio(&a, 98.33, 30.0).unwrap();
        assert_eq!(w.samples[0], a.samples[1_573_280]);
        assert_eq!(w.samples[479_999], a.samples[2_053_279]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adjacent_slices_concatenate(start in 0usize..4000, n1 in 1usize..3000, n2 in 1usize..3000) {
                let a = ramp(6000);
                let sr = TARGET_RATE as f64;
                let (t0, d1, d2) = (start as f64 / sr, n1 as f64 / sr, n2 as f64 / sr);
                let mut joined = slice_audio(&a, t0, d1).unwrap().samples;
                joined.extend(slice_audio(&a, t0 + d1, d2).unwrap().samples);
                prop_assert_eq!(joined, slice_audio(&a, t0, d1 + d2).unwrap().samples);
            }
        }
    }
}
