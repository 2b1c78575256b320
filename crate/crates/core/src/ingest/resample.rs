//! Windowed-sinc polyphase resampler to 16 kHz.

use std::f64::consts::PI;

use super::{AudioBuffer, IngestError, TARGET_RATE};

/// Anti-aliasing cutoff as a fraction of the target Nyquist frequency.
const CUTOFF_FRACTION: f64 = 0.9;
/// Kernel half-width in zero crossings of the cutoff sinc.
const ZERO_CROSSINGS: f64 = 24.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let t = 0.5 * (x + 1.0);
    0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos()
}

/// Resamples 44.1 or 48 kHz input to 16 kHz. 16 kHz input is returned as is.
///
/// Output length is `round(len * 16000 / in_rate)`.
pub fn resample_to_16k(a: &AudioBuffer) -> Result<AudioBuffer, IngestError> {
    match a.sample_rate {
        TARGET_RATE => return Ok(a.clone()),
        44_100 | 48_000 => {}
        other => return Err(IngestError::UnsupportedRate(other)),
    }
    let in_rate = a.sample_rate as u64;
    let g = gcd(in_rate, TARGET_RATE as u64);
    let (up, down) = (TARGET_RATE as u64 / g, in_rate / g);

    // cutoff in cycles per input sample
    let fc = CUTOFF_FRACTION * 0.5 * TARGET_RATE as f64 / in_rate as f64;
    let half_width = ZERO_CROSSINGS / (2.0 * fc);
    let taps = 2 * half_width.ceil() as usize + 1;
    let reach = half_width.ceil() as i64;

    // One filter per fractional input phase p/up.
    let phases: Vec<Vec<f32>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut h: Vec<f64> = (0..taps)
                .map(|k| {
                    let dt = (k as i64 - reach) as f64 - frac;
                    if dt.abs() > half_width {
                        return 0.0;
                    }
                    let x = 2.0 * fc * dt;
                    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                    2.0 * fc * sinc * blackman(dt / half_width)
                })
                .collect();
            let sum: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= sum);
            h.into_iter().map(|v| v as f32).collect()
        })
        .collect();

    let n_in = a.samples.len();
    let n_out = ((n_in as f64) * TARGET_RATE as f64 / in_rate as f64).round() as usize;
    let x = &a.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let h = &phases[(pos % up) as usize];
        let first = base - reach;
        let mut acc = 0.0f32;
        if first >= 0 && (first as usize + taps) <= n_in {
            let seg = &x[first as usize..first as usize + taps];
            acc = seg.iter().zip(h).map(|(s, c)| s * c).sum();
        } else {
            for (k, c) in h.iter().enumerate() {
                let idx = first + k as i64;
                if idx >= 0 && (idx as usize) < n_in {
                    acc += x[idx as usize] * c;
                }
            }
        }
        out.push(acc);
    }
    Ok(AudioBuffer::new(out, TARGET_RATE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, seconds: f64) -> AudioBuffer {
        let n = (rate as f64 * seconds) as usize;
        let s = (0..n).map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32).collect();
        AudioBuffer::new(s, rate)
    }

    /// Frequency from the zero-crossing count, ignoring the filter edges.
    fn zero_crossing_freq(a: &AudioBuffer) -> f64 {
        let edge = 400;
        let s = &a.samples[edge..a.samples.len() - edge];
        let crossings = s.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
        crossings as f64 / 2.0 / (s.len() as f64 / a.sample_rate as f64)
    }

    #[test]
    fn lengths_follow_rate_ratio() {
        let a = AudioBuffer::new(vec![0.1; 48000], 48000);
        assert_eq!(resample_to_16k(&a).unwrap().samples.len(), 16000);
        let b = AudioBuffer::new(vec![0.1; 44100], 44100);
        assert_eq!(resample_to_16k(&b).unwrap().samples.len(), 16000);
        let c = AudioBuffer::new(vec![0.3; 777], 16000);
        assert_eq!(resample_to_16k(&c).unwrap(), c);
    }

    #[test]
    fn other_rates_are_rejected() {
        let a = AudioBuffer::new(vec![0.0; 10], 22050);
        assert!(matches!(resample_to_16k(&a), Err(IngestError::UnsupportedRate(22050))));
    }

    #[test]
    fn tones_keep_their_frequency() {
        for rate in [44100, 48000] {
            for f in [440.0, 1000.0, 3150.0, 6900.0] {
                let out = resample_to_16k(&tone(f, rate, 2.0)).unwrap();
                let measured = zero_crossing_freq(&out);
                assert!((measured - f).abs() < 1.0, "{rate} Hz input, {f} Hz tone measured {measured}");
            }
        }
    }

    #[test]
    fn passband_gain_is_unity_and_alias_band_is_suppressed() {
        let pass = resample_to_16k(&tone(1000.0, 48000, 1.0)).unwrap();
        let peak = pass.samples[500..15500].iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 0.01, "{peak}");
        // 12 kHz would alias to 4 kHz
        let stop = resample_to_16k(&tone(12000.0, 48000, 1.0)).unwrap();
        let peak = stop.samples[500..15500].iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!(peak < 0.005, "{peak}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn duration_is_preserved(len in 1usize..20000, rate in prop::sample::select(vec![44100u32, 48000])) {
                let a = AudioBuffer::new(vec![0.0; len], rate);
                let out = resample_to_16k(&a).unwrap();
                let diff = (out.samples.len() as f64 / 16000.0 - len as f64 / rate as f64).abs();
                prop_assert!(diff < 1.0 / 16000.0);
            }
        }
    }
}
