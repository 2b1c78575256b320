use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample_to_16k, slice_audio, AudioBuffer, IngestError, TARGET_RATE};

fn unsupported(e: hound::Error) -> IngestError {
    match e {
        hound::Error::IoError(io) => IngestError::Io(io),
        other => IngestError::UnsupportedFormat(other.to_string()),
    }
}

/// Reads a PCM WAV file (16-bit int or 32-bit float, mono or stereo) and mixes
/// it down to mono.
pub fn load_wav(path: &Path) -> Result<AudioBuffer, IngestError> {
    let reader = WavReader::open(path).map_err(unsupported)?;
    decode(reader, usize::MAX)
}

/// Half-open range `[t0, t0 + dur)` of a file, resampled to 16 kHz, with the
/// same sample-grid rule as [`slice_audio`] and zeros past the end. 16 kHz
/// files are read by seeking; other rates are decoded whole. No peak
/// normalization is applied.
pub fn read_wav_range(path: &Path, t0: f64, dur: f64) -> Result<AudioBuffer, IngestError> {
    if !(dur > 0.0) {
        return Err(IngestError::InvalidDuration(dur));
    }
    let mut reader = WavReader::open(path).map_err(unsupported)?;
    if reader.spec().sample_rate != TARGET_RATE {
        return slice_audio(&resample_to_16k(&decode(reader, usize::MAX)?)?, t0, dur);
    }
    let sr = TARGET_RATE as f64;
    let start = (t0.max(0.0) * sr).round() as usize;
    let len = (dur * sr).round() as usize;
    let total = reader.duration() as usize;
    let mut out = vec![0.0f32; len];
    if start < total {
        reader.seek(start as u32).map_err(IngestError::Io)?;
        let got = decode(reader, len.min(total - start))?;
        out[..got.samples.len()].copy_from_slice(&got.samples);
    }
    Ok(AudioBuffer::new(out, TARGET_RATE))
}

/// Like [`load_wav`] over an in-memory or streamed source.
pub fn read_wav<R: Read + Seek>(src: R) -> Result<AudioBuffer, IngestError> {
    decode(WavReader::new(src).map_err(unsupported)?, usize::MAX)
}

/// Decodes at most `max_frames` frames from the reader's position.
fn decode<R: Read>(mut reader: WavReader<R>, max_frames: usize) -> Result<AudioBuffer, IngestError> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(IngestError::UnsupportedFormat(format!("{channels} channels")));
    }
    let n = max_frames.saturating_mul(channels);
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .take(n)
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(unsupported)?,
        (SampleFormat::Float, 32) => {
            reader.samples::<f32>().take(n).collect::<Result<_, _>>().map_err(unsupported)?
        }
        (fmt, bits) => {
            return Err(IngestError::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    };
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

fn spec16(sample_rate: u32) -> WavSpec {
    WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int }
}

fn to_i16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Writes 16-bit mono PCM.
pub fn write_wav(a: &AudioBuffer, path: &Path) -> Result<(), IngestError> {
    let mut w = WavWriter::create(path, spec16(a.sample_rate)).map_err(unsupported)?;
    for &s in &a.samples {
        w.write_sample(to_i16(s)).map_err(unsupported)?;
    }
    w.finalize().map_err(unsupported)
}

/// 16-bit mono PCM WAV bytes.
pub fn encode_wav(a: &AudioBuffer) -> Vec<u8> {
    let mut cur = Cursor::new(Vec::with_capacity(44 + 2 * a.samples.len()));
    {
        let mut w = WavWriter::new(&mut cur, spec16(a.sample_rate)).expect("in-memory writer");
        for &s in &a.samples {
            w.write_sample(to_i16(s)).expect("in-memory write");
        }
        w.finalize().expect("in-memory finalize");
    }
    cur.into_inner()
}
