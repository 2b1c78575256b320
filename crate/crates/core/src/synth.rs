//! Synthetic session corpus with the recorded corpus's duration statistics and
//! phase structure.
//!
//! Each region of a session (filler, P1, P2, P3) carries a distinct band of
//! tones, with a linear crossfade across every boundary, and the transcript
//! holds marker sentences next to each boundary among filler chatter. Audio is
//! a pure function of the sample index, so windows render without
//! materializing the whole session.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    transcript_to_string, AudioBuffer, AudioSource, IngestError, Speaker, TranscriptSentence, TARGET_RATE,
};
use crate::session::{save_manifest, ManifestError, PhaseAnnotation, PhaseKind, Provenance, Session};

/// Frequency band (Hz) of tones for one region type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Audio signature per region type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureSpec {
    pub filler: Band,
    pub phases: [Band; 3],
    /// Minimum distance, in mel bins, between the dominant bins of adjacent
    /// regions.
    pub min_separation_bins: usize,
    pub tones_per_band: usize,
    pub amplitude: f64,
    pub noise_level: f64,
}

impl Default for SignatureSpec {
    fn default() -> Self {
        Self {
            filler: Band { lo: 250.0, hi: 450.0 },
            phases: [
                Band { lo: 700.0, hi: 1000.0 },
                Band { lo: 1400.0, hi: 2000.0 },
                Band { lo: 2800.0, hi: 3800.0 },
            ],
            min_separation_bins: 4,
            tones_per_band: 8,
            amplitude: 0.6,
            noise_level: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sessions: usize,
    pub duration_mean_s: f64,
    pub duration_std_s: f64,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    /// Nominal P1, P2, P3 lengths in minutes, rescaled to fit each session.
    pub phase_minutes: [f64; 3],
    /// Relative jitter applied to each nominal phase length.
    pub phase_jitter: f64,
    pub crossfade_s: f64,
    pub signature: SignatureSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sessions: 68,
            duration_mean_s: 3947.84,
            duration_std_s: 935.53,
            duration_min_s: 1170.75,
            duration_max_s: 5393.86,
            phase_minutes: [10.0, 50.0, 10.0],
            phase_jitter: 0.2,
            crossfade_s: 2.0,
            signature: SignatureSpec::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("session {index}: phases do not fit in {duration:.2} s")]
    Layout { index: usize, duration: f64 },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shortest phase the layout accepts.
const MIN_PHASE_S: f64 = 10.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_sessions == 0 {
            return bad("n_sessions must be positive");
        }
        if !(self.duration_min_s > 0.0
            && self.duration_min_s <= self.duration_mean_s
            && self.duration_mean_s <= self.duration_max_s)
        {
            return bad("require 0 < min <= mean <= max");
        }
        if !(self.duration_std_s >= 0.0) {
            return bad("std must be non-negative");
        }
        if self.phase_minutes.iter().any(|m| !(*m > 0.0)) {
            return bad("phase lengths must be positive");
        }
        if !(0.0..1.0).contains(&self.phase_jitter) {
            return bad("phase_jitter must be in [0, 1)");
        }
        if !(self.crossfade_s >= 0.0 && self.crossfade_s < MIN_PHASE_S) {
            return bad("crossfade must be in [0, 10) s");
        }
        if self.signature.tones_per_band == 0 {
            return bad("tones_per_band must be positive");
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-session seed derived from the corpus seed.
pub fn session_seed(corpus_seed: u64, index: usize) -> u64 {
    splitmix(corpus_seed ^ splitmix(index as u64))
}

/// Truncated normal by rejection; degenerate std returns the mean.
fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(lo, hi);
    }
    let n = Normal::new(mean, std).expect("valid normal");
    loop {
        let x = n.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

fn centi(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Tone rotation restarts from an exact phase every this many samples.
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy)]
struct Tone {
    freq: f64,
    phase: f64,
}

/// Procedural audio of one session.
#[derive(Debug, Clone)]
pub struct SessionSignal {
    duration_s: f64,
    n_samples: usize,
    /// Region boundaries in seconds, sorted; region i spans
    /// `[edges[i-1], edges[i])` with band `bands[i]`.
    edges: Vec<f64>,
    bands: Vec<usize>,
    tones: Vec<Vec<Tone>>,
    crossfade_s: f64,
    amplitude: f64,
    noise_level: f64,
    noise_seed: u64,
}

impl SessionSignal {
    fn region_of(&self, t: f64) -> usize {
        self.edges.partition_point(|&e| e <= t)
    }

    /// Sum of a band's tones over `len` samples from absolute index `a`,
    /// advancing each tone by rotation from an exact anchor at `a`.
    fn band_block(&self, band: usize, a: usize, len: usize, acc: &mut Vec<f64>) {
        acc.clear();
        acc.resize(len, 0.0);
        let sr = TARGET_RATE as f64;
        let tones = &self.tones[band];
        for k in tones {
            let (mut s, mut c) = (2.0 * PI * k.freq * (a as f64 / sr) + k.phase).sin_cos();
            let (ds, dc) = (2.0 * PI * k.freq / sr).sin_cos();
            for v in acc.iter_mut() {
                *v += s;
                (s, c) = (s * dc + c * ds, c * dc - s * ds);
            }
        }
        let inv = 1.0 / tones.len() as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }

    /// Writes samples `start..start + out.len()` (16 kHz, before 16-bit
    /// quantization). Blocks are anchored at multiples of `BLOCK`, so a
    /// sample's value depends only on its index.
    pub fn fill(&self, start: usize, out: &mut [f32]) {
        let sr = TARGET_RATE as f64;
        let half = 0.5 * self.crossfade_s;
        let end = start + out.len();
        let mut blocks: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut n = start;
        while n < end {
            let a = n / BLOCK * BLOCK;
            let b = (a + BLOCK).min(end);
            if n >= self.n_samples {
                out[n - start..].iter_mut().for_each(|v| *v = 0.0);
                break;
            }
            let r0 = self.region_of((a as f64 / sr - half).max(0.0));
            let r1 = self.region_of((a + BLOCK) as f64 / sr + half);
            for (slot, r) in (r0..=r1).enumerate() {
                if blocks.len() <= slot {
                    blocks.push((0, Vec::new()));
                }
                blocks[slot].0 = self.bands[r];
                self.band_block(self.bands[r], a, BLOCK, &mut blocks[slot].1);
            }
            let value = |band: usize, m: usize| -> f64 {
                let slot = blocks[..=r1 - r0].iter().position(|(bd, _)| *bd == band).expect("band rendered for block");
                blocks[slot].1[m - a]
            };
            for m in n..b {
                if m >= self.n_samples {
                    out[m - start] = 0.0;
                    continue;
                }
                let t = m as f64 / sr;
                let r = self.region_of(t);
                // nearest boundary on either side
                let mut v = None;
                if half > 0.0 {
                    if r > 0 && t - self.edges[r - 1] < half {
                        let x = (t - self.edges[r - 1] + half) / (2.0 * half);
                        v = Some((1.0 - x) * value(self.bands[r - 1], m) + x * value(self.bands[r], m));
                    } else if r < self.edges.len() && self.edges[r] - t <= half {
                        let x = (t - self.edges[r] + half) / (2.0 * half);
                        v = Some((1.0 - x) * value(self.bands[r], m) + x * value(self.bands[r + 1], m));
                    }
                }
                let tonal = v.unwrap_or_else(|| value(self.bands[r], m));
                let noise = (splitmix(self.noise_seed ^ m as u64) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
                out[m - start] = (self.amplitude * tonal + self.noise_level * noise) as f32;
            }
            n = b;
        }
    }

    /// Sample `n`; prefer [`SessionSignal::fill`] for ranges.
    pub fn sample(&self, n: usize) -> f32 {
        let mut v = [0.0];
        self.fill(n, &mut v);
        v[0]
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Whole-session buffer. Large: about 63 M samples for an hour.
    pub fn render(&self) -> AudioBuffer {
        let mut out = vec![0.0; self.n_samples];
        self.fill(0, &mut out);
        AudioBuffer::new(out, TARGET_RATE)
    }
}

impl AudioSource for SessionSignal {
    fn duration_s(&self) -> f64 {
        self.duration_s
    }

    fn window(&self, t0: f64, dur: f64) -> Result<AudioBuffer, IngestError> {
        if !(dur > 0.0) {
            return Err(IngestError::InvalidDuration(dur));
        }
        let sr = TARGET_RATE as f64;
        let start = (t0.max(0.0) * sr).round() as usize;
        let len = (dur * sr).round() as usize;
        let mut out = vec![0.0; len];
        self.fill(start, &mut out);
        Ok(AudioBuffer::new(out, TARGET_RATE))
    }
}

/// A generated session with its procedural audio and transcript.
#[derive(Debug, Clone)]
pub struct SynthSession {
    pub session: Session,
    pub transcript: Vec<TranscriptSentence>,
    pub signal: SessionSignal,
}

const MARKERS: [[&str; 2]; 3] = [
    [
        "[P1 start] Let's go over the plan for imaginal exposure today.",
        "[P1 end] Any questions before we begin?",
    ],
    [
        "[P2 start] Close your eyes and begin recounting the memory.",
        "[P2 end] Okay, you can open your eyes now.",
    ],
    [
        "[P3 start] Let's talk about how that went for you.",
        "[P3 end] Let's set your homework for this week.",
    ],
];

const FILLER: [&str; 10] = [
    "Mm-hmm.",
    "I see.",
    "How are you feeling right now?",
    "It was a hard week.",
    "Take your time.",
    "Yeah, I think so.",
    "Can you say more about that?",
    "I don't know.",
    "That makes sense.",
    "Okay.",
];

fn build_transcript(rng: &mut ChaCha8Rng, duration: f64, phases: &[(f64, f64); 3]) -> Vec<TranscriptSentence> {
    let mut markers = Vec::new();
    for (i, &(start, stop)) in phases.iter().enumerate() {
        let s = start + rng.random_range(0.1..0.8);
        let len = rng.random_range(2.0..4.0);
        markers.push(TranscriptSentence {
            start_s: centi(s),
            end_s: centi(s + len),
            speaker: Speaker::Therapist,
            text: MARKERS[i][0].into(),
        });
        let e = stop - rng.random_range(0.1..0.8);
        let len = rng.random_range(2.0..4.0);
        markers.push(TranscriptSentence {
            start_s: centi(e - len),
            end_s: centi(e),
            speaker: Speaker::Therapist,
            text: MARKERS[i][1].into(),
        });
    }
    markers.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

    let mut out = markers.clone();
    let mut cursor = 0.0;
    let mut speaker = Speaker::Client;
    loop {
        let s = cursor + rng.random_range(1.0..4.0);
        let e = s + rng.random_range(1.5..5.0);
        if e > duration {
            break;
        }
        if let Some(m) = markers.iter().find(|m| s < m.end_s + 0.5 && e > m.start_s - 0.5) {
            cursor = m.end_s;
            continue;
        }
        speaker = if speaker == Speaker::Client { Speaker::Therapist } else { Speaker::Client };
        out.push(TranscriptSentence {
            start_s: centi(s),
            end_s: centi(e),
            speaker,
            text: FILLER[rng.random_range(0..FILLER.len())].into(),
        });
        cursor = e;
    }
    out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    out
}

/// Generates session `index` of the corpus described by `cfg`.
pub fn generate_session(cfg: &SynthConfig, index: usize) -> Result<SynthSession, SynthError> {
    cfg.validate()?;
    let seed = session_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = centi(truncated_normal(
        &mut rng,
        cfg.duration_mean_s,
        cfg.duration_std_s,
        cfg.duration_min_s,
        cfg.duration_max_s,
    ));

    let lead = duration * rng.random_range(0.01..0.05);
    let gap = duration * rng.random_range(0.01..0.04);
    let tail = duration * rng.random_range(0.02..0.08);
    let avail = duration - lead - gap - tail;
    let raw: Vec<f64> = cfg
        .phase_minutes
        .iter()
        .map(|m| {
            let j = if cfg.phase_jitter > 0.0 { rng.random_range(-cfg.phase_jitter..cfg.phase_jitter) } else { 0.0 };
            m * 60.0 * (1.0 + j)
        })
        .collect();
    let scale = (avail / raw.iter().sum::<f64>()).min(1.0);
    let len: Vec<f64> = raw.iter().map(|r| r * scale).collect();
    if len.iter().any(|&l| l < MIN_PHASE_S) || avail <= 0.0 {
        return Err(SynthError::Layout { index, duration });
    }
    let p1 = (centi(lead), centi(lead + len[0]));
    let p2s = centi(p1.1 + gap);
    let p2 = (p2s, centi(p2s + len[1]));
    let p3 = (p2.1, centi(p2.1 + len[2]));
    if p3.1 >= duration {
        return Err(SynthError::Layout { index, duration });
    }
    let phases = [p1, p2, p3];

    let sig = &cfg.signature;
    let all_bands = [sig.filler, sig.phases[0], sig.phases[1], sig.phases[2]];
    let tones = all_bands
        .iter()
        .map(|b| {
            (0..sig.tones_per_band)
                .map(|k| {
                    let slot = (b.hi - b.lo) / sig.tones_per_band as f64;
                    Tone {
                        freq: b.lo + slot * (k as f64 + rng.random_range(0.2..0.8)),
                        phase: rng.random_range(0.0..2.0 * PI),
                    }
                })
                .collect()
        })
        .collect();
    // filler, P1, filler, P2, P3, filler
    let edges = vec![p1.0, p1.1, p2.0, p2.1, p3.1];
    let bands = vec![0, 1, 0, 2, 3, 0];
    let transcript = build_transcript(&mut rng, duration, &phases);

    let id = format!("synth-{index:04}");
    let session = Session {
        id: id.clone(),
        audio_path: PathBuf::from(format!("audio/{id}.wav")),
        duration_s: duration,
        sample_rate: TARGET_RATE,
        annotations: PhaseKind::ALL
            .iter()
            .zip(&phases)
            .map(|(&p, &(a, b))| PhaseAnnotation::new(p, a, b, Provenance::SyntheticGroundTruth))
            .collect(),
        transcript_path: PathBuf::from(format!("transcripts/{id}.json")),
    };
    let signal = SessionSignal {
        duration_s: duration,
        n_samples: (duration * TARGET_RATE as f64).round() as usize,
        edges,
        bands,
        tones,
        crossfade_s: cfg.crossfade_s,
        amplitude: sig.amplitude,
        noise_level: sig.noise_level,
        noise_seed: splitmix(seed ^ 0x5eed),
    };
    Ok(SynthSession { session, transcript, signal })
}

/// Sample statistics of session durations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub n: usize,
    pub total_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl DurationStats {
    pub fn of(durations: &[f64]) -> Self {
        let n = durations.len();
        let total: f64 = durations.iter().sum();
        let mean = total / n as f64;
        let var = if n > 1 {
            durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            total_s: total,
            mean_s: mean,
            std_s: var.sqrt(),
            min_s: durations.iter().copied().fold(f64::INFINITY, f64::min),
            max_s: durations.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub struct SynthCorpus {
    pub sessions: Vec<SynthSession>,
    pub stats: DurationStats,
}

impl SynthCorpus {
    pub fn manifest(&self) -> Vec<Session> {
        self.sessions.iter().map(|s| s.session.clone()).collect()
    }
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    if cfg.n_sessions < 3 {
        return Err(SynthError::Config("a corpus needs at least 3 sessions".into()));
    }
    let sessions = (0..cfg.n_sessions).map(|i| generate_session(cfg, i)).collect::<Result<Vec<_>, _>>()?;
    let durations: Vec<f64> = sessions.iter().map(|s| s.session.duration_s).collect();
    Ok(SynthCorpus { stats: DurationStats::of(&durations), sessions })
}

/// Writes `audio/<id>.wav`, `transcripts/<id>.json` and `manifest.json` under
/// `out`. Audio streams to disk sample by sample.
pub fn write_corpus(corpus: &SynthCorpus, out: &Path) -> Result<PathBuf, SynthError> {
    std::fs::create_dir_all(out.join("audio"))?;
    std::fs::create_dir_all(out.join("transcripts"))?;
    for s in &corpus.sessions {
        write_session_audio(&s.signal, &out.join(&s.session.audio_path))?;
        std::fs::write(out.join(&s.session.transcript_path), transcript_to_string(&s.transcript))?;
    }
    let manifest = out.join("manifest.json");
    save_manifest(&corpus.manifest(), &manifest)?;
    Ok(manifest)
}

fn write_session_audio(sig: &SessionSignal, path: &Path) -> Result<(), SynthError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: TARGET_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => SynthError::Io(io),
        other => SynthError::Io(std::io::Error::other(other.to_string())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    let mut chunk = vec![0.0f32; 1 << 16];
    for start in (0..sig.n_samples).step_by(chunk.len()) {
        let len = chunk.len().min(sig.n_samples - start);
        sig.fill(start, &mut chunk[..len]);
        for &x in &chunk[..len] {
            w.write_sample((x.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(to_io)?;
        }
    }
    w.finalize().map_err(to_io)
}
