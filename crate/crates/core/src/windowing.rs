//! Window placement around phase boundaries, offset normalization, prompt
//! construction and training-example assembly.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    self, excerpt_for_window, log_mel, AudioSource, IngestError, MelFrameMatrix, Speaker,
    TranscriptSentence,
};
use crate::session::{PhaseKind, Session};

/// Window durations used throughout (seconds).
pub const WINDOW_DURATIONS: [f64; 3] = [30.0, 60.0, 120.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BoundaryKind {
    Start,
    End,
}

impl BoundaryKind {
    pub const ALL: [BoundaryKind; 2] = [BoundaryKind::Start, BoundaryKind::End];

    pub fn word(self) -> &'static str {
        match self {
            BoundaryKind::Start => "START",
            BoundaryKind::End => "END",
        }
    }
}

impl fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryKind::Start => "Start",
            BoundaryKind::End => "End",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("boundary {t_abs} s lies outside window [{t_start}, {t_start} + {duration}]")]
    OutOfWindow { t_abs: f64, t_start: f64, duration: f64 },
    #[error("window duration {duration} s exceeds session duration {session} s")]
    WindowLargerThanSession { duration: f64, session: f64 },
    #[error("window duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("session {session} has no usable {phase} label")]
    MissingLabel { session: String, phase: PhaseKind },
}

#[derive(Debug, Error)]
pub enum ExampleError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Boundary position as a fraction of the window: `(t_abs - t_start) / D`.
pub fn normalize_offset(t_abs: f64, t_start: f64, duration: f64) -> Result<f64, WindowError> {
    if !(duration > 0.0) {
        return Err(WindowError::InvalidDuration(duration));
    }
    let o = (t_abs - t_start) / duration;
    // tolerate representation error of t_start + D
    let slack = 1e-12;
    if !(o >= -slack && o <= 1.0 + slack) {
        return Err(WindowError::OutOfWindow { t_abs, t_start, duration });
    }
    Ok(o.clamp(0.0, 1.0))
}

/// Absolute time of offset `o` in the window: `t_start + o * D`.
pub fn denormalize_offset(o: f64, t_start: f64, duration: f64) -> f64 {
    t_start + o * duration
}

/// A placed window and the boundary's normalized offset inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub t_start: f64,
    pub duration: f64,
    pub target: f64,
}

/// Places a window of length `duration` so the boundary sits at fraction `u`,
/// then clamps the window into the session and recomputes the target.
pub fn sample_window(t_abs: f64, duration: f64, session_dur: f64, u: f64) -> Result<Placement, WindowError> {
    if !(duration > 0.0) {
        return Err(WindowError::InvalidDuration(duration));
    }
    if session_dur < duration {
        return Err(WindowError::WindowLargerThanSession { duration, session: session_dur });
    }
    let mut t_start = t_abs - u * duration;
    let mut clamped = false;
    if t_start < 0.0 {
        t_start = 0.0;
        clamped = true;
    } else if t_start + duration > session_dur {
        t_start = session_dur - duration;
        clamped = true;
    }
    // keep t_start + D >= t_abs despite rounding in t_abs - u*D
    while t_start + duration < t_abs {
        t_start = t_start.next_up();
    }
    let target = if clamped { normalize_offset(t_abs, t_start, duration)? } else { u };
    Ok(Placement { t_start, duration, target })
}

/// Per-phase question strings quoted inside the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptQuestions {
    pub p1: String,
    pub p2: String,
    pub p3: String,
}

impl Default for PromptQuestions {
    fn default() -> Self {
        Self {
            p1: "Therapist orients the client to the planned imaginal exposure".into(),
            p2: "Was Prolonged Exposure done in the session?".into(),
            p3: "Therapist processes the imaginal exposure with the client".into(),
        }
    }
}

impl PromptQuestions {
    pub fn get(&self, phase: PhaseKind) -> &str {
        match phase {
            PhaseKind::P1 => &self.p1,
            PhaseKind::P2 => &self.p2,
            PhaseKind::P3 => &self.p3,
        }
    }
}

pub fn build_prompt_with(questions: &PromptQuestions, phase: PhaseKind, boundary: BoundaryKind) -> String {
    let w = boundary.word();
    format!(
        "The following audio and transcript segment is focused around the {w} of '{}'. \
         Identify the normalized offset (between 0.0 and 1.0) of this precise {w} within the given segment.",
        questions.get(phase)
    )
}

pub fn build_prompt(phase: PhaseKind, boundary: BoundaryKind) -> String {
    build_prompt_with(&PromptQuestions::default(), phase, boundary)
}

/// Byte-level vocabulary: ids 0..=255 are bytes, followed by specials.
pub mod vocab {
    pub const PAD: u16 = 256;
    pub const BOS: u16 = 257;
    pub const SEP: u16 = 258;
    pub const THERAPIST: u16 = 259;
    pub const CLIENT: u16 = 260;
    pub const AUDIO: u16 = 261;
    pub const EOS: u16 = 262;
    pub const SIZE: usize = 264;
}

pub fn tokenize_prompt(prompt: &str) -> Vec<u16> {
    prompt.bytes().map(u16::from).collect()
}

/// Transcript excerpt tokenization: speaker token, leading text bytes, SEP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTokenizer {
    pub max_sentence_bytes: usize,
    pub max_tokens: usize,
}

impl Default for TranscriptTokenizer {
    fn default() -> Self {
        Self { max_sentence_bytes: 24, max_tokens: 128 }
    }
}

impl TranscriptTokenizer {
    /// Tokens of a window-relative excerpt, each paired with its sentence's
    /// start as a fraction of the window, clamped to [0, 1].
    pub fn tokenize(&self, excerpt: &[TranscriptSentence], duration: f64) -> (Vec<u16>, Vec<f32>) {
        let mut ids = Vec::new();
        let mut times = Vec::new();
        for s in excerpt {
            let t = (s.start_s / duration).clamp(0.0, 1.0) as f32;
            let speaker = match s.speaker {
                Speaker::Therapist => vocab::THERAPIST,
                Speaker::Client => vocab::CLIENT,
            };
            let text = s.text.bytes().take(self.max_sentence_bytes).map(u16::from);
            for id in std::iter::once(speaker).chain(text).chain(std::iter::once(vocab::SEP)) {
                if ids.len() == self.max_tokens {
                    return (ids, times);
                }
                ids.push(id);
                times.push(t);
            }
        }
        (ids, times)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub session_id: String,
    pub t_start: f64,
    pub duration: f64,
    pub phase: PhaseKind,
    pub boundary: BoundaryKind,
}

impl WindowSpec {
    pub fn contains(&self, t: f64) -> bool {
        self.t_start <= t && t <= self.t_start + self.duration
    }
}

/// One model input: features, tokens and the regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowExample {
    pub spec: WindowSpec,
    pub audio: MelFrameMatrix,
    pub transcript_tokens: Vec<u16>,
    /// Window-relative start (fraction of D) of the sentence each transcript
    /// token belongs to.
    pub transcript_times: Vec<f32>,
    pub prompt_tokens: Vec<u16>,
    pub target_offset: f64,
}

impl WindowExample {
    /// Absolute boundary time implied by the target.
    pub fn t_abs(&self) -> f64 {
        denormalize_offset(self.target_offset, self.spec.t_start, self.spec.duration)
    }

    /// FNV-1a over feature bits and token ids.
    pub fn feature_checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for v in self.audio.data.iter() {
            h.write(&v.to_bits().to_le_bytes());
        }
        for t in self.transcript_tokens.iter().chain(&self.prompt_tokens) {
            h.write(&t.to_le_bytes());
        }
        for t in &self.transcript_times {
            h.write(&t.to_bits().to_le_bytes());
        }
        h.0
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Fnv::default();
        h.write(bytes);
        h.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOptions {
    pub duration: f64,
    pub seed: u64,
    pub per_boundary_count: usize,
    pub questions: PromptQuestions,
    pub tokenizer: TranscriptTokenizer,
}

impl ExampleOptions {
    pub fn new(duration: f64, seed: u64, per_boundary_count: usize) -> Self {
        Self {
            duration,
            seed,
            per_boundary_count,
            questions: PromptQuestions::default(),
            tokenizer: TranscriptTokenizer::default(),
        }
    }
}

/// Boundary time for a phase, requiring a present, trusted label.
pub fn boundary_time(session: &Session, phase: PhaseKind, boundary: BoundaryKind) -> Result<f64, WindowError> {
    let a = session
        .annotation(phase)
        .filter(|a| a.present && a.provenance.is_trusted())
        .ok_or_else(|| WindowError::MissingLabel { session: session.id.clone(), phase })?;
    Ok(match boundary {
        BoundaryKind::Start => a.start_s,
        BoundaryKind::End => a.stop_s,
    })
}

/// Seeded placements for all six boundaries, without rendering features.
pub fn plan_windows(session: &Session, opts: &ExampleOptions) -> Result<Vec<(WindowSpec, f64)>, WindowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ Fnv::hash(session.id.as_bytes()));
    let mut out = Vec::with_capacity(6 * opts.per_boundary_count);
    for phase in PhaseKind::ALL {
        for boundary in BoundaryKind::ALL {
            let t_abs = boundary_time(session, phase, boundary)?;
            for _ in 0..opts.per_boundary_count {
                let u: f64 = rng.random();
                let p = sample_window(t_abs, opts.duration, session.duration_s, u)?;
                let spec = WindowSpec {
                    session_id: session.id.clone(),
                    t_start: p.t_start,
                    duration: p.duration,
                    phase,
                    boundary,
                };
                out.push((spec, p.target));
            }
        }
    }
    Ok(out)
}

/// Renders one planned window into a model example.
pub fn render_example(
    spec: WindowSpec,
    target: f64,
    audio: &dyn AudioSource,
    transcript: &[TranscriptSentence],
    opts: &ExampleOptions,
) -> Result<WindowExample, ExampleError> {
    let buf = audio.window(spec.t_start, spec.duration)?;
    let mel = log_mel(&buf)?;
    let excerpt = excerpt_for_window(transcript, spec.t_start, spec.duration);
    let (transcript_tokens, transcript_times) = opts.tokenizer.tokenize(&excerpt, spec.duration);
    let prompt_tokens = tokenize_prompt(&build_prompt_with(&opts.questions, spec.phase, spec.boundary));
    Ok(WindowExample { spec, audio: mel, transcript_tokens, transcript_times, prompt_tokens, target_offset: target })
}

/// Training examples for one session from an in-memory audio source.
pub fn make_examples_from(
    session: &Session,
    audio: &dyn AudioSource,
    transcript: &[TranscriptSentence],
    opts: &ExampleOptions,
) -> Result<Vec<WindowExample>, ExampleError> {
    plan_windows(session, opts)?
        .into_iter()
        .map(|(spec, target)| render_example(spec, target, audio, transcript, opts))
        .collect()
}

/// Training examples for one session, loading its audio and transcript from
/// disk (paths relative to `root`).
pub fn make_examples(session: &Session, root: &Path, opts: &ExampleOptions) -> Result<Vec<WindowExample>, ExampleError> {
    let (audio_path, transcript_path) = session.resolved_paths(root);
    let audio = ingest::load_preprocessed(&audio_path)?;
    let transcript = ingest::parse_transcript(&transcript_path)?;
    make_examples_from(session, &audio, &transcript, opts)
}

/// One line of the optional example cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    #[serde(flatten)]
    pub spec: WindowSpec,
    pub target: f64,
    pub feature_checksum: String,
}

impl CacheRecord {
    pub fn of(ex: &WindowExample) -> Self {
        Self { spec: ex.spec.clone(), target: ex.target_offset, feature_checksum: format!("{:016x}", ex.feature_checksum()) }
    }

    pub fn matches(&self, ex: &WindowExample) -> bool {
        *self == Self::of(ex)
    }
}

pub fn write_example_cache(path: &Path, examples: &[WindowExample]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, &CacheRecord::of(ex))?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_example_cache(path: &Path) -> std::io::Result<Vec<CacheRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::AudioBuffer;
    use crate::session::{PhaseAnnotation, Provenance};

    #[test]
    fn normalize_table_one_values() {
        assert!((normalize_offset(4.17, 0.0, 30.0).unwrap() - 0.139).abs() < 1e-12);
        assert_eq!(normalize_offset(50.0, 50.0, 30.0).unwrap(), 0.0);
        assert_eq!(normalize_offset(80.0, 50.0, 30.0).unwrap(), 1.0);
        assert!(matches!(normalize_offset(81.0, 50.0, 30.0), Err(WindowError::OutOfWindow { .. })));
        assert!(matches!(normalize_offset(49.0, 50.0, 30.0), Err(WindowError::OutOfWindow { .. })));
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize_offset(0.5, 100.0, 30.0), 115.0);
        assert_eq!(denormalize_offset(0.0, 123.4, 60.0), 123.4);
        let o = normalize_offset(2123.92, 2100.0, 60.0).unwrap();
        assert!((denormalize_offset(o, 2100.0, 60.0) - 2123.92).abs() < 1e-9);
    }

    #[test]
    fn interior_placement() {
        let p = sample_window(105.83, 30.0, 3947.84, 0.25).unwrap();
        assert!((p.t_start - 98.33).abs() < 1e-9);
        assert_eq!(p.target, 0.25);
    }

    #[test]
    fn placement_clamps_at_session_edges() {
        let p = sample_window(4.17, 30.0, 3947.84, 0.9).unwrap();
        assert_eq!(p.t_start, 0.0);
        assert!((p.target - 0.139).abs() < 1e-12);
        let p = sample_window(3940.0, 30.0, 3947.84, 0.1).unwrap();
        assert!((p.t_start - 3917.84).abs() < 1e-9);
        assert!((p.target - (3940.0 - p.t_start) / 30.0).abs() < 1e-12);
        let p = sample_window(500.0, 30.0, 3947.84, 0.0).unwrap();
        assert_eq!((p.t_start, p.target), (500.0, 0.0));
        assert!(matches!(sample_window(5.0, 30.0, 20.0, 0.5), Err(WindowError::WindowLargerThanSession { .. })));
    }

    #[test]
    fn prompt_for_p2_start() {
        assert_eq!(
            build_prompt(PhaseKind::P2, BoundaryKind::Start),
            "The following audio and transcript segment is focused around the START of 'Was Prolonged Exposure \
             done in the session?'. Identify the normalized offset (between 0.0 and 1.0) of this precise START \
             within the given segment."
        );
    }

    #[test]
    fn prompt_template_properties() {
        let start = build_prompt(PhaseKind::P2, BoundaryKind::Start);
        let end = build_prompt(PhaseKind::P2, BoundaryKind::End);
        assert_eq!(end, start.replace("START", "END"));
        let q = PromptQuestions::default();
        for phase in PhaseKind::ALL {
            for b in BoundaryKind::ALL {
                let p = build_prompt(phase, b);
                assert_eq!(p.matches(b.word()).count(), 2, "{p}");
                assert_eq!(p.matches(q.get(phase)).count(), 1);
            }
        }
        let p1 = build_prompt(PhaseKind::P1, BoundaryKind::Start);
        let p3 = build_prompt(PhaseKind::P3, BoundaryKind::Start);
        assert_eq!(p1.replace(&q.p1, "Q"), p3.replace(&q.p3, "Q"));
    }

    #[test]
    fn tokenizer_caps_and_tags_times() {
        let ex = vec![
            TranscriptSentence { start_s: -3.0, end_s: 2.0, speaker: Speaker::Client, text: "hello".into() },
            TranscriptSentence { start_s: 15.0, end_s: 17.0, speaker: Speaker::Therapist, text: "a".repeat(100) },
        ];
        let tok = TranscriptTokenizer { max_sentence_bytes: 24, max_tokens: 128 };
        let (ids, times) = tok.tokenize(&ex, 30.0);
        assert_eq!(ids.len(), 7 + 26);
        assert_eq!(ids[0], vocab::CLIENT);
        assert_eq!(ids[6], vocab::SEP);
        assert_eq!(times[0], 0.0);
        assert_eq!(times[7], 0.5);
        let (ids, _) = TranscriptTokenizer { max_sentence_bytes: 24, max_tokens: 10 }.tokenize(&ex, 30.0);
        assert_eq!(ids.len(), 10);
    }

    pub(crate) fn labeled_session(duration: f64) -> Session {
        Session {
            id: "w1".into(),
            audio_path: "w1.wav".into(),
            duration_s: duration,
            sample_rate: 16000,
            annotations: vec![
                PhaseAnnotation::new(PhaseKind::P1, 40.0, 100.0, Provenance::SyntheticGroundTruth),
                PhaseAnnotation::new(PhaseKind::P2, 160.0, 300.0, Provenance::RaterVerified),
                PhaseAnnotation::new(PhaseKind::P3, 300.0, 380.0, Provenance::SyntheticGroundTruth),
            ],
            transcript_path: "w1.json".into(),
        }
    }

    #[test]
    fn six_examples_per_count_and_deterministic() {
        let s = labeled_session(420.0);
        let audio = AudioBuffer::new(vec![0.01; 420 * 16000], 16000);
        let transcript = vec![TranscriptSentence { start_s: 39.5, end_s: 42.0, speaker: Speaker::Therapist, text: "begin".into() }];
        let opts = ExampleOptions::new(30.0, 9, 1);
        let a = make_examples_from(&s, &audio, &transcript, &opts).unwrap();
        assert_eq!(a.len(), 6);
        let b = make_examples_from(&s, &audio, &transcript, &opts).unwrap();
        let ta: Vec<f64> = a.iter().map(|e| e.target_offset).collect();
        let tb: Vec<f64> = b.iter().map(|e| e.target_offset).collect();
        assert_eq!(ta, tb);
        assert_eq!(a[0].audio.frames(), 2998);
        assert!(a.iter().all(|e| !e.prompt_tokens.is_empty()));
        assert_eq!(a[0].spec.phase, PhaseKind::P1);
        assert!((a[0].t_abs() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn llm_only_labels_are_missing() {
        let mut s = labeled_session(420.0);
        s.annotations[1].provenance = Provenance::LlmProposed;
        let opts = ExampleOptions::new(30.0, 9, 1);
        assert!(matches!(plan_windows(&s, &opts), Err(WindowError::MissingLabel { phase: PhaseKind::P2, .. })));
        s.annotations.pop();
        s.annotations[1].provenance = Provenance::RaterVerified;
        assert!(matches!(plan_windows(&s, &opts), Err(WindowError::MissingLabel { phase: PhaseKind::P3, .. })));
    }

    #[test]
    fn interior_targets_are_uniform() {
        let s = labeled_session(420.0);
        let opts = ExampleOptions::new(30.0, 3, 1000);
        let planned = plan_windows(&s, &opts).unwrap();
        // P2 start at 160 s is interior for D = 30
        let t: Vec<f64> = planned
            .iter()
            .filter(|(w, _)| w.phase == PhaseKind::P2 && w.boundary == BoundaryKind::Start)
            .map(|(_, t)| *t)
            .collect();
        assert_eq!(t.len(), 1000);
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn cache_round_trip_detects_changes() {
        let s = labeled_session(420.0);
        let audio = AudioBuffer::new((0..420 * 16000).map(|i| ((i % 97) as f32 - 48.0) / 100.0).collect(), 16000);
        let opts = ExampleOptions::new(30.0, 1, 1);
        let ex = make_examples_from(&s, &audio, &[], &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.jsonl");
        write_example_cache(&p, &ex).unwrap();
        let recs = read_example_cache(&p).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().zip(&ex).all(|(r, e)| r.matches(e)));
        let mut changed = ex[0].clone();
        changed.audio.data[[0, 0]] += 1.0;
        assert!(!recs[0].matches(&changed));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn offset_round_trip(t_start in 0.0f64..6000.0, d in prop::sample::select(WINDOW_DURATIONS.to_vec()), f in 0.0f64..=1.0) {
                let t_abs = t_start + f * d;
                if let Ok(o) = normalize_offset(t_abs, t_start, d) {
                    prop_assert!((denormalize_offset(o, t_start, d) - t_abs).abs() < 1e-9);
                }
            }

            #[test]
            fn placement_contains_boundary(
                session in 120.0f64..6000.0,
                frac in 0.0f64..=1.0,
                u in 0.0f64..=1.0,
                d in prop::sample::select(WINDOW_DURATIONS.to_vec()),
            ) {
                let t_abs = frac * session;
                let p = sample_window(t_abs, d, session, u).unwrap();
                prop_assert!(p.t_start >= 0.0);
                prop_assert!(p.t_start + d <= session + 1e-9);
                prop_assert!(p.t_start <= t_abs && t_abs <= p.t_start + d);
                prop_assert!((0.0..=1.0).contains(&p.target));
                if t_abs >= d && session - t_abs >= d {
                    prop_assert_eq!(p.target, u);
                }
            }
        }
    }
}
