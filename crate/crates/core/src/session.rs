//! Session and annotation data model, dataset splitting and the corpus
//! manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sessions longer than this were excluded from the corpus (transcription
/// limit).
pub const MAX_SESSION_S: f64 = 5400.0;

/// A protocol phase. Ordered by occurrence within a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseKind {
    /// Orientation to imaginal exposure.
    P1,
    /// Imaginal exposure.
    P2,
    /// Post-imaginal processing.
    P3,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 3] = [PhaseKind::P1, PhaseKind::P2, PhaseKind::P3];

    /// Row id used by the annotator response schema (1, 2, 3).
    pub fn row_id(self) -> u32 {
        match self {
            PhaseKind::P1 => 1,
            PhaseKind::P2 => 2,
            PhaseKind::P3 => 3,
        }
    }

    pub fn from_row_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(PhaseKind::P1),
            2 => Some(PhaseKind::P2),
            3 => Some(PhaseKind::P3),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Phase description as shown to annotators and raters.
    pub fn description(self) -> &'static str {
        match self {
            PhaseKind::P1 => "Therapist orients the client to the planned imaginal exposure.",
            PhaseKind::P2 => "Imaginal lasted about 30--45 minutes (or about 15 for final imaginal).",
            PhaseKind::P3 => "Therapist processes the imaginal exposure with the client.",
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PhaseKind::P1 => "P1",
            PhaseKind::P2 => "P2",
            PhaseKind::P3 => "P3",
        };
        f.write_str(s)
    }
}

/// Where a label came from. Rater-verified labels supersede LLM proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    LlmProposed,
    RaterVerified,
    SyntheticGroundTruth,
}

impl Provenance {
    /// Labels usable as training/evaluation targets.
    pub fn is_trusted(self) -> bool {
        !matches!(self, Provenance::LlmProposed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseAnnotation {
    pub phase: PhaseKind,
    #[serde(rename = "start", serialize_with = "seconds::serialize")]
    pub start_s: f64,
    #[serde(rename = "stop", serialize_with = "seconds::serialize")]
    pub stop_s: f64,
    pub present: bool,
    pub provenance: Provenance,
}

impl PhaseAnnotation {
    pub fn new(phase: PhaseKind, start_s: f64, stop_s: f64, provenance: Provenance) -> Self {
        Self { phase, start_s, stop_s, present: true, provenance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub id: String,
    pub audio_path: PathBuf,
    #[serde(serialize_with = "seconds::serialize")]
    pub duration_s: f64,
    pub sample_rate: u32,
    pub annotations: Vec<PhaseAnnotation>,
    pub transcript_path: PathBuf,
}

impl Session {
    pub fn annotation(&self, phase: PhaseKind) -> Option<&PhaseAnnotation> {
        self.annotations.iter().find(|a| a.phase == phase)
    }

    /// Whether every phase carries a present, trusted label.
    pub fn fully_labeled(&self) -> bool {
        PhaseKind::ALL.iter().all(|&p| {
            self.annotation(p).is_some_and(|a| a.present && a.provenance.is_trusted())
        })
    }

    /// Audio and transcript paths resolved against a manifest directory.
    pub fn resolved_paths(&self, root: &Path) -> (PathBuf, PathBuf) {
        (root.join(&self.audio_path), root.join(&self.transcript_path))
    }
}

/// One broken invariant found by [`validate_session`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks the session invariants that do not touch the filesystem.
pub fn validate_session_fields(s: &Session) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(s.duration_s > 0.0) {
        out.push(Violation::new("duration_s", "duration>0"));
    }
    if s.id.is_empty() {
        out.push(Violation::new("id", "non-empty"));
    }
    let mut seen = BTreeSet::new();
    for a in &s.annotations {
        let field = format!("annotations[{}]", a.phase);
        if !seen.insert(a.phase) {
            out.push(Violation::new(&field, "at-most-one-per-phase"));
        }
        if a.start_s < 0.0 {
            out.push(Violation::new(&field, "start>=0"));
        }
        if a.present {
            if !(a.start_s < a.stop_s) {
                out.push(Violation::new(&field, "start<stop"));
            }
            if a.stop_s > s.duration_s {
                out.push(Violation::new(&field, "stop<=duration"));
            }
        }
    }
    let mut present: Vec<&PhaseAnnotation> = s.annotations.iter().filter(|a| a.present).collect();
    present.sort_by_key(|a| a.phase);
    for pair in present.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next.start_s < prev.stop_s {
            out.push(Violation::new(
                format!("annotations[{}]", next.phase),
                format!("ordering/overlap with {}", prev.phase),
            ));
        }
    }
    out
}

/// Checks every session invariant, including that the audio and transcript
/// files are readable. Relative paths resolve against `root`.
pub fn validate_session_at(s: &Session, root: &Path) -> Vec<Violation> {
    let mut out = validate_session_fields(s);
    let (audio, transcript) = s.resolved_paths(root);
    for (field, path) in [("audio_path", audio), ("transcript_path", transcript)] {
        if let Err(e) = fs::File::open(&path) {
            out.push(Violation::new(field, format!("io: {}: {e}", path.display())));
        }
    }
    out
}

/// [`validate_session_at`] with paths taken as-is.
pub fn validate_session(s: &Session) -> Vec<Violation> {
    validate_session_at(s, Path::new(""))
}

/// Reasons a session is left out of training/evaluation corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exclusion {
    TooLong,
    /// Annotations or transcript reach beyond the audio.
    Misaligned,
    MissingLabels,
}

/// Applies the corpus exclusion rules. `transcript_end_s` is the end of the
/// last transcript sentence, when known.
pub fn screen_session(s: &Session, transcript_end_s: Option<f64>) -> Vec<Exclusion> {
    let mut out = Vec::new();
    if s.duration_s > MAX_SESSION_S {
        out.push(Exclusion::TooLong);
    }
    let beyond = s.annotations.iter().any(|a| a.present && a.stop_s > s.duration_s)
        || transcript_end_s.is_some_and(|t| t > s.duration_s + 1.0);
    if beyond {
        out.push(Exclusion::Misaligned);
    }
    if !s.fully_labeled() {
        out.push(Exclusion::MissingLabels);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Session id to partition. Total and disjoint over the input ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignment.iter().filter(|(_, s)| **s == split).map(|(id, _)| id.as_str()).collect()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let n = |s| self.assignment.values().filter(|v| **v == s).count();
        (n(Split::Train), n(Split::Validation), n(Split::Test))
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("split ratios must be positive and sum to 1 (got {0:?})")]
    InvalidRatios((f64, f64, f64)),
    #[error("duplicate session id {0:?}")]
    DuplicateId(String),
}

/// Partition sizes for `n` sessions: floors of `n * ratio`, with leftovers
/// handed to train, then validation, then test.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize), SplitError> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidRatios(ratios));
    }
    // n * (216/308) may land a hair below 216
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let mut sizes = [floor(a), floor(b), floor(c)];
    let mut rem = n - sizes.iter().sum::<usize>();
    let mut i = 0;
    while rem > 0 {
        sizes[i % 3] += 1;
        rem -= 1;
        i += 1;
    }
    Ok((sizes[0], sizes[1], sizes[2]))
}

/// Session-level train/validation/test split. The shuffle is a deterministic
/// function of `seed`.
pub fn split_dataset(
    session_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    if session_ids.is_empty() {
        return Err(SplitError::EmptyCorpus);
    }
    let (n_train, n_val, _) = split_sizes(session_ids.len(), ratios)?;
    let mut seen = BTreeSet::new();
    for id in session_ids {
        if !seen.insert(id.as_str()) {
            return Err(SplitError::DuplicateId(id.clone()));
        }
    }
    let mut order: Vec<&String> = session_ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            (id.clone(), split)
        })
        .collect();
    Ok(SplitAssignment { assignment })
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
}

/// Reads a manifest: a JSON array of session records.
pub fn load_manifest(path: &Path) -> Result<Vec<Session>, ManifestError> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<Session>, ManifestError> {
    serde_json::from_str(text).map_err(|e| ManifestError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Canonical manifest text (pretty JSON, trailing newline).
pub fn manifest_to_string(sessions: &[Session]) -> String {
    let mut s = serde_json::to_string_pretty(sessions).expect("sessions serialize");
    s.push('\n');
    s
}

/// Writes the manifest atomically (temp file in the same directory, then
/// rename).
pub fn save_manifest(sessions: &[Session], path: &Path) -> Result<(), ManifestError> {
    write_atomic(path, manifest_to_string(sessions).as_bytes())?;
    Ok(())
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Decimal-seconds formatting with at least two fractional digits.
pub(crate) mod seconds {
    use serde::Serializer;
    use serde_json::value::RawValue;

    pub fn format(x: f64) -> String {
        let shortest = format!("{x}");
        if !x.is_finite() || shortest.contains(['e', 'E']) {
            return shortest;
        }
        match shortest.split_once('.') {
            Some((_, frac)) if frac.len() >= 2 => shortest,
            _ => format!("{x:.2}"),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if !x.is_finite() {
            return s.serialize_f64(*x);
        }
        let raw = RawValue::from_string(format(*x)).map_err(serde::ser::Error::custom)?;
        serde::Serialize::serialize(&raw, s)
    }
}
