use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use super::ProposedAnnotation;
use crate::ingest::{Speaker, TranscriptSentence};
use crate::session::{PhaseAnnotation, PhaseKind};
use crate::windowing::Fnv;

pub const ENV_ANNOTATOR_URL: &str = "PHASELOC_ANNOTATOR_URL";
pub const ENV_ANNOTATOR_TOKEN: &str = "PHASELOC_ANNOTATOR_TOKEN";

pub const DEFAULT_INSTRUCTION: &str = "You are given a timestamped therapy session transcript. For each protocol \
phase (1: therapist orients the client to the planned imaginal exposure; 2: imaginal exposure; 3: therapist \
processes the imaginal exposure with the client) report whether it is present and its start and stop time in \
seconds. Answer with a JSON array of objects with keys id, description, start, stop, present.";

/// Input handed to an annotator.
#[derive(Debug, Clone, Copy)]
pub struct AnnotationRequest<'a> {
    pub session_id: &'a str,
    pub duration_s: f64,
    pub transcript: &'a [TranscriptSentence],
}

impl AnnotationRequest<'_> {
    /// One `[start-end] speaker: text` line per sentence.
    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for s in self.transcript {
            let who = match s.speaker {
                Speaker::Therapist => "therapist",
                Speaker::Client => "client",
            };
            out.push_str(&format!("[{:.2}-{:.2}] {who}: {}\n", s.start_s, s.end_s, s.text));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("annotator transport error: {0}")]
    Transport(String),
    #[error("annotator response could not be parsed: {error}")]
    Garbled { error: ParseError, raw: String },
    #[error("annotator response is missing phases {missing:?}")]
    Incomplete { missing: Vec<PhaseKind>, raw: String },
    #[error("annotator timestamps for {phase} outside [0, {duration}]")]
    OutOfRange { phase: PhaseKind, duration: f64, raw: String },
}

impl AnnotatorError {
    /// The response body, when one was received.
    pub fn raw(&self) -> Option<&str> {
        match self {
            AnnotatorError::Transport(_) => None,
            AnnotatorError::Garbled { raw, .. }
            | AnnotatorError::Incomplete { raw, .. }
            | AnnotatorError::OutOfRange { raw, .. } => Some(raw),
        }
    }
}

/// Produces a raw response in the annotation row schema for one session.
pub trait Annotator: Send + Sync {
    fn name(&self) -> &str;
    fn propose(&self, req: &AnnotationRequest<'_>) -> Result<String, AnnotatorError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {message}")]
pub struct ParseError {
    pub field: String,
    pub message: String,
}

fn perr(field: impl Into<String>, message: impl Into<String>) -> ParseError {
    ParseError { field: field.into(), message: message.into() }
}

/// One row of an annotator response.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorRow {
    pub phase: PhaseKind,
    pub description: String,
    pub start_s: f64,
    pub stop_s: f64,
    pub present: bool,
}

impl AnnotatorRow {
    pub fn into_proposal(self, session_id: &str, source: &str) -> ProposedAnnotation {
        ProposedAnnotation {
            id: ProposedAnnotation::proposal_id(session_id, self.phase),
            session_id: session_id.to_string(),
            phase: self.phase,
            description: self.description,
            start_s: self.start_s,
            stop_s: self.stop_s,
            present: self.present,
            source: source.to_string(),
        }
    }
}

const ROW_KEYS: [&str; 5] = ["id", "description", "start", "stop", "present"];

fn strip_fence(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Strict parse of an annotator response: a JSON array of
/// `{id, description, start, stop, present}` rows. `present` may be a boolean
/// or "Yes"/"No".
pub fn parse_annotator_json(payload: &str) -> Result<Vec<AnnotatorRow>, ParseError> {
    let v: Value = serde_json::from_str(strip_fence(payload)).map_err(|e| perr("$", e.to_string()))?;
    let rows = v.as_array().ok_or_else(|| perr("$", "expected a JSON array of rows"))?;
    let mut seen = BTreeMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let f = |k: &str| format!("[{i}].{k}");
        let obj = row.as_object().ok_or_else(|| perr(format!("[{i}]"), "expected an object"))?;
        if let Some(extra) = obj.keys().find(|k| !ROW_KEYS.contains(&k.as_str())) {
            return Err(perr(f(extra), "unknown field"));
        }
        for k in ROW_KEYS {
            if !obj.contains_key(k) {
                return Err(perr(f(k), "missing field"));
            }
        }
        let id = obj["id"].as_u64().ok_or_else(|| perr(f("id"), "expected an integer phase id"))?;
        let phase = u32::try_from(id)
            .ok()
            .and_then(PhaseKind::from_row_id)
            .ok_or_else(|| perr(f("id"), format!("unknown phase id {id}")))?;
        if seen.insert(phase, i).is_some() {
            return Err(perr(f("id"), format!("duplicate phase id {id}")));
        }
        let description =
            obj["description"].as_str().ok_or_else(|| perr(f("description"), "expected a string"))?.to_string();
        let secs = |k: &str| -> Result<f64, ParseError> {
            let x = obj[k].as_f64().ok_or_else(|| perr(f(k), "expected decimal seconds"))?;
            if !x.is_finite() || x < 0.0 {
                return Err(perr(f(k), "seconds must be finite and non-negative"));
            }
            Ok(x)
        };
        let (start_s, stop_s) = (secs("start")?, secs("stop")?);
        let present = match &obj["present"] {
            Value::Bool(b) => *b,
            Value::String(s) if s.eq_ignore_ascii_case("yes") => true,
            Value::String(s) if s.eq_ignore_ascii_case("no") => false,
            _ => return Err(perr(f("present"), "expected true/false or \"Yes\"/\"No\"")),
        };
        if present && !(start_s < stop_s) {
            return Err(perr(f("stop"), "stop must exceed start for a present phase"));
        }
        out.push(AnnotatorRow { phase, description, start_s, stop_s, present });
    }
    Ok(out)
}

/// Runs an annotator over one transcript and checks the response covers every
/// phase exactly once with in-range timestamps.
pub fn annotate(req: &AnnotationRequest<'_>, annotator: &dyn Annotator) -> Result<Vec<ProposedAnnotation>, AnnotatorError> {
    let raw = annotator.propose(req)?;
    let rows = match parse_annotator_json(&raw) {
        Ok(rows) => rows,
        Err(error) => return Err(AnnotatorError::Garbled { error, raw }),
    };
    let missing: Vec<PhaseKind> =
        PhaseKind::ALL.iter().copied().filter(|p| !rows.iter().any(|r| r.phase == *p)).collect();
    if !missing.is_empty() {
        return Err(AnnotatorError::Incomplete { missing, raw });
    }
    if let Some(r) = rows.iter().find(|r| r.present && r.stop_s > req.duration_s) {
        return Err(AnnotatorError::OutOfRange { phase: r.phase, duration: req.duration_s, raw });
    }
    let mut out: Vec<ProposedAnnotation> =
        rows.into_iter().map(|r| r.into_proposal(req.session_id, annotator.name())).collect();
    out.sort_by_key(|p| p.phase);
    Ok(out)
}

fn row_json(phase: PhaseKind, start: f64, stop: f64, present: bool) -> Value {
    json!({
        "id": phase.row_id(),
        "description": phase.description(),
        "start": (start * 100.0).round() / 100.0,
        "stop": (stop * 100.0).round() / 100.0,
        "present": if present { "Yes" } else { "No" },
    })
}

/// Deterministic annotator that returns known labels perturbed by seeded
/// uniform jitter in `[-jitter_s, jitter_s]`.
#[derive(Debug, Clone)]
pub struct MockAnnotator {
    truth: HashMap<String, Vec<PhaseAnnotation>>,
    pub jitter_s: f64,
    pub seed: u64,
}

impl MockAnnotator {
    pub fn new(truth: HashMap<String, Vec<PhaseAnnotation>>, jitter_s: f64, seed: u64) -> Self {
        Self { truth, jitter_s, seed }
    }
}

impl Annotator for MockAnnotator {
    fn name(&self) -> &str {
        "mock"
    }

    fn propose(&self, req: &AnnotationRequest<'_>) -> Result<String, AnnotatorError> {
        let truth = self
            .truth
            .get(req.session_id)
            .ok_or_else(|| AnnotatorError::Transport(format!("mock has no labels for {}", req.session_id)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ Fnv::hash(req.session_id.as_bytes()));
        let mut jitter = || if self.jitter_s > 0.0 { rng.random_range(-self.jitter_s..=self.jitter_s) } else { 0.0 };
        let rows: Vec<Value> = truth
            .iter()
            .map(|a| {
                let (ja, jb) = (jitter(), jitter());
                let start = (a.start_s + ja).clamp(0.0, req.duration_s);
                let stop = (a.stop_s + jb).clamp(0.0, req.duration_s);
                if a.present && start < stop {
                    row_json(a.phase, start, stop, true)
                } else {
                    row_json(a.phase, a.start_s, a.stop_s, a.present)
                }
            })
            .collect();
        Ok(Value::Array(rows).to_string())
    }
}

/// Posts the transcript and instruction to an HTTP endpoint that answers in
/// the annotation row schema.
pub struct HttpAnnotator {
    pub endpoint: String,
    token: Option<String>,
    pub instruction: String,
    pub timeout: Duration,
}

impl fmt::Debug for HttpAnnotator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpAnnotator")
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl HttpAnnotator {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Self {
        Self { endpoint: endpoint.into(), token, instruction: DEFAULT_INSTRUCTION.to_string(), timeout: Duration::from_secs(120) }
    }

    /// Endpoint from `PHASELOC_ANNOTATOR_URL`, bearer token from
    /// `PHASELOC_ANNOTATOR_TOKEN` when set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_ANNOTATOR_URL).ok().filter(|u| !u.is_empty())?;
        Some(Self::new(url, std::env::var(ENV_ANNOTATOR_TOKEN).ok()))
    }
}

impl Annotator for HttpAnnotator {
    fn name(&self) -> &str {
        "http"
    }

    fn propose(&self, req: &AnnotationRequest<'_>) -> Result<String, AnnotatorError> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let body = json!({
            "instruction": self.instruction,
            "session_id": req.session_id,
            "duration_s": req.duration_s,
            "transcript": req.transcript_text(),
        });
        let mut call = agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| AnnotatorError::Transport(e.to_string()))?;
        resp.body_mut().read_to_string().map_err(|e| AnnotatorError::Transport(e.to_string()))
    }
}
