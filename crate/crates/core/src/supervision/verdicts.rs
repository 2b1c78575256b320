use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ProposedAnnotation;
use crate::session::{PhaseAnnotation, PhaseKind, Provenance, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Accept,
    Correct,
    RejectLabel,
}

/// A rater's decision on one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterVerdict {
    pub proposal_id: String,
    pub decision: Decision,
    #[serde(rename = "corrected_start", default, skip_serializing_if = "Option::is_none")]
    pub corrected_start_s: Option<f64>,
    #[serde(rename = "corrected_stop", default, skip_serializing_if = "Option::is_none")]
    pub corrected_stop_s: Option<f64>,
    #[serde(default)]
    pub rater: String,
    /// Unix seconds.
    #[serde(default)]
    pub timestamp: u64,
    /// Position in the verdict log, assigned on append.
    #[serde(default)]
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl RaterVerdict {
    pub fn accept(proposal_id: impl Into<String>) -> Self {
        Self {
            proposal_id: proposal_id.into(),
            decision: Decision::Accept,
            corrected_start_s: None,
            corrected_stop_s: None,
            rater: String::new(),
            timestamp: 0,
            seq: 0,
        }
    }

    pub fn correct(proposal_id: impl Into<String>, start: f64, stop: f64) -> Self {
        Self {
            decision: Decision::Correct,
            corrected_start_s: Some(start),
            corrected_stop_s: Some(stop),
            ..Self::accept(proposal_id)
        }
    }

    pub fn reject(proposal_id: impl Into<String>) -> Self {
        Self { decision: Decision::RejectLabel, ..Self::accept(proposal_id) }
    }

    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        let mut err = |field: &str, message: &str| out.push(FieldError { field: field.into(), message: message.into() });
        if self.proposal_id.is_empty() {
            err("proposal_id", "required");
        }
        match self.decision {
            Decision::Correct => match (self.corrected_start_s, self.corrected_stop_s) {
                (Some(a), Some(b)) => {
                    if !(a.is_finite() && a >= 0.0) {
                        err("corrected_start", "must be finite and non-negative");
                    }
                    if !(a < b) {
                        err("corrected_stop", "must exceed corrected_start");
                    }
                }
                (a, b) => {
                    if a.is_none() {
                        err("corrected_start", "required for a correct decision");
                    }
                    if b.is_none() {
                        err("corrected_stop", "required for a correct decision");
                    }
                }
            },
            _ => {
                if self.corrected_start_s.is_some() || self.corrected_stop_s.is_some() {
                    err("decision", "corrected times are only allowed with a correct decision");
                }
            }
        }
        out
    }

    fn same_decision(&self, other: &RaterVerdict) -> bool {
        self.decision == other.decision
            && self.corrected_start_s == other.corrected_start_s
            && self.corrected_stop_s == other.corrected_stop_s
    }

    /// Verified label resulting from this verdict on `p`.
    pub fn resolve(&self, p: &ProposedAnnotation) -> PhaseAnnotation {
        let (start_s, stop_s, present) = match self.decision {
            Decision::Accept => (p.start_s, p.stop_s, p.present),
            Decision::Correct => (
                self.corrected_start_s.unwrap_or(p.start_s),
                self.corrected_stop_s.unwrap_or(p.stop_s),
                true,
            ),
            Decision::RejectLabel => (p.start_s, p.stop_s, false),
        };
        PhaseAnnotation { phase: p.phase, start_s, stop_s, present, provenance: Provenance::RaterVerified }
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown proposal {0}")]
    NotFound(String),
    #[error("proposal {0} is already finalized")]
    Conflict(String),
    #[error("invalid verdict: {0:?}")]
    Invalid(Vec<FieldError>),
    #[error("verdict log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("verdict log line {line}: {message}")]
    Log { line: usize, message: String },
}

/// Proposals plus the append-only verdict log. The verified state is a fold
/// over the log; the latest verdict per proposal wins.
#[derive(Debug, Default)]
pub struct VerificationStore {
    proposals: BTreeMap<String, ProposedAnnotation>,
    log: Vec<RaterVerdict>,
    log_path: Option<PathBuf>,
}

impl VerificationStore {
    pub fn new(proposals: impl IntoIterator<Item = ProposedAnnotation>) -> Self {
        Self { proposals: proposals.into_iter().map(|p| (p.id.clone(), p)).collect(), ..Self::default() }
    }

    /// Store backed by a JSON-lines log; existing entries are replayed.
    pub fn open(proposals: impl IntoIterator<Item = ProposedAnnotation>, log_path: &Path) -> Result<Self, VerifyError> {
        let mut store = Self::new(proposals);
        if log_path.exists() {
            let f = BufReader::new(File::open(log_path)?);
            for (i, line) in f.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let v: RaterVerdict = serde_json::from_str(&line)
                    .map_err(|e| VerifyError::Log { line: i + 1, message: e.to_string() })?;
                if !store.proposals.contains_key(&v.proposal_id) {
                    return Err(VerifyError::Log { line: i + 1, message: format!("unknown proposal {}", v.proposal_id) });
                }
                store.log.push(v);
            }
        }
        store.log_path = Some(log_path.to_path_buf());
        Ok(store)
    }

    pub fn proposals(&self) -> impl Iterator<Item = &ProposedAnnotation> {
        self.proposals.values()
    }

    pub fn proposal(&self, id: &str) -> Option<&ProposedAnnotation> {
        self.proposals.get(id)
    }

    pub fn log(&self) -> &[RaterVerdict] {
        &self.log
    }

    fn latest(&self, id: &str) -> Option<&RaterVerdict> {
        self.log.iter().rev().find(|v| v.proposal_id == id)
    }

    pub fn is_finalized(&self, id: &str) -> bool {
        self.latest(id).is_some()
    }

    pub fn pending(&self) -> Vec<&ProposedAnnotation> {
        self.proposals.values().filter(|p| !self.is_finalized(&p.id)).collect()
    }

    /// Verified label for a proposal, if reviewed.
    pub fn verified(&self, id: &str) -> Option<PhaseAnnotation> {
        let v = self.latest(id)?;
        Some(v.resolve(&self.proposals[id]))
    }

    fn append(&mut self, mut v: RaterVerdict) -> Result<PhaseAnnotation, VerifyError> {
        v.seq = self.log.len() as u64 + 1;
        if v.timestamp == 0 {
            v.timestamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
        }
        if let Some(path) = &self.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(&v).map_err(std::io::Error::other)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        let out = v.resolve(&self.proposals[&v.proposal_id]);
        self.log.push(v);
        Ok(out)
    }

    fn check(&self, v: &RaterVerdict) -> Result<(), VerifyError> {
        if !self.proposals.contains_key(&v.proposal_id) {
            return Err(VerifyError::NotFound(v.proposal_id.clone()));
        }
        let errors = v.field_errors();
        if !errors.is_empty() {
            return Err(VerifyError::Invalid(errors));
        }
        Ok(())
    }

    /// Finalizes a pending proposal. Re-sending an identical accept is a no-op;
    /// any other verdict on a finalized proposal is a conflict.
    pub fn apply_verdict(&mut self, v: RaterVerdict) -> Result<PhaseAnnotation, VerifyError> {
        self.check(&v)?;
        if let Some(prev) = self.latest(&v.proposal_id) {
            if prev.decision == Decision::Accept && prev.same_decision(&v) {
                return Ok(prev.resolve(&self.proposals[&v.proposal_id]));
            }
            return Err(VerifyError::Conflict(v.proposal_id));
        }
        self.append(v)
    }

    /// Appends a verdict that supersedes an earlier one. Earlier entries stay
    /// in the log.
    pub fn amend_verdict(&mut self, v: RaterVerdict) -> Result<PhaseAnnotation, VerifyError> {
        self.check(&v)?;
        self.append(v)
    }

    /// Session labels with review results folded in: rater-verified labels
    /// replace LLM proposals; existing non-LLM labels are kept.
    pub fn apply_to_session(&self, session: &Session) -> Session {
        let mut out = session.clone();
        for phase in PhaseKind::ALL {
            let id = ProposedAnnotation::proposal_id(&session.id, phase);
            let existing = out.annotations.iter().position(|a| a.phase == phase);
            let keep = existing.is_some_and(|i| out.annotations[i].provenance != Provenance::LlmProposed);
            if keep {
                continue;
            }
            let label = self
                .verified(&id)
                .or_else(|| self.proposals.get(&id).map(ProposedAnnotation::as_annotation));
            if let Some(label) = label {
                match existing {
                    Some(i) => out.annotations[i] = label,
                    None => out.annotations.push(label),
                }
            }
        }
        out.annotations.sort_by_key(|a| a.phase);
        out
    }
}

pub fn save_proposals(path: &Path, proposals: &[ProposedAnnotation]) -> std::io::Result<()> {
    let mut text = String::new();
    for p in proposals {
        text.push_str(&serde_json::to_string(p).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    crate::session::write_atomic(path, text.as_bytes())
}

pub fn load_proposals(path: &Path) -> std::io::Result<Vec<ProposedAnnotation>> {
    let f = BufReader::new(File::open(path)?);
    f.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}

/// Stand-in rater that checks proposals against known labels: accepts
/// boundaries within `accept_within_s`, otherwise corrects to the truth.
#[derive(Debug, Clone)]
pub struct SimulatedRater {
    truth: HashMap<String, Vec<PhaseAnnotation>>,
    pub accept_within_s: f64,
    pub name: String,
}

impl SimulatedRater {
    pub fn new(truth: HashMap<String, Vec<PhaseAnnotation>>, accept_within_s: f64) -> Self {
        Self { truth, accept_within_s, name: "simulated".into() }
    }

    pub fn review(&self, p: &ProposedAnnotation) -> RaterVerdict {
        let truth = self.truth.get(&p.session_id).and_then(|t| t.iter().find(|a| a.phase == p.phase));
        let mut v = match truth {
            None => RaterVerdict::accept(&p.id),
            Some(t) if !t.present => {
                if p.present {
                    RaterVerdict::reject(&p.id)
                } else {
                    RaterVerdict::accept(&p.id)
                }
            }
            Some(t) => {
                let close = (p.start_s - t.start_s).abs() <= self.accept_within_s
                    && (p.stop_s - t.stop_s).abs() <= self.accept_within_s;
                if p.present && close {
                    RaterVerdict::accept(&p.id)
                } else {
                    RaterVerdict::correct(&p.id, t.start_s, t.stop_s)
                }
            }
        };
        v.rater = self.name.clone();
        v
    }
}
