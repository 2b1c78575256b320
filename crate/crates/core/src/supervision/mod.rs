//! Soft supervision: annotators propose phase timestamps from transcripts,
//! raters accept, correct or reject them, and agreement statistics summarize
//! the review.

mod agreement;
mod annotator;
mod verdicts;

use serde::{Deserialize, Serialize};

use crate::session::{PhaseAnnotation, PhaseKind, Provenance};

pub use agreement::{compute_agreement, AgreementError, AgreementStats, DEFAULT_TOLERANCE_S};
pub use annotator::{
    annotate, parse_annotator_json, AnnotationRequest, Annotator, AnnotatorError, AnnotatorRow, HttpAnnotator,
    MockAnnotator, ParseError, DEFAULT_INSTRUCTION, ENV_ANNOTATOR_TOKEN, ENV_ANNOTATOR_URL,
};
pub use verdicts::{
    load_proposals, save_proposals, Decision, FieldError, RaterVerdict, SimulatedRater, VerificationStore, VerifyError,
};

/// A phase label proposed by an annotator, awaiting review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposedAnnotation {
    pub id: String,
    pub session_id: String,
    pub phase: PhaseKind,
    pub description: String,
    #[serde(rename = "start", serialize_with = "crate::session::seconds::serialize")]
    pub start_s: f64,
    #[serde(rename = "stop", serialize_with = "crate::session::seconds::serialize")]
    pub stop_s: f64,
    pub present: bool,
    pub source: String,
}

impl ProposedAnnotation {
    pub fn proposal_id(session_id: &str, phase: PhaseKind) -> String {
        format!("{session_id}:{phase}")
    }

    pub fn as_annotation(&self) -> PhaseAnnotation {
        PhaseAnnotation {
            phase: self.phase,
            start_s: self.start_s,
            stop_s: self.stop_s,
            present: self.present,
            provenance: Provenance::LlmProposed,
        }
    }
}
