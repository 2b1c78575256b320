//! Local HTTP API over the verification store, used by the review UI.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use phaseloc::ingest::{encode_wav, read_wav_range, TranscriptSentence};
use phaseloc::session::{PhaseAnnotation, Session};
use phaseloc::supervision::{
    compute_agreement, AgreementStats, FieldError, ProposedAnnotation, RaterVerdict, VerificationStore, VerifyError,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub struct AppState {
    pub store: RwLock<VerificationStore>,
    pub sessions: BTreeMap<String, Session>,
    pub corpus: PathBuf,
    pub tolerance_s: f64,
    pub pad_s: f64,
    pub excerpt_s: f64,
}

impl AppState {
    pub fn new(store: VerificationStore, sessions: Vec<Session>, corpus: PathBuf) -> Self {
        let d = crate::config::ReviewConfig::default();
        Self {
            store: RwLock::new(store),
            sessions: sessions.into_iter().map(|s| (s.id.clone(), s)).collect(),
            corpus,
            tolerance_s: d.tolerance_s,
            pad_s: d.pad_s,
            excerpt_s: d.excerpt_s,
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/proposal/{id}", get(proposal))
        .route("/api/proposal/{id}/audio", get(audio))
        .route("/api/proposal/{id}/verdict", post(verdict))
        .route("/api/stats", get(stats))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("review API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn field_errors(errors: Vec<FieldError>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": "invalid verdict", "fields": errors }))).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueResponse {
    pub pending: Vec<ProposedAnnotation>,
    pub n_total: usize,
    pub n_finalized: usize,
}

async fn queue(State(st): State<Arc<AppState>>) -> Json<QueueResponse> {
    let store = st.store.read().expect("store lock");
    let pending: Vec<ProposedAnnotation> = store.pending().into_iter().cloned().collect();
    let n_total = store.proposals().count();
    Json(QueueResponse { n_finalized: n_total - pending.len(), n_total, pending })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Excerpt {
    /// Absolute session times.
    pub from_s: f64,
    pub to_s: f64,
    pub sentences: Vec<TranscriptSentence>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProposalResponse {
    pub proposal: ProposedAnnotation,
    pub finalized: bool,
    pub verified: Option<PhaseAnnotation>,
    pub session_duration_s: Option<f64>,
    pub excerpt_start: Option<Excerpt>,
    pub excerpt_stop: Option<Excerpt>,
}

fn excerpt(sents: &[TranscriptSentence], at: f64, ctx: f64) -> Excerpt {
    let (from_s, to_s) = ((at - ctx).max(0.0), at + ctx);
    let sentences = sents.iter().filter(|s| s.end_s >= from_s && s.start_s <= to_s).cloned().collect();
    Excerpt { from_s, to_s, sentences }
}

async fn proposal(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let (p, finalized, verified) = {
        let store = st.store.read().expect("store lock");
        let Some(p) = store.proposal(&id).cloned() else {
            return error(StatusCode::NOT_FOUND, format!("unknown proposal {id}"));
        };
        (p, store.is_finalized(&id), store.verified(&id))
    };
    let session = st.sessions.get(&p.session_id);
    let transcript = session.and_then(|s| {
        let (_, path) = s.resolved_paths(&st.corpus);
        phaseloc::ingest::parse_transcript(&path).ok()
    });
    let (excerpt_start, excerpt_stop) = match &transcript {
        Some(t) => (Some(excerpt(t, p.start_s, st.excerpt_s)), Some(excerpt(t, p.stop_s, st.excerpt_s))),
        None => (None, None),
    };
    Json(ProposalResponse {
        session_duration_s: session.map(|s| s.duration_s),
        proposal: p,
        finalized,
        verified,
        excerpt_start,
        excerpt_stop,
    })
    .into_response()
}

#[derive(Debug, Deserialize)]
pub struct AudioQuery {
    pub pad: Option<f64>,
    /// `start` (default) or `stop`.
    pub boundary: Option<String>,
}

async fn audio(State(st): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<AudioQuery>) -> Response {
    let Some(p) = st.store.read().expect("store lock").proposal(&id).cloned() else {
        return error(StatusCode::NOT_FOUND, format!("unknown proposal {id}"));
    };
    let pad = q.pad.unwrap_or(st.pad_s);
    if !(pad.is_finite() && pad > 0.0) {
        return error(StatusCode::BAD_REQUEST, "pad must be a positive number of seconds");
    }
    let at = match q.boundary.as_deref() {
        None | Some("start") => p.start_s,
        Some("stop") => p.stop_s,
        Some(other) => return error(StatusCode::BAD_REQUEST, format!("boundary must be start or stop, got {other}")),
    };
    let Some(session) = st.sessions.get(&p.session_id) else {
        return error(StatusCode::NOT_FOUND, format!("session {} is not in the corpus", p.session_id));
    };
    let (t0, t1) = audio_range(at, pad, session.duration_s);
    let (path, _) = session.resolved_paths(&st.corpus);
    // the decode is blocking file io
    let result = tokio::task::spawn_blocking(move || read_wav_range(&path, t0, t1 - t0)).await;
    match result {
        Ok(Ok(buf)) => ([(header::CONTENT_TYPE, "audio/wav")], encode_wav(&buf)).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("audio unavailable: {e}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// `[at − pad, at + pad]` clamped to the session, never empty.
pub fn audio_range(at: f64, pad: f64, duration: f64) -> (f64, f64) {
    let t0 = (at - pad).clamp(0.0, duration);
    let t1 = (at + pad).min(duration);
    (t0, t1.max(t0 + 1.0 / 16_000.0))
}

async fn verdict(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    if st.store.read().expect("store lock").proposal(&id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown proposal {id}"));
    }
    let mut value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return field_errors(vec![FieldError { field: "body".into(), message: e.to_string() }]),
    };
    let Some(obj) = value.as_object_mut() else {
        return field_errors(vec![FieldError { field: "body".into(), message: "expected a JSON object".into() }]);
    };
    match obj.get("proposal_id") {
        None => {
            obj.insert("proposal_id".into(), Value::String(id.clone()));
        }
        Some(Value::String(s)) if *s == id => {}
        Some(_) => {
            return field_errors(vec![FieldError {
                field: "proposal_id".into(),
                message: "does not match the proposal in the path".into(),
            }])
        }
    }
    let v: RaterVerdict = match serde_json::from_value(value) {
        Ok(v) => v,
        Err(e) => return field_errors(vec![FieldError { field: "body".into(), message: e.to_string() }]),
    };
    let result = st.store.write().expect("store lock").apply_verdict(v);
    match result {
        Ok(label) => Json(json!({ "verified": label })).into_response(),
        Err(VerifyError::NotFound(id)) => error(StatusCode::NOT_FOUND, format!("unknown proposal {id}")),
        Err(VerifyError::Invalid(errors)) => field_errors(errors),
        Err(VerifyError::Conflict(id)) => error(StatusCode::CONFLICT, format!("proposal {id} is already finalized")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Agreement statistics at the server's tolerance plus review progress. The
/// agreement fields are absent until the first verdict.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatsResponse {
    pub n_proposals: usize,
    pub n_reviewed: usize,
    #[serde(flatten)]
    pub agreement: Option<AgreementStats>,
}

pub fn stats_of(store: &VerificationStore, tolerance_s: f64) -> StatsResponse {
    let proposals: Vec<ProposedAnnotation> = store.proposals().cloned().collect();
    let n_reviewed = proposals.iter().filter(|p| store.is_finalized(&p.id)).count();
    StatsResponse {
        n_proposals: proposals.len(),
        n_reviewed,
        agreement: compute_agreement(&proposals, store.log(), tolerance_s).ok(),
    }
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<StatsResponse> {
    Json(stats_of(&st.store.read().expect("store lock"), st.tolerance_s))
}
