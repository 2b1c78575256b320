use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use phaseloc::ingest::{read_wav, read_wav_range};
use phaseloc::session::{load_manifest, PhaseKind, Session};
use phaseloc::supervision::{ProposedAnnotation, VerificationStore};
use phaseloc::synth::{generate_corpus, write_corpus, SynthConfig};
use phaseloc_gateway::api::{audio_range, router, stats_of, AppState, ProposalResponse, QueueResponse, StatsResponse};
use phaseloc_gateway::cli::review_loop;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    sessions: Vec<Session>,
    proposals: Vec<ProposedAnnotation>,
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        n_sessions: 3,
        duration_mean_s: 300.0,
        duration_std_s: 20.0,
        duration_min_s: 260.0,
        duration_max_s: 340.0,
        phase_minutes: [1.0, 2.0, 1.0],
        seed: 3,
        ..SynthConfig::default()
    }
}

/// Three short sessions; proposals are the true labels except the first
/// session's P2, moved to start at 105.83 s.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&generate_corpus(&small_synth()).unwrap(), &corpus).unwrap();
    let sessions = load_manifest(&corpus.join("manifest.json")).unwrap();
    let mut proposals = Vec::new();
    for s in &sessions {
        for a in &s.annotations {
            proposals.push(ProposedAnnotation {
                id: ProposedAnnotation::proposal_id(&s.id, a.phase),
                session_id: s.id.clone(),
                phase: a.phase,
                description: a.phase.description().to_string(),
                start_s: a.start_s,
                stop_s: a.stop_s,
                present: true,
                source: "test".into(),
            });
        }
    }
    proposals[1].start_s = 105.83;
    assert_eq!(proposals[1].phase, PhaseKind::P2);
    Fixture { _dir: dir, corpus, sessions, proposals }
}

impl Fixture {
    fn state(&self, log: &Path) -> Arc<AppState> {
        let store = VerificationStore::open(self.proposals.clone(), log).unwrap();
        Arc::new(AppState::new(store, self.sessions.clone(), self.corpus.clone()))
    }

    fn id(&self, i: usize) -> String {
        self.proposals[i].id.clone()
    }
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json<T: serde::de::DeserializeOwned>(st: &Arc<AppState>, uri: &str) -> T {
    let (status, body) = call(st, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn post(st: &Arc<AppState>, id: &str, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = call(st, "POST", &format!("/api/proposal/{id}/verdict"), Some(body)).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn queue_and_proposal_detail() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let st = fx.state(&dir.path().join("v.jsonl"));
    let q: QueueResponse = get_json(&st, "/api/queue").await;
    assert_eq!((q.n_total, q.n_finalized, q.pending.len()), (fx.proposals.len(), 0, fx.proposals.len()));

    let p: ProposalResponse = get_json(&st, &format!("/api/proposal/{}", fx.id(1))).await;
    assert_eq!(p.proposal, fx.proposals[1]);
    assert!(!p.finalized && p.verified.is_none());
    assert_eq!(p.session_duration_s, Some(fx.sessions[0].duration_s));
    let ex = p.excerpt_start.unwrap();
    assert_eq!((ex.from_s, ex.to_s), (105.83 - 60.0, 105.83 + 60.0));
    assert!(!ex.sentences.is_empty());
    assert!(ex.sentences.iter().all(|s| s.end_s >= ex.from_s && s.start_s <= ex.to_s));

    let (status, _) = call(&st, "GET", "/api/proposal/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn audio_clip_is_the_padded_range() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let st = fx.state(&dir.path().join("v.jsonl"));
    let wav_path = fx.corpus.join(&fx.sessions[0].audio_path);

    let (status, body) = call(&st, "GET", &format!("/api/proposal/{}/audio?pad=15", fx.id(1)), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&body[..4], b"RIFF");
    let clip = read_wav(Cursor::new(body)).unwrap();
    assert_eq!(clip.sample_rate, 16_000);
    assert!((clip.duration_s() - 30.0).abs() <= 1.0 / 16_000.0);
    let direct = read_wav_range(&wav_path, 90.83, 30.0).unwrap();
    assert_eq!(clip.samples.len(), direct.samples.len());
    for (a, b) in clip.samples.iter().zip(&direct.samples) {
        assert!((a - b).abs() <= 1.0 / 32_768.0);
    }

    // a pad reaching past the session start is clamped
    let p1_start = fx.proposals[0].start_s;
    assert!(p1_start < 30.0);
    let (status, body) = call(&st, "GET", &format!("/api/proposal/{}/audio?pad=30", fx.id(0)), None).await;
    assert_eq!(status, StatusCode::OK);
    let clip = read_wav(Cursor::new(body)).unwrap();
    assert!((clip.duration_s() - (p1_start + 30.0)).abs() <= 1.0 / 16_000.0);

    // and past the session end
    let (stop, duration) = (fx.proposals[2].stop_s, fx.sessions[0].duration_s);
    let pad = duration - stop + 20.0;
    let (status, body) =
        call(&st, "GET", &format!("/api/proposal/{}/audio?pad={pad}&boundary=stop", fx.id(2)), None).await;
    assert_eq!(status, StatusCode::OK);
    let clip = read_wav(Cursor::new(body)).unwrap();
    assert!((clip.duration_s() - (duration - (stop - pad))).abs() <= 1.0 / 16_000.0);

    for q in ["pad=0", "pad=-3", "pad=abc", "boundary=middle"] {
        let (status, _) = call(&st, "GET", &format!("/api/proposal/{}/audio?{q}", fx.id(1)), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{q}");
    }
    let (status, _) = call(&st, "GET", "/api/proposal/nope/audio", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn audio_range_clamps_to_the_session() {
    assert_eq!(audio_range(105.83, 15.0, 300.0), (105.83 - 15.0, 105.83 + 15.0));
    assert_eq!(audio_range(5.0, 15.0, 300.0), (0.0, 20.0));
    assert_eq!(audio_range(295.0, 15.0, 300.0), (280.0, 300.0));
    let (t0, t1) = audio_range(300.0, 15.0, 300.0);
    assert!(t1 > t0 && t0 == 285.0);
}

#[tokio::test]
async fn verdict_validation_and_conflicts() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let st = fx.state(&dir.path().join("v.jsonl"));
    let id = fx.id(1);

    let (status, _) = post(&st, "nope", json!({"decision": "accept"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = post(&st, &id, json!({"decision": "correct", "corrected_start": 100.0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = body["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"corrected_stop"), "{body}");

    let (status, body) = post(&st, &id, json!({"decision": "correct", "corrected_start": 200.0, "corrected_stop": 150.0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let (status, _) = post(&st, &id, json!({"decision": "maybe"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&st, &id, json!({"decision": "accept", "proposal_id": fx.id(0)})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&st, &id, json!([1, 2])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&st, "POST", &format!("/api/proposal/{id}/verdict"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // nothing invalid reached the log
    let stats: StatsResponse = get_json(&st, "/api/stats").await;
    assert_eq!(stats.n_reviewed, 0);
    assert!(stats.agreement.is_none());

    let correct = json!({"decision": "correct", "corrected_start": 107.0, "corrected_stop": 250.0});
    assert_eq!(post(&st, &id, correct.clone()).await.0, StatusCode::OK);
    assert_eq!(post(&st, &id, correct).await.0, StatusCode::CONFLICT);
    let (status, _) = post(&st, &id, json!({"decision": "correct", "corrected_start": 108.0, "corrected_stop": 250.0})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = post(&st, &id, json!({"decision": "accept"})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // an identical accept is a no-op
    let other = fx.id(0);
    assert_eq!(post(&st, &other, json!({"decision": "accept"})).await.0, StatusCode::OK);
    assert_eq!(post(&st, &other, json!({"decision": "accept"})).await.0, StatusCode::OK);
    let stats: StatsResponse = get_json(&st, "/api/stats").await;
    assert_eq!(stats.n_reviewed, 2);
}

#[tokio::test]
async fn accepting_everything_gives_full_agreement_and_survives_restart() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("v.jsonl");
    let st = fx.state(&log);
    for p in &fx.proposals {
        let (status, body) = post(&st, &p.id, json!({"decision": "accept"})).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["verified"]["start"].as_f64(), Some(p.start_s));
    }
    let (_, raw) = call(&st, "GET", "/api/stats", None).await;
    let raw: Value = serde_json::from_slice(&raw).unwrap();
    assert_eq!(raw["timestamp_accuracy"], json!(1.0));
    assert_eq!(raw["tolerance_s"], json!(5.0));
    let stats: StatsResponse = serde_json::from_value(raw).unwrap();
    let a = stats.agreement.clone().unwrap();
    assert_eq!((a.timestamp_accuracy, a.label_accuracy), (1.0, 1.0));
    assert_eq!(stats.n_reviewed, fx.proposals.len());
    let q: QueueResponse = get_json(&st, "/api/queue").await;
    assert!(q.pending.is_empty());

    drop(st);
    let again: StatsResponse = get_json(&fx.state(&log), "/api/stats").await;
    assert_eq!(again, stats);
}

#[tokio::test]
async fn browser_and_terminal_reviews_agree() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();

    // two nudges of +1.0 s from 105.83 in the browser
    let corrected = 105.83 + 1.0 + 1.0;
    assert_eq!(format!("{corrected}"), "107.83");
    let p1 = &fx.proposals[1];

    let st = fx.state(&dir.path().join("ui.jsonl"));
    let (status, body) = post(
        &st,
        &p1.id,
        json!({"decision": "correct", "corrected_start": corrected, "corrected_stop": p1.stop_s, "rater": "r"}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["verified"]["start"].as_f64(), Some(107.83));
    assert_eq!(post(&st, &fx.id(0), json!({"decision": "accept"})).await.0, StatusCode::OK);
    assert_eq!(post(&st, &fx.id(2), json!({"decision": "reject-label"})).await.0, StatusCode::OK);
    let ui: StatsResponse = get_json(&st, "/api/stats").await;

    let mut store = VerificationStore::open(fx.proposals.clone(), &dir.path().join("tty.jsonl")).unwrap();
    // pending order is by id; the fixture ids sort in proposal order
    let script = "a\nc\n107.83\n\nr\nq\n";
    let mut out = Vec::new();
    let n = review_loop(&mut store, "r", &mut Cursor::new(script), &mut out).unwrap();
    assert_eq!(n, 3, "{}", String::from_utf8_lossy(&out));
    let tty = stats_of(&store, 5.0);
    assert_eq!(tty, ui);
    assert_eq!(store.verified(&p1.id).unwrap().start_s, 107.83);
    let a = ui.agreement.unwrap();
    // 107.83 vs 105.83 is within 5 s, the reject changes a label
    assert_eq!(a.timestamp_accuracy, 1.0);
    assert!(a.label_accuracy < 1.0);
}
