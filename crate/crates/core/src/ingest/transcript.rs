use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Therapist,
    Client,
}

/// One timestamped transcript sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptSentence {
    #[serde(rename = "start", serialize_with = "crate::session::seconds::serialize")]
    pub start_s: f64,
    #[serde(rename = "end", serialize_with = "crate::session::seconds::serialize")]
    pub end_s: f64,
    pub speaker: Speaker,
    pub text: String,
}

pub fn parse_transcript(path: &Path) -> Result<Vec<TranscriptSentence>, IngestError> {
    parse_transcript_str(&std::fs::read_to_string(path)?)
}

/// Parses and validates the transcript schema: non-negative times,
/// `start <= end`, sorted by start.
pub fn parse_transcript_str(text: &str) -> Result<Vec<TranscriptSentence>, IngestError> {
    let sents: Vec<TranscriptSentence> =
        serde_json::from_str(text).map_err(|e| IngestError::Parse(e.to_string()))?;
    for (i, s) in sents.iter().enumerate() {
        if !(s.start_s >= 0.0) || !(s.start_s <= s.end_s) {
            return Err(IngestError::Parse(format!(
                "sentence {i}: invalid times start={} end={}",
                s.start_s, s.end_s
            )));
        }
        if i > 0 && s.start_s < sents[i - 1].start_s {
            return Err(IngestError::Parse(format!("sentence {i}: not sorted by start")));
        }
    }
    Ok(sents)
}

pub fn transcript_to_string(sents: &[TranscriptSentence]) -> String {
    let mut s = serde_json::to_string_pretty(sents).expect("transcript serializes");
    s.push('\n');
    s
}

/// Sentences overlapping the half-open window `[t0, t0 + dur)`, with times
/// re-based to the window start.
pub fn excerpt_for_window(sents: &[TranscriptSentence], t0: f64, dur: f64) -> Vec<TranscriptSentence> {
    let t1 = t0 + dur;
    // sorted by start: nothing at or after t1 can overlap
    let end = sents.partition_point(|s| s.start_s < t1);
    sents[..end]
        .iter()
        .filter(|s| s.end_s >= t0)
        .map(|s| TranscriptSentence { start_s: s.start_s - t0, end_s: s.end_s - t0, ..s.clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(a: f64, b: f64) -> TranscriptSentence {
        TranscriptSentence { start_s: a, end_s: b, speaker: Speaker::Therapist, text: "x".into() }
    }

    #[test]
    fn parses_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        std::fs::write(
            &p,
            r#"[{"start": 4.17, "end": 37.27, "speaker": "therapist", "text": "Let's talk about the plan."},
                {"start": 40.0, "end": 41.5, "speaker": "client", "text": "Okay."},
                {"start": 42.0, "end": 45.0, "speaker": "therapist", "text": "Good."}]"#,
        )
        .unwrap();
        let s = parse_transcript(&p).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].start_s, 4.17);
        assert_eq!(s[0].end_s, 37.27);
        assert_eq!(s[0].speaker, Speaker::Therapist);
    }

    #[test]
    fn rejects_unknown_speaker_unsorted_and_negative() {
        let bad = [
            r#"[{"start": 1.0, "end": 2.0, "speaker": "nurse", "text": "hi"}]"#,
            r#"[{"start": 5.0, "end": 6.0, "speaker": "client", "text": "a"},
                {"start": 1.0, "end": 2.0, "speaker": "client", "text": "b"}]"#,
            r#"[{"start": -1.0, "end": 2.0, "speaker": "client", "text": "a"}]"#,
            r#"[{"start": 3.0, "end": 2.0, "speaker": "client", "text": "a"}]"#,
        ];
        for text in bad {
            assert!(matches!(parse_transcript_str(text), Err(IngestError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn excerpt_uses_half_open_window() {
        let sents = vec![sent(10.0, 20.0), sent(29.0, 35.0), sent(30.0, 35.0)];
        let ex = excerpt_for_window(&sents, 0.0, 30.0);
        assert_eq!(ex, vec![sent(10.0, 20.0), sent(29.0, 35.0)]);
        let ex = excerpt_for_window(&sents, 15.0, 30.0);
        assert_eq!(ex[0], sent(-5.0, 5.0));
        assert!(excerpt_for_window(&sents, 100.0, 30.0).is_empty());
    }

    #[test]
    fn round_trips_through_text() {
        let sents = vec![sent(1.0, 2.5)];
        assert_eq!(parse_transcript_str(&transcript_to_string(&sents)).unwrap(), sents);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn excerpt_is_overlapping_subset(
                mut starts in prop::collection::vec((0.0f64..500.0, 0.0f64..20.0), 0..40),
                t0 in 0.0f64..500.0,
                dur in prop::sample::select(vec![30.0, 60.0, 120.0]),
            ) {
                starts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let sents: Vec<_> = starts.iter().map(|&(s, l)| sent(s, s + l)).collect();
                let ex = excerpt_for_window(&sents, t0, dur);
                let expected = sents.iter().filter(|s| s.start_s < t0 + dur && s.end_s >= t0).count();
                prop_assert_eq!(ex.len(), expected);
                for s in &ex {
                    prop_assert!(s.start_s < dur && s.end_s >= 0.0);
                    let c = s.start_s.clamp(0.0, dur);
                    prop_assert!((0.0..=dur).contains(&c));
                }
            }
        }
    }
}
