use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Decision, ProposedAnnotation, RaterVerdict};

/// Timestamp agreement band in seconds; 10 s is the upper end in use.
pub const DEFAULT_TOLERANCE_S: f64 = 5.0;

/// Proposal-versus-review agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    /// Fraction of boundary timestamps within `tolerance_s` of the verified
    /// value. Reported as 1.0 when no timestamps were compared.
    pub timestamp_accuracy: f64,
    /// Fraction of presence flags the raters left unchanged.
    pub label_accuracy: f64,
    pub tolerance_s: f64,
    pub n_timestamps: usize,
    pub n_timestamps_within: usize,
    pub n_labels: usize,
    pub n_labels_unchanged: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("no verdicts to compare")]
    EmptyReview,
    #[error("verdict references unknown proposal {0}")]
    UnknownProposal(String),
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Compares proposals against their final verdicts. When a proposal has
/// several verdicts the one with the highest log sequence number counts, so
/// the result does not depend on slice order.
pub fn compute_agreement(
    proposals: &[ProposedAnnotation],
    verdicts: &[RaterVerdict],
    tolerance_s: f64,
) -> Result<AgreementStats, AgreementError> {
    if verdicts.is_empty() {
        return Err(AgreementError::EmptyReview);
    }
    let by_id: BTreeMap<&str, &ProposedAnnotation> = proposals.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut latest: BTreeMap<&str, &RaterVerdict> = BTreeMap::new();
    for v in verdicts {
        if !by_id.contains_key(v.proposal_id.as_str()) {
            return Err(AgreementError::UnknownProposal(v.proposal_id.clone()));
        }
        let key = |v: &RaterVerdict| (v.seq, v.timestamp, serde_json::to_string(v).unwrap_or_default());
        latest
            .entry(v.proposal_id.as_str())
            .and_modify(|cur| {
                if key(v) > key(cur) {
                    *cur = v;
                }
            })
            .or_insert(v);
    }

    let (mut n_ts, mut n_within, mut n_labels, mut n_same) = (0, 0, 0, 0);
    for (id, v) in latest {
        let p = by_id[id];
        let verified = v.resolve(p);
        n_labels += 1;
        if verified.present == p.present {
            n_same += 1;
        }
        if p.present && verified.present {
            let (vs, ve) = match v.decision {
                Decision::Correct => (verified.start_s, verified.stop_s),
                _ => (p.start_s, p.stop_s),
            };
            for (a, b) in [(p.start_s, vs), (p.stop_s, ve)] {
                n_ts += 1;
                if (a - b).abs() <= tolerance_s {
                    n_within += 1;
                }
            }
        }
    }
    Ok(AgreementStats {
        timestamp_accuracy: ratio(n_within, n_ts),
        label_accuracy: ratio(n_same, n_labels),
        tolerance_s,
        n_timestamps: n_ts,
        n_timestamps_within: n_within,
        n_labels,
        n_labels_unchanged: n_same,
    })
}
