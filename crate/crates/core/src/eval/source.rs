use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{encode_example, EncodedExample};
use crate::net::{Model, NetError};
use crate::scalar::Scalar;
use crate::session::{Session, Split, SplitAssignment};
use crate::synth::SynthSession;
use crate::windowing::{make_examples, make_examples_from, ExampleError, ExampleOptions, WindowExample};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error(transparent)]
    Example(#[from] ExampleError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("unknown session {0}")]
    UnknownSession(String),
}

/// Window placements per split. Validation and test placements depend only
/// on `eval_seed`, so every configuration is scored on the same windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPlan {
    pub train_per_boundary: usize,
    pub eval_per_boundary: usize,
    pub data_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self { train_per_boundary: 4, eval_per_boundary: 4, data_seed: 1, eval_seed: 2 }
    }
}

impl DataPlan {
    pub fn options(&self, split: Split, duration: f64) -> ExampleOptions {
        match split {
            Split::Train => ExampleOptions::new(duration, self.data_seed, self.train_per_boundary),
            Split::Validation => ExampleOptions::new(duration, self.eval_seed ^ 0x7661_6c69_6461_7465, self.eval_per_boundary),
            Split::Test => ExampleOptions::new(duration, self.eval_seed, self.eval_per_boundary),
        }
    }
}

/// Sessions grouped by split, able to render window examples.
pub trait ExampleSource {
    fn session_ids(&self, split: Split) -> Vec<String>;
    fn examples_for(&self, session_id: &str, opts: &ExampleOptions) -> Result<Vec<WindowExample>, SourceError>;

    /// Renders and encodes one split session by session, so raw features
    /// never accumulate.
    fn encode_split<S: Scalar>(
        &self,
        model: &Model<S>,
        split: Split,
        opts: &ExampleOptions,
    ) -> Result<Vec<EncodedExample<S>>, SourceError>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        for id in self.session_ids(split) {
            for ex in self.examples_for(&id, opts)? {
                out.push(encode_example(model, &ex)?);
            }
        }
        Ok(out)
    }
}

/// Generated sessions rendered on demand from their procedural signals.
pub struct SynthSource {
    sessions: BTreeMap<String, SynthSession>,
    split: SplitAssignment,
}

impl SynthSource {
    pub fn new(sessions: Vec<SynthSession>, split: SplitAssignment) -> Self {
        Self { sessions: sessions.into_iter().map(|s| (s.session.id.clone(), s)).collect(), split }
    }
}

impl ExampleSource for SynthSource {
    fn session_ids(&self, split: Split) -> Vec<String> {
        self.split.ids(split).into_iter().map(String::from).collect()
    }

    fn examples_for(&self, id: &str, opts: &ExampleOptions) -> Result<Vec<WindowExample>, SourceError> {
        let s = self.sessions.get(id).ok_or_else(|| SourceError::UnknownSession(id.to_string()))?;
        Ok(make_examples_from(&s.session, &s.signal, &s.transcript, opts)?)
    }
}

/// Sessions from a manifest, with audio and transcripts on disk.
pub struct DiskSource {
    sessions: BTreeMap<String, Session>,
    root: PathBuf,
    split: SplitAssignment,
}

impl DiskSource {
    pub fn new(sessions: Vec<Session>, root: PathBuf, split: SplitAssignment) -> Self {
        Self { sessions: sessions.into_iter().map(|s| (s.id.clone(), s)).collect(), root, split }
    }
}

impl ExampleSource for DiskSource {
    fn session_ids(&self, split: Split) -> Vec<String> {
        self.split.ids(split).into_iter().map(String::from).collect()
    }

    fn examples_for(&self, id: &str, opts: &ExampleOptions) -> Result<Vec<WindowExample>, SourceError> {
        let s = self.sessions.get(id).ok_or_else(|| SourceError::UnknownSession(id.to_string()))?;
        Ok(make_examples(s, &self.root, opts)?)
    }
}
