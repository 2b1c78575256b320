//! Run configuration: a JSON file whose every field has a default. Command
//! line flags are applied on top of it.

use std::path::{Path, PathBuf};

use phaseloc::eval::{DataPlan, GridSpec};
use phaseloc::net::ModelConfig;
use phaseloc::optim::TrainConfig;
use phaseloc::supervision::{DEFAULT_INSTRUCTION, DEFAULT_TOLERANCE_S};
use phaseloc::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}, line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotatorKind {
    /// Ground-truth labels from the manifest plus seeded jitter.
    Mock,
    /// HTTP endpoint named by the annotator URL environment variable.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub kind: AnnotatorKind,
    pub jitter_s: f64,
    pub instruction: String,
    pub timeout_s: u64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self { kind: AnnotatorKind::Mock, jitter_s: 2.0, instruction: DEFAULT_INSTRUCTION.to_string(), timeout_s: 120 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub host: String,
    pub port: u16,
    pub tolerance_s: f64,
    /// Audio padding around a boundary, seconds.
    pub pad_s: f64,
    /// Transcript context on each side of a boundary, seconds.
    pub excerpt_s: f64,
    pub rater: String,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8765,
            tolerance_s: DEFAULT_TOLERANCE_S,
            pad_s: 15.0,
            excerpt_s: 60.0,
            rater: "rater".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus root holding `manifest.json`.
    pub corpus: PathBuf,
    /// Root for proposals, verdicts, checkpoints and results.
    pub out: PathBuf,
    /// Session split and mock annotator seed.
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub synth: SynthConfig,
    pub annotator: AnnotatorConfig,
    pub review: ReviewConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPlan,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            out: "runs".into(),
            seed: 0,
            split: [0.7, 0.15, 0.15],
            synth: SynthConfig::default(),
            annotator: AnnotatorConfig::default(),
            review: ReviewConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataPlan::default(),
            grid: GridSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Value checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid(format!("split fractions {:?} must be non-negative and sum to 1", self.split));
        }
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.grid.validate().map_err(ConfigError::Invalid)?;
        if self.data.train_per_boundary == 0 || self.data.eval_per_boundary == 0 {
            return invalid("placements per boundary must be at least 1".into());
        }
        let r = &self.review;
        if !(r.tolerance_s >= 0.0) || !(r.pad_s > 0.0) || !(r.excerpt_s >= 0.0) {
            return invalid("review tolerance and excerpt must be non-negative and pad positive".into());
        }
        if !(self.annotator.jitter_s >= 0.0) {
            return invalid("annotator jitter must be non-negative".into());
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus.join("manifest.json")
    }

    pub fn require_corpus(&self) -> Result<(), ConfigError> {
        let m = self.manifest_path();
        if m.is_file() {
            Ok(())
        } else {
            Err(ConfigError::MissingPath { what: "corpus manifest", path: m })
        }
    }

    pub fn proposals_path(&self) -> PathBuf {
        self.out.join("review").join("proposals.jsonl")
    }

    pub fn verdicts_path(&self) -> PathBuf {
        self.out.join("review").join("verdicts.jsonl")
    }

    pub fn grid_dir(&self) -> PathBuf {
        self.out.join("grid")
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}
