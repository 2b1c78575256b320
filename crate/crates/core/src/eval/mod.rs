//! Denormalized MAE, seed aggregation, the experiment grid and its report.

mod grid;
mod source;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{EncodedInput, Mode, Model, NetError};
use crate::scalar::Scalar;
use crate::session::PhaseKind;
use crate::windowing::{denormalize_offset, BoundaryKind, WindowExample, WindowSpec};

pub use grid::{
    aggregate_results, render_csv, render_text, run_grid, CellOutcome, CellResult, CellRunner, ConfigKind, GridCell,
    GridReport, GridSpec, ReportMeta, ResultRow, TrainingRunner, COLUMN_NAMES,
};
pub use source::{DataPlan, DiskSource, ExampleSource, SourceError, SynthSource};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no evaluation records")]
    Empty,
    #[error("aggregation needs at least one table")]
    NoSeeds,
}

/// A window example after layer-0 encoding, with what evaluation needs.
#[derive(Debug, Clone)]
pub struct EncodedExample<S> {
    pub input: EncodedInput<S>,
    pub spec: WindowSpec,
    pub target: f64,
}

pub fn encode_example<S: Scalar>(model: &Model<S>, ex: &WindowExample) -> Result<EncodedExample<S>, NetError> {
    Ok(EncodedExample { input: model.encode(ex)?, spec: ex.spec.clone(), target: ex.target_offset })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub session_id: String,
    pub phase: PhaseKind,
    pub boundary: BoundaryKind,
    pub duration: f64,
    pub t_start: f64,
    pub o_true: f64,
    pub o_pred: f64,
    pub abs_error_s: f64,
}

impl EvalRecord {
    /// Error measured between absolute timestamps.
    pub fn new(spec: &WindowSpec, o_true: f64, o_pred: f64) -> Self {
        let t_abs = denormalize_offset(o_true, spec.t_start, spec.duration);
        let t_pred = denormalize_offset(o_pred, spec.t_start, spec.duration);
        Self {
            session_id: spec.session_id.clone(),
            phase: spec.phase,
            boundary: spec.boundary,
            duration: spec.duration,
            t_start: spec.t_start,
            o_true,
            o_pred,
            abs_error_s: (t_pred - t_abs).abs(),
        }
    }
}

/// Eval-mode predictions for every example.
pub fn evaluate<S: Scalar>(model: &Model<S>, examples: &[EncodedExample<S>]) -> Result<Vec<EvalRecord>, NetError> {
    examples
        .iter()
        .map(|ex| Ok(EvalRecord::new(&ex.spec, ex.target, model.forward(&ex.input, Mode::Eval)?.as_f64())))
        .collect()
}

/// Start, End and pooled Avg MAE of one phase; absent groups are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMae {
    pub avg: Option<f64>,
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub n_start: usize,
    pub n_end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaeTable {
    pub phases: BTreeMap<PhaseKind, PhaseMae>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MaeTable {
    /// Values in report column order: per phase Avg, Start, End.
    pub fn columns(&self) -> [Option<f64>; 9] {
        let mut out = [None; 9];
        for (i, p) in PhaseKind::ALL.iter().enumerate() {
            if let Some(m) = self.phases.get(p) {
                out[3 * i] = m.avg;
                out[3 * i + 1] = m.start;
                out[3 * i + 2] = m.end;
            }
        }
        out
    }
}

pub fn mae_seconds(records: &[EvalRecord]) -> Result<MaeTable, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut table = MaeTable::default();
    for phase in PhaseKind::ALL {
        let errs = |b: BoundaryKind| -> Vec<f64> {
            records.iter().filter(|r| r.phase == phase && r.boundary == b).map(|r| r.abs_error_s).collect()
        };
        let (s, e) = (errs(BoundaryKind::Start), errs(BoundaryKind::End));
        if s.is_empty() && e.is_empty() {
            continue;
        }
        let pooled: Vec<f64> = s.iter().chain(&e).copied().collect();
        table.phases.insert(
            phase,
            PhaseMae { avg: mean(&pooled), start: mean(&s), end: mean(&e), n_start: s.len(), n_end: e.len() },
        );
    }
    Ok(table)
}

/// Mean and sample standard deviation (n − 1) of one report cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Cell {
    pub fn of(values: &[f64]) -> Option<Self> {
        let m = mean(values)?;
        let std = (values.len() >= 2).then(|| {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        });
        Some(Self { mean: m, std, n: values.len() })
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.1} ± {:.1}", self.mean, s),
            None => write!(f, "{:.1}", self.mean),
        }
    }
}

/// Per-column mean ± std across seeds.
pub fn aggregate_seeds(tables: &[MaeTable]) -> Result<[Option<Cell>; 9], EvalError> {
    if tables.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let cols: Vec<[Option<f64>; 9]> = tables.iter().map(MaeTable::columns).collect();
    Ok(std::array::from_fn(|j| {
        let vals: Vec<f64> = cols.iter().filter_map(|c| c[j]).collect();
        Cell::of(&vals)
    }))
}

/// Unweighted mean of the three phase Avg cells.
pub fn headline(cells: &[Option<Cell>; 9]) -> Option<f64> {
    let avgs: Option<Vec<f64>> = (0..3).map(|i| cells[3 * i].map(|c| c.mean)).collect();
    mean(&avgs?)
}
