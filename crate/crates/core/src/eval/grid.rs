use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::source::{DataPlan, ExampleSource};
use super::{aggregate_seeds, evaluate, headline, mae_seconds, Cell, EncodedExample, EvalRecord, MaeTable};
use crate::net::{save_checkpoint, Model, ModelConfig};
use crate::optim::{train, write_history, TrainConfig, TrainEvent, PAPER_SEEDS};
use crate::session::{write_atomic, PhaseKind, Split};
use crate::windowing::WINDOW_DURATIONS;

pub const COLUMN_NAMES: [&str; 9] =
    ["P1 Avg", "P1 Start", "P1 End", "P2 Avg", "P2 Start", "P2 End", "P3 Avg", "P3 Start", "P3 End"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConfigKind {
    HeadOnly,
    Lora(usize),
}

impl ConfigKind {
    pub const PAPER: [ConfigKind; 4] = [ConfigKind::HeadOnly, ConfigKind::Lora(2), ConfigKind::Lora(4), ConfigKind::Lora(8)];

    pub fn label(&self) -> String {
        match self {
            ConfigKind::HeadOnly => "Head Only".into(),
            ConfigKind::Lora(r) => format!("LoRA (r={r})"),
        }
    }

    pub fn slug(&self) -> String {
        match self {
            ConfigKind::HeadOnly => "head-only".into(),
            ConfigKind::Lora(r) => format!("lora{r}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        if matches!(s.as_str(), "head-only" | "headonly" | "head") {
            return Some(ConfigKind::HeadOnly);
        }
        let r: usize = s.strip_prefix("lora")?.trim_start_matches(['-', '_', 'r', '=']).parse().ok()?;
        (r > 0).then_some(ConfigKind::Lora(r))
    }

    pub fn model_config(&self, template: &ModelConfig) -> ModelConfig {
        match *self {
            ConfigKind::HeadOnly => ModelConfig { lora_rank: 0, lora_alpha: 0.0, head_only: true, ..template.clone() },
            ConfigKind::Lora(r) => {
                ModelConfig { lora_rank: r, lora_alpha: 2.0 * r as f64, head_only: false, ..template.clone() }
            }
        }
    }
}

impl std::str::FromStr for ConfigKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ConfigKind::parse(s).ok_or_else(|| format!("unknown config {s:?} (expected head-only or loraN)"))
    }
}

impl std::fmt::Display for ConfigKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.slug())
    }
}

impl TryFrom<String> for ConfigKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ConfigKind> for String {
    fn from(c: ConfigKind) -> String {
        c.slug()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub windows: Vec<f64>,
    pub configs: Vec<ConfigKind>,
    pub seeds: Vec<u64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { windows: WINDOW_DURATIONS.to_vec(), configs: ConfigKind::PAPER.to_vec(), seeds: PAPER_SEEDS.to_vec() }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.windows.is_empty() || self.configs.is_empty() || self.seeds.is_empty() {
            return Err("grid needs at least one window, config and seed".into());
        }
        if self.windows.iter().any(|w| !(*w > 0.0)) {
            return Err("window durations must be positive".into());
        }
        Ok(())
    }

    /// Window-major, then config, then seed.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.windows.len() * self.configs.len() * self.seeds.len());
        for &window in &self.windows {
            for &config in &self.configs {
                for &seed in &self.seeds {
                    out.push(GridCell { window, config, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub window: f64,
    pub config: ConfigKind,
    pub seed: u64,
}

fn window_label(w: f64) -> String {
    if w.fract() == 0.0 {
        format!("{}s", w as i64)
    } else {
        format!("{w}s")
    }
}

impl GridCell {
    pub fn key(&self) -> String {
        format!("w{}-{}-s{}", window_label(self.window).trim_end_matches('s'), self.config.slug(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellOutcome {
    Ok { table: MaeTable, best_epoch: usize, best_val_mae_s: f64, records: Vec<EvalRecord> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub outcome: CellOutcome,
}

/// Trains and scores one grid cell.
pub trait CellRunner {
    fn run(&mut self, cell: &GridCell) -> Result<CellOutcome, String>;
}

/// Runs every cell, persisting each result under `results_dir/cells/` before
/// moving on. Cells already on disk are loaded instead of rerun; a failing
/// cell is recorded and the grid continues.
pub fn run_grid(
    grid: &GridSpec,
    runner: &mut dyn CellRunner,
    results_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> std::io::Result<Vec<CellResult>> {
    let cell_dir = results_dir.map(|d| d.join("cells"));
    let mut out = Vec::new();
    for cell in grid.cells() {
        let path = cell_dir.as_ref().map(|d| d.join(format!("{}.json", cell.key())));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Ok(prev) = serde_json::from_slice::<CellResult>(&std::fs::read(p)?) {
                if prev.cell == cell {
                    log(&format!("{}: loaded from {}", cell.key(), p.display()));
                    out.push(prev);
                    continue;
                }
            }
        }
        let outcome = runner.run(&cell).unwrap_or_else(|error| CellOutcome::Failed { error });
        match &outcome {
            CellOutcome::Ok { best_val_mae_s, .. } => {
                log(&format!("{}: done (best val MAE {best_val_mae_s:.2} s)", cell.key()))
            }
            CellOutcome::Failed { error } => log(&format!("{}: failed: {error}", cell.key())),
        }
        let result = CellResult { cell, outcome };
        if let Some(p) = &path {
            write_atomic(p, &serde_json::to_vec_pretty(&result).map_err(std::io::Error::other)?)?;
        }
        out.push(result);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub placements_per_boundary: usize,
    pub seeds: Vec<u64>,
    pub n_cells: usize,
    pub failed: Vec<String>,
}

/// One aggregated value: a (window, config) row group, phase and column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub window: f64,
    pub config: ConfigKind,
    pub phase: PhaseKind,
    /// "avg", "start" or "end".
    pub boundary: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_seeds: usize,
}

/// The machine-readable results file; both report formats render from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub meta: ReportMeta,
    pub rows: Vec<ResultRow>,
}

const BOUNDARY_COLS: [&str; 3] = ["avg", "start", "end"];

pub fn aggregate_results(grid: &GridSpec, results: &[CellResult], placements_per_boundary: usize) -> GridReport {
    let mut rows = Vec::new();
    for &window in &grid.windows {
        for &config in &grid.configs {
            let tables: Vec<MaeTable> = results
                .iter()
                .filter(|r| r.cell.window == window && r.cell.config == config)
                .filter_map(|r| match &r.outcome {
                    CellOutcome::Ok { table, .. } => Some(table.clone()),
                    CellOutcome::Failed { .. } => None,
                })
                .collect();
            let cells = aggregate_seeds(&tables).unwrap_or([None; 9]);
            for (j, c) in cells.iter().enumerate() {
                rows.push(ResultRow {
                    window,
                    config,
                    phase: PhaseKind::ALL[j / 3],
                    boundary: BOUNDARY_COLS[j % 3].into(),
                    mean: c.map(|c| c.mean),
                    std: c.and_then(|c| c.std),
                    n_seeds: c.map_or(0, |c| c.n),
                });
            }
        }
    }
    let failed = results
        .iter()
        .filter(|r| matches!(r.outcome, CellOutcome::Failed { .. }))
        .map(|r| r.cell.key())
        .collect();
    GridReport {
        meta: ReportMeta { placements_per_boundary, seeds: grid.seeds.clone(), n_cells: results.len(), failed },
        rows,
    }
}

type Group = ((f64, ConfigKind), [Option<Cell>; 9]);

fn groups(report: &GridReport) -> Vec<Group> {
    let mut out: Vec<Group> = Vec::new();
    for r in &report.rows {
        let key = (r.window, r.config);
        if out.last().map(|g| g.0) != Some(key) {
            out.push((key, [None; 9]));
        }
        let pi = PhaseKind::ALL.iter().position(|p| *p == r.phase).unwrap_or(0);
        let bi = BOUNDARY_COLS.iter().position(|b| *b == r.boundary).unwrap_or(0);
        out.last_mut().expect("pushed above").1[3 * pi + bi] =
            r.mean.map(|mean| Cell { mean, std: r.std, n: r.n_seeds });
    }
    out
}

fn cell_text(c: &Option<Cell>) -> String {
    c.map_or_else(|| "n/a".into(), |c| c.to_string())
}

fn best_line(groups: &[Group]) -> Option<String> {
    let (key, h) = groups
        .iter()
        .filter_map(|(k, cells)| headline(cells).map(|h| (k, h)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    Some(format!("Best: {} {}, mean of phase Avg MAE {:.1} s", window_label(key.0), key.1.label(), h))
}

pub fn render_text(report: &GridReport) -> String {
    let m = &report.meta;
    let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
    let mut out = String::new();
    let _ = writeln!(out, "Per-phase average, start and end MAE (seconds) on the test split, mean ± S.D. over seeds {}.", seeds.join(", "));
    let _ = writeln!(out, "Eval placements per test boundary: {}. Cells: {} ({} failed).", m.placements_per_boundary, m.n_cells, m.failed.len());
    let gs = groups(report);
    let mut table: Vec<Vec<String>> = vec![["Window", "Config"].iter().chain(&COLUMN_NAMES).map(|s| s.to_string()).collect()];
    let mut last_window = None;
    for ((w, c), cells) in &gs {
        let wl = if last_window == Some(*w) { String::new() } else { window_label(*w) };
        last_window = Some(*w);
        let mut row = vec![wl, c.label()];
        row.extend(cells.iter().map(cell_text));
        table.push(row);
    }
    let widths: Vec<usize> =
        (0..table[0].len()).map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    for row in &table {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count()))).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    if let Some(b) = best_line(&gs) {
        let _ = writeln!(out, "{b}");
    }
    if !m.failed.is_empty() {
        let _ = writeln!(out, "Failed cells: {}", m.failed.join(", "));
    }
    out
}

pub fn render_csv(report: &GridReport) -> String {
    let mut out = String::from("window,config");
    for c in COLUMN_NAMES {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for ((w, c), cells) in groups(report) {
        let _ = write!(out, "{},{}", window_label(w), c.label());
        for cell in &cells {
            let _ = write!(out, ",{}", cell_text(cell));
        }
        out.push('\n');
    }
    out
}

struct WindowData {
    window: f64,
    train: Vec<EncodedExample<f32>>,
    val: Vec<EncodedExample<f32>>,
    test: Vec<EncodedExample<f32>>,
}

/// Cell runner that trains on examples from `source`. Encoded examples of
/// the current window are shared across the window's cells.
pub struct TrainingRunner<'a, Src: ExampleSource> {
    pub source: &'a Src,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plan: DataPlan,
    /// Per-cell checkpoint and history directory root.
    pub artifacts: Option<PathBuf>,
    pub log: Box<dyn FnMut(&str) + 'a>,
    cache: Option<WindowData>,
}

impl<'a, Src: ExampleSource> TrainingRunner<'a, Src> {
    pub fn new(source: &'a Src, model: ModelConfig, train: TrainConfig, plan: DataPlan) -> Self {
        Self { source, model, train, plan, artifacts: None, log: Box::new(|_| {}), cache: None }
    }

    fn window_data(&mut self, window: f64) -> Result<&WindowData, String> {
        if self.cache.as_ref().map(|c| c.window) != Some(window) {
            self.cache = None;
            // the frozen base is shared by every config, so any of them encodes
            let encoder = Model::<f32>::new(ConfigKind::HeadOnly.model_config(&self.model), 0).map_err(|e| e.to_string())?;
            let split = |s: Split| {
                self.source.encode_split(&encoder, s, &self.plan.options(s, window)).map_err(|e| e.to_string())
            };
            let (train, val, test) = (split(Split::Train)?, split(Split::Validation)?, split(Split::Test)?);
            (self.log)(&format!(
                "window {}: {} train / {} val / {} test examples",
                window_label(window),
                train.len(),
                val.len(),
                test.len()
            ));
            self.cache = Some(WindowData { window, train, val, test });
        }
        Ok(self.cache.as_ref().expect("filled above"))
    }
}

impl<Src: ExampleSource> CellRunner for TrainingRunner<'_, Src> {
    fn run(&mut self, cell: &GridCell) -> Result<CellOutcome, String> {
        let cfg = cell.config.model_config(&self.model);
        let train_cfg = self.train.clone();
        let artifacts = self.artifacts.clone();
        self.window_data(cell.window)?;
        let data = self.cache.as_ref().expect("window data");
        let mut model = Model::<f32>::new(cfg, cell.seed).map_err(|e| e.to_string())?;
        let log = &mut self.log;
        let warmup_ratio = train_cfg.warmup_ratio;
        let mut observer = |e: &TrainEvent| {
            if let TrainEvent::Step { step, total_steps, lr, loss } = *e {
                let peak = (warmup_ratio * total_steps as f64).ceil() as usize;
                if step == peak || step % (total_steps / 20).max(1) == 0 {
                    log(&format!("{} step {step}/{total_steps}: lr {lr:.3e}, loss {loss:.4}", cell.key()));
                }
            }
            if let TrainEvent::Epoch(r) = e {
                log(&format!(
                    "{} epoch {}: train loss {:.4}, val MAE {:.2} s, lr {:.2e}",
                    cell.key(),
                    r.epoch,
                    r.train_loss,
                    r.val_mae_seconds,
                    r.lr_last
                ));
            }
        };
        let outcome =
            train(&mut model, &data.train, &data.val, &train_cfg, cell.seed, &mut observer).map_err(|e| e.to_string())?;
        let records = evaluate(&model, &data.test).map_err(|e| e.to_string())?;
        let table = mae_seconds(&records).map_err(|e| e.to_string())?;
        if let Some(root) = artifacts {
            let dir = root.join(cell.key());
            save_checkpoint(&model, &dir).map_err(|e| e.to_string())?;
            write_history(&dir.join("history.jsonl"), &outcome.history).map_err(|e| e.to_string())?;
        }
        Ok(CellOutcome::Ok { table, best_epoch: outcome.best_epoch, best_val_mae_s: outcome.best_val_mae_s, records })
    }
}
