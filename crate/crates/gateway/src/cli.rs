use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::io::{BufRead, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use phaseloc::eval::{
    aggregate_results, evaluate, mae_seconds, render_csv, render_text, run_grid, CellOutcome, CellResult, CellRunner,
    ConfigKind, DataPlan, DiskSource, ExampleSource, GridCell, GridReport, GridSpec, TrainingRunner, COLUMN_NAMES,
};
use phaseloc::ingest::parse_transcript;
use phaseloc::net::load_checkpoint;
use phaseloc::optim::TrainConfig;
use phaseloc::session::{load_manifest, split_dataset, split_sizes, write_atomic, Session, Split};
use phaseloc::supervision::{
    annotate, load_proposals, save_proposals, AnnotationRequest, Annotator, HttpAnnotator, MockAnnotator,
    RaterVerdict, VerificationStore, ENV_ANNOTATOR_URL,
};
use phaseloc::synth::{generate_corpus, write_corpus, SynthConfig};
use thiserror::Error;

use crate::api::{self, stats_of, AppState};
use crate::config::{AnnotatorKind, ConfigError, ReviewConfig, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: flags, config values, missing files.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "phaseloc", version, about = "Therapy-phase boundary localization: corpus, review, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (audio, transcripts, manifest)
    Synth(SynthArgs),
    /// Propose phase labels for every session with an annotator
    Annotate(AnnotateArgs),
    /// Serve the local review API
    ReviewServe(ServeArgs),
    /// Review pending proposals in the terminal
    Verify(VerifyArgs),
    /// Train and evaluate one grid cell
    Train(TrainArgs),
    /// Run the window x config x seed sweep and write the report
    Grid(GridArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Render a grid results file
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Paths {
    /// JSON run configuration; flags given on the command line override it
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Corpus root holding manifest.json
    #[arg(long, default_value_os_t = RunConfig::default().corpus)]
    pub corpus: PathBuf,
    /// Output root for proposals, verdicts, checkpoints and results
    #[arg(long, default_value_os_t = RunConfig::default().out)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON run configuration; flags given on the command line override it
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Number of sessions
    #[arg(long, default_value_t = SynthConfig::default().n_sessions)]
    pub n: usize,
    /// Corpus seed
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    /// Corpus output directory
    #[arg(long, default_value_os_t = RunConfig::default().corpus)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Annotator implementation (http reads its endpoint from PHASELOC_ANNOTATOR_URL)
    #[arg(long, value_enum, default_value_t = AnnotatorKind::Mock)]
    pub annotator: AnnotatorKind,
    /// Mock annotator jitter bound, seconds
    #[arg(long, default_value_t = crate::config::AnnotatorConfig::default().jitter_s)]
    pub jitter: f64,
    /// Mock annotator and split seed
    #[arg(long, default_value_t = RunConfig::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Bind address
    #[arg(long, default_value_t = ReviewConfig::default().host)]
    pub host: String,
    #[arg(long, default_value_t = ReviewConfig::default().port)]
    pub port: u16,
    /// Agreement tolerance, seconds
    #[arg(long, default_value_t = ReviewConfig::default().tolerance_s)]
    pub tolerance: f64,
    /// Default audio padding around a boundary, seconds
    #[arg(long, default_value_t = ReviewConfig::default().pad_s)]
    pub pad: f64,
    /// Permit binding a non-loopback address
    #[arg(long, default_value_t = false)]
    pub allow_remote: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Rater name recorded with each verdict
    #[arg(long, default_value_t = ReviewConfig::default().rater)]
    pub rater: String,
    /// Agreement tolerance, seconds
    #[arg(long, default_value_t = ReviewConfig::default().tolerance_s)]
    pub tolerance: f64,
    /// List pending proposals and exit
    #[arg(long, default_value_t = false)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct DataFlags {
    /// Window placements per training boundary
    #[arg(long, default_value_t = DataPlan::default().train_per_boundary)]
    pub train_per_boundary: usize,
    /// Window placements per validation and test boundary
    #[arg(long, default_value_t = DataPlan::default().eval_per_boundary)]
    pub eval_per_boundary: usize,
    /// Seed of the training window placements
    #[arg(long, default_value_t = DataPlan::default().data_seed)]
    pub data_seed: u64,
    /// Seed of the validation and test window placements
    #[arg(long, default_value_t = DataPlan::default().eval_seed)]
    pub eval_seed: u64,
    /// Session split seed
    #[arg(long, default_value_t = RunConfig::default().seed)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    /// Peak learning rate
    #[arg(long, default_value_t = TrainConfig::default().lr_peak)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_ratio)]
    pub warmup_ratio: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Early-stopping patience, epochs
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    pub patience: usize,
    /// Store the frozen base as NF4
    #[arg(long, default_value_t = false)]
    pub quantize_base: bool,
    #[command(flatten)]
    pub data: DataFlags,
}

pub const DEFAULT_WINDOW_S: f64 = 30.0;
pub const DEFAULT_ADAPTER: ConfigKind = ConfigKind::Lora(8);
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Window duration, seconds
    #[arg(long, default_value_t = DEFAULT_WINDOW_S)]
    pub window: f64,
    /// head-only or loraN
    #[arg(long, default_value_t = DEFAULT_ADAPTER)]
    pub adapter: ConfigKind,
    /// Training seed
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Window durations, seconds
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().windows)]
    pub windows: Vec<f64>,
    /// Configurations (head-only, loraN)
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().configs)]
    pub configs: Vec<ConfigKind>,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().seeds)]
    pub seeds: Vec<u64>,
    /// Report formats
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Text, Format::Csv])]
    pub format: Vec<Format>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Checkpoint directory written by train or grid
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Window duration, seconds
    #[arg(long, default_value_t = DEFAULT_WINDOW_S)]
    pub window: f64,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Results file [default: <out>/grid/results.json]
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Report formats
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Text, Format::Csv])]
    pub format: Vec<Format>,
}

/// Which arguments were typed on the command line.
struct Given<'a>(&'a ArgMatches);

impl Given<'_> {
    fn has(&self, id: &str) -> bool {
        matches!(self.0.try_get_raw(id), Ok(Some(_))) && self.0.value_source(id) == Some(ValueSource::CommandLine)
    }

    fn set<T: Clone>(&self, id: &str, dst: &mut T, v: &T) {
        if self.has(id) {
            *dst = v.clone();
        }
    }
}

fn base_config(config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn with_paths(p: &Paths, g: &Given) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(&p.config)?;
    g.set("corpus", &mut cfg.corpus, &p.corpus);
    g.set("out", &mut cfg.out, &p.out);
    Ok(cfg)
}

fn apply_data(d: &DataFlags, g: &Given, cfg: &mut RunConfig) {
    g.set("train_per_boundary", &mut cfg.data.train_per_boundary, &d.train_per_boundary);
    g.set("eval_per_boundary", &mut cfg.data.eval_per_boundary, &d.eval_per_boundary);
    g.set("data_seed", &mut cfg.data.data_seed, &d.data_seed);
    g.set("eval_seed", &mut cfg.data.eval_seed, &d.eval_seed);
    g.set("split_seed", &mut cfg.seed, &d.split_seed);
}

fn apply_train(t: &TrainFlags, g: &Given, cfg: &mut RunConfig) {
    g.set("epochs", &mut cfg.train.epochs, &t.epochs);
    g.set("lr", &mut cfg.train.lr_peak, &t.lr);
    g.set("weight_decay", &mut cfg.train.weight_decay, &t.weight_decay);
    g.set("warmup_ratio", &mut cfg.train.warmup_ratio, &t.warmup_ratio);
    g.set("batch_size", &mut cfg.train.batch_size, &t.batch_size);
    g.set("patience", &mut cfg.train.patience, &t.patience);
    g.set("quantize_base", &mut cfg.model.quantize_base, &t.quantize_base);
    apply_data(&t.data, g, cfg);
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let text = e.render();
            if ok {
                let _ = write!(stdout, "{}", text);
                return 0;
            }
            eprint!("{}", text);
            return 1;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{}", e.render());
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    match execute(cli.command, &Given(sub), stdin, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command, g: &Given, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a, g, out),
        Command::Annotate(a) => annotate_cmd(a, g, out),
        Command::ReviewServe(a) => serve(a, g),
        Command::Verify(a) => verify(a, g, stdin, out),
        Command::Train(a) => train(a, g, out),
        Command::Grid(a) => grid(a, g, out),
        Command::Eval(a) => eval(a, g, out),
        Command::Report(a) => report(a, g, out),
    }
}

fn synth(a: SynthArgs, g: &Given, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = base_config(&a.config)?;
    g.set("n", &mut cfg.synth.n_sessions, &a.n);
    g.set("seed", &mut cfg.synth.seed, &a.seed);
    g.set("out", &mut cfg.corpus, &a.out);
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.synth).map_err(|e| CliError::Validation(e.to_string()))?;
    let manifest = write_corpus(&corpus, &cfg.corpus).map_err(runtime)?;
    let s = &corpus.stats;
    writeln!(
        out,
        "{} sessions written to {} (duration mean {:.2} s, std {:.2} s, min {:.2} s, max {:.2} s)",
        corpus.sessions.len(),
        manifest.display(),
        s.mean_s,
        s.std_s,
        s.min_s,
        s.max_s
    )
    .map_err(runtime)
}

fn load_sessions(cfg: &RunConfig) -> Result<Vec<Session>, CliError> {
    cfg.require_corpus()?;
    load_manifest(&cfg.manifest_path()).map_err(|e| CliError::Validation(e.to_string()))
}

fn annotate_cmd(a: AnnotateArgs, g: &Given, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = with_paths(&a.paths, g)?;
    g.set("annotator", &mut cfg.annotator.kind, &a.annotator);
    g.set("jitter", &mut cfg.annotator.jitter_s, &a.jitter);
    g.set("seed", &mut cfg.seed, &a.seed);
    cfg.validate()?;
    let sessions = load_sessions(&cfg)?;
    let annotator: Box<dyn Annotator> = match cfg.annotator.kind {
        AnnotatorKind::Mock => {
            let truth: HashMap<_, _> = sessions.iter().map(|s| (s.id.clone(), s.annotations.clone())).collect();
            Box::new(MockAnnotator::new(truth, cfg.annotator.jitter_s, cfg.seed))
        }
        AnnotatorKind::Http => {
            let mut h = HttpAnnotator::from_env()
                .ok_or_else(|| CliError::Validation(format!("{ENV_ANNOTATOR_URL} must be set for the http annotator")))?;
            h.instruction = cfg.annotator.instruction.clone();
            h.timeout = std::time::Duration::from_secs(cfg.annotator.timeout_s);
            Box::new(h)
        }
    };
    let mut proposals = Vec::new();
    let mut failed = Vec::new();
    for s in &sessions {
        let (_, tpath) = s.resolved_paths(&cfg.corpus);
        let transcript = match parse_transcript(&tpath) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("{}: transcript: {e}", s.id);
                failed.push(s.id.clone());
                continue;
            }
        };
        let req = AnnotationRequest { session_id: &s.id, duration_s: s.duration_s, transcript: &transcript };
        match annotate(&req, annotator.as_ref()) {
            Ok(ps) => proposals.extend(ps),
            Err(e) => {
                eprintln!("{}: {e}", s.id);
                failed.push(s.id.clone());
            }
        }
    }
    let path = cfg.proposals_path();
    save_proposals(&path, &proposals).map_err(runtime)?;
    writeln!(out, "{} proposals for {} sessions written to {}", proposals.len(), sessions.len() - failed.len(), path.display())
        .map_err(runtime)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("annotation failed for {} sessions: {}", failed.len(), failed.join(", "))))
    }
}

fn open_store(cfg: &RunConfig) -> Result<VerificationStore, CliError> {
    let path = cfg.proposals_path();
    if !path.is_file() {
        return Err(CliError::Validation(format!("no proposals at {}; run annotate first", path.display())));
    }
    let proposals = load_proposals(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    VerificationStore::open(proposals, &cfg.verdicts_path()).map_err(|e| CliError::Validation(e.to_string()))
}

fn serve(a: ServeArgs, g: &Given) -> Result<(), CliError> {
    let mut cfg = with_paths(&a.paths, g)?;
    g.set("host", &mut cfg.review.host, &a.host);
    g.set("port", &mut cfg.review.port, &a.port);
    g.set("tolerance", &mut cfg.review.tolerance_s, &a.tolerance);
    g.set("pad", &mut cfg.review.pad_s, &a.pad);
    cfg.validate()?;
    let ip: IpAddr =
        cfg.review.host.parse().map_err(|_| CliError::Validation(format!("host {:?} is not an IP address", cfg.review.host)))?;
    if !ip.is_loopback() && !a.allow_remote {
        return Err(CliError::Validation(format!("refusing to bind non-loopback address {ip} without --allow-remote")));
    }
    let sessions = load_sessions(&cfg)?;
    let store = open_store(&cfg)?;
    let mut state = AppState::new(store, sessions, cfg.corpus.clone());
    state.tolerance_s = cfg.review.tolerance_s;
    state.pad_s = cfg.review.pad_s;
    state.excerpt_s = cfg.review.excerpt_s;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(runtime)?;
    rt.block_on(api::serve(Arc::new(state), SocketAddr::new(ip, cfg.review.port))).map_err(runtime)
}

fn prompt(input: &mut dyn BufRead, out: &mut dyn Write, text: &str) -> Result<Option<String>, CliError> {
    write!(out, "{text}").map_err(runtime)?;
    out.flush().map_err(runtime)?;
    let mut line = String::new();
    if input.read_line(&mut line).map_err(runtime)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}

fn read_time(input: &mut dyn BufRead, out: &mut dyn Write, label: &str, current: f64) -> Result<Option<f64>, CliError> {
    loop {
        let Some(s) = prompt(input, out, &format!("  {label} [{current:.2}]: "))? else {
            return Ok(None);
        };
        if s.is_empty() {
            return Ok(Some(current));
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => return Ok(Some(v)),
            _ => writeln!(out, "  not a time in seconds: {s}").map_err(runtime)?,
        }
    }
}

/// Interactive review of pending proposals. Returns the number of verdicts
/// recorded.
pub fn review_loop(
    store: &mut VerificationStore,
    rater: &str,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<usize, CliError> {
    let pending: Vec<_> = store.pending().into_iter().cloned().collect();
    let mut recorded = 0;
    'outer: for (i, p) in pending.iter().enumerate() {
        writeln!(
            out,
            "[{}/{}] {} {}: start {:.2} s, stop {:.2} s, present {}",
            i + 1,
            pending.len(),
            p.id,
            p.description,
            p.start_s,
            p.stop_s,
            if p.present { "yes" } else { "no" }
        )
        .map_err(runtime)?;
        loop {
            let Some(choice) = prompt(input, out, "accept (a), correct (c), reject (r), skip (s), quit (q): ")? else {
                break 'outer;
            };
            let mut v = match choice.as_str() {
                "a" => RaterVerdict::accept(&p.id),
                "r" => RaterVerdict::reject(&p.id),
                "c" => {
                    let Some(start) = read_time(input, out, "start", p.start_s)? else { break 'outer };
                    let Some(stop) = read_time(input, out, "stop", p.stop_s)? else { break 'outer };
                    RaterVerdict::correct(&p.id, start, stop)
                }
                "s" => break,
                "q" => break 'outer,
                _ => continue,
            };
            v.rater = rater.to_string();
            match store.apply_verdict(v) {
                Ok(_) => {
                    recorded += 1;
                    break;
                }
                Err(phaseloc::supervision::VerifyError::Invalid(errs)) => {
                    for e in errs {
                        writeln!(out, "  {}: {}", e.field, e.message).map_err(runtime)?;
                    }
                }
                Err(e) => return Err(runtime(e)),
            }
        }
    }
    Ok(recorded)
}

fn verify(a: VerifyArgs, g: &Given, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = with_paths(&a.paths, g)?;
    g.set("rater", &mut cfg.review.rater, &a.rater);
    g.set("tolerance", &mut cfg.review.tolerance_s, &a.tolerance);
    cfg.validate()?;
    let mut store = open_store(&cfg)?;
    if a.list {
        for p in store.pending() {
            writeln!(out, "{}\t{:.2}\t{:.2}\t{}", p.id, p.start_s, p.stop_s, p.present).map_err(runtime)?;
        }
        return Ok(());
    }
    let n = review_loop(&mut store, &cfg.review.rater, stdin, out)?;
    let stats = stats_of(&store, cfg.review.tolerance_s);
    writeln!(out, "{n} verdicts recorded; {}/{} proposals reviewed", stats.n_reviewed, stats.n_proposals)
        .map_err(runtime)?;
    if let Some(s) = stats.agreement {
        writeln!(
            out,
            "timestamp accuracy {:.1}% ({}/{} within {} s), label accuracy {:.1}% ({}/{})",
            100.0 * s.timestamp_accuracy,
            s.n_timestamps_within,
            s.n_timestamps,
            s.tolerance_s,
            100.0 * s.label_accuracy,
            s.n_labels_unchanged,
            s.n_labels
        )
        .map_err(runtime)?;
    }
    Ok(())
}

/// Sessions with reviewed labels folded in, and the configured split.
fn disk_source(cfg: &RunConfig) -> Result<DiskSource, CliError> {
    let mut sessions = load_sessions(cfg)?;
    if cfg.proposals_path().is_file() {
        let store = open_store(cfg)?;
        sessions = sessions.iter().map(|s| store.apply_to_session(s)).collect();
    }
    let ids: Vec<String> = sessions.iter().map(|s| s.id.clone()).collect();
    let sizes = split_sizes(ids.len(), cfg.split_ratios()).map_err(|e| CliError::Validation(e.to_string()))?;
    if sizes.0 == 0 || sizes.1 == 0 || sizes.2 == 0 {
        return Err(CliError::Validation(format!(
            "{} sessions split into {}/{}/{}; train, validation and test each need at least one session",
            ids.len(),
            sizes.0,
            sizes.1,
            sizes.2
        )));
    }
    let split = split_dataset(&ids, cfg.split_ratios(), cfg.seed).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(DiskSource::new(sessions, cfg.corpus.clone(), split))
}

fn log_line(m: &str) {
    eprintln!("{m}");
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    write_atomic(path, &serde_json::to_vec_pretty(v).map_err(runtime)?).map_err(runtime)
}

fn train(a: TrainArgs, g: &Given, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = with_paths(&a.paths, g)?;
    apply_train(&a.train, g, &mut cfg);
    cfg.validate()?;
    if !(a.window > 0.0) {
        return Err(CliError::Validation("window must be positive".into()));
    }
    let cell = GridCell { window: a.window, config: a.adapter, seed: a.seed };
    let source = disk_source(&cfg)?;
    let dir = cfg.out.join("train");
    let mut runner = TrainingRunner::new(&source, cfg.model.clone(), cfg.train.clone(), cfg.data.clone());
    runner.artifacts = Some(dir.join("checkpoints"));
    runner.log = Box::new(log_line);
    let outcome = runner.run(&cell).map_err(CliError::Runtime)?;
    let result = CellResult { cell, outcome };
    write_json(&dir.join(format!("{}.json", cell.key())), &result)?;
    let spec = GridSpec { windows: vec![cell.window], configs: vec![cell.config], seeds: vec![cell.seed] };
    let report = aggregate_results(&spec, &[result], cfg.data.eval_per_boundary);
    write!(out, "{}", render_text(&report)).map_err(runtime)
}

fn write_reports(report: &GridReport, dir: &Path, formats: &[Format], out: &mut dyn Write) -> Result<(), CliError> {
    for f in formats {
        let (name, text) = match f {
            Format::Text => ("report.txt", render_text(report)),
            Format::Csv => ("report.csv", render_csv(report)),
        };
        write_atomic(&dir.join(name), text.as_bytes()).map_err(runtime)?;
        write!(out, "{text}").map_err(runtime)?;
    }
    Ok(())
}

fn grid(a: GridArgs, g: &Given, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = with_paths(&a.paths, g)?;
    apply_train(&a.train, g, &mut cfg);
    g.set("windows", &mut cfg.grid.windows, &a.windows);
    g.set("configs", &mut cfg.grid.configs, &a.configs);
    g.set("seeds", &mut cfg.grid.seeds, &a.seeds);
    cfg.validate()?;
    let source = disk_source(&cfg)?;
    let dir = cfg.grid_dir();
    let mut runner = TrainingRunner::new(&source, cfg.model.clone(), cfg.train.clone(), cfg.data.clone());
    runner.artifacts = Some(dir.join("checkpoints"));
    runner.log = Box::new(log_line);
    let results = run_grid(&cfg.grid, &mut runner, Some(&dir), &mut |m| log_line(m)).map_err(runtime)?;
    let report = aggregate_results(&cfg.grid, &results, cfg.data.eval_per_boundary);
    write_json(&dir.join("results.json"), &report)?;
    write_reports(&report, &dir, &a.format, out)?;
    let failed = results.iter().filter(|r| matches!(r.outcome, CellOutcome::Failed { .. })).count();
    if failed == results.len() {
        return Err(CliError::Runtime("every grid cell failed".into()));
    }
    Ok(())
}

fn eval(a: EvalArgs, g: &Given, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = with_paths(&a.paths, g)?;
    apply_data(&a.data, g, &mut cfg);
    cfg.validate()?;
    if !a.checkpoint.is_dir() {
        return Err(CliError::Validation(format!("checkpoint directory not found: {}", a.checkpoint.display())));
    }
    let model = load_checkpoint(&a.checkpoint).map_err(|e| CliError::Validation(e.to_string()))?;
    let source = disk_source(&cfg)?;
    let examples =
        source.encode_split(&model, Split::Test, &cfg.data.options(Split::Test, a.window)).map_err(runtime)?;
    let records = evaluate(&model, &examples).map_err(runtime)?;
    let table = mae_seconds(&records).map_err(runtime)?;
    let name = a.checkpoint.file_name().map_or("checkpoint".into(), |n| n.to_string_lossy().into_owned());
    let path = cfg.out.join("eval").join(format!("{name}-w{}.json", a.window));
    write_json(&path, &serde_json::json!({ "checkpoint": a.checkpoint, "window": a.window, "table": table, "records": records }))?;
    writeln!(out, "{}", COLUMN_NAMES.join("\t")).map_err(runtime)?;
    let cols: Vec<String> = table.columns().iter().map(|c| c.map_or("n/a".into(), |v| format!("{v:.2}"))).collect();
    writeln!(out, "{}", cols.join("\t")).map_err(runtime)?;
    writeln!(out, "{} test windows; records in {}", records.len(), path.display()).map_err(runtime)
}

fn report(a: ReportArgs, g: &Given, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = with_paths(&a.paths, g)?;
    let path = a.results.clone().unwrap_or_else(|| cfg.grid_dir().join("results.json"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Validation(format!("cannot read results {}: {e}", path.display())))?;
    let report: GridReport =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    write_reports(&report, &dir, &a.format, out)
}
