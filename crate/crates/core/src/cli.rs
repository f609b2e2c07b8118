//! Command-line front end: dataset preparation, index building, benchmark
//! runs, ablation sweeps, evaluation and overlap reports.
//!
//! Exit codes: 0 on success, 1 when some instances failed, 2 on usage or
//! input errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Audited, BackendConfig, BackendKind, Caching, ChatBackend, MockScript};
use crate::corpus::{
    self, corpus_hash, filter_instances, parse_dataset, split_dataset, BugInstance, SplitManifest,
    DEFAULT_MAX_TOKENS,
};
use crate::metrics::{evaluate, overlap_matrix_ordered, EvalReport};
use crate::orchestrator::{
    read_results, run_benchmark, BenchmarkOptions, ClockKind, PipelineConfig, RESULTS_FILE,
};
use crate::prompting::TemplateSet;
use crate::retrieval::{Bm25Index, Bm25Params};

pub const RUN_MANIFEST: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const INDEX_CACHE: &str = "bm25-index.jsonl";
pub const SPLIT_MANIFEST: &str = "split.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "stagefix", version, about = "Stage-wise multi-agent single-line bug fixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a bug-fix corpus and split it into train/valid/test by repository.
    Prepare(PrepareArgs),
    /// Build (or refresh) the BM25 index cache over a training split.
    Index(IndexArgs),
    /// Run the pipeline over a test split.
    Run(RunArgs),
    /// Run the component ladder and the interaction-turn sweep.
    Ablate(AblateArgs),
    /// Score a run against the reference split.
    Eval(EvalArgs),
    /// Compare the correctly fixed bugs of two or more runs.
    Overlap(OverlapArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Input corpus, one JSON bug instance per line.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for train.jsonl, valid.jsonl, test.jsonl and split.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Split proportions, e.g. 0.8,0.1,0.1 or 8:1:1.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    pub ratios: [f64; 3],
    /// Drop instances whose buggy method has more tokens than this.
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Cache file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Http,
    Mock,
}

#[derive(Debug, Clone, Args)]
pub struct CommonRunArgs {
    /// Instances to repair.
    #[arg(long)]
    pub test: PathBuf,
    /// Retrieval corpus for demonstrations; required when diagnosis is on.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with `pipeline` and `backend` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Mock script (mock backend).
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Chat-completions URL (http backend).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long)]
    pub model: Option<String>,
    /// Worker threads; defaults to the number of logical CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip instances whose completed transcript already exists.
    #[arg(long)]
    pub resume: bool,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonRunArgs,
    /// Review turns (a single number; sweeps belong to `ablate`).
    #[arg(long, value_parser = parse_single_turn)]
    pub turns: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonRunArgs,
    /// Turn values to sweep, e.g. 0..3 or 0,1,2,3.
    #[arg(long, default_value = "0..3", value_parser = parse_turn_list)]
    pub turns: TurnList,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnList(pub Vec<u32>);

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory (or a results.jsonl file).
    #[arg(long)]
    pub run: PathBuf,
    /// Reference split with the ground-truth fixed lines.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Report path; defaults to report.json in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    /// Run directories (at least two).
    #[arg(long = "run", num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Model names, comma-separated, in the order of --run.
    #[arg(long, value_delimiter = ',')]
    pub names: Vec<String>,
    /// Reference split, used for runs without a report.json.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split([',', ':']).map(str::trim).collect();
    let values: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| format!("bad ratio {p:?}")))
        .collect::<Result<_, _>>()?;
    let [a, b, c] = values[..] else {
        return Err("expected three ratios".into());
    };
    let sum = a + b + c;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err("ratios must be positive".into());
    }
    Ok([a / sum, b / sum, c / sum])
}

fn parse_single_turn(s: &str) -> Result<u32, String> {
    if s.contains("..") || s.contains(',') {
        return Err("`run` takes a single turn count; use `ablate` for turn sweeps".into());
    }
    s.trim().parse().map_err(|_| format!("bad turn count {s:?}"))
}

fn parse_turn_list(s: &str) -> Result<TurnList, String> {
    let num = |t: &str| t.trim().parse::<u32>().map_err(|_| format!("bad turn count {t:?}"));
    let turns = if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi.trim_start_matches('='))?);
        if lo > hi {
            return Err(format!("empty turn range {s:?}"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    Ok(TurnList(turns))
}

/// Settings file: both sections optional, field names as in
/// [`PipelineConfig`] and [`BackendConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub pipeline: PipelineConfig,
    pub backend: BackendConfig,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("reading config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("parsing config {}: {e}", path.display())))
    }
}

/// Written to `run.json` in every run directory. Holds no credentials:
/// the backend section names the key variable but never its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub pipeline: PipelineConfig,
    pub backend: BackendConfig,
    pub clock: ClockKind,
    pub workers: usize,
    pub test_path: String,
    pub test_hash: String,
    pub train_path: Option<String>,
    pub train_hash: Option<String>,
    /// Split seed, when the test file sits next to a split manifest.
    pub split_seed: Option<u64>,
    pub template_hash: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub instances: usize,
    pub executed: usize,
    pub resumed: usize,
    pub failed: usize,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_split(path: &Path) -> Result<Vec<BugInstance>, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("no such file: {}", path.display())));
    }
    corpus::load_instances(path).map_err(input)
}

/// Parses argv, runs the command and returns the process exit code.
pub fn main_entry<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return if code == 0 { 0 } else { 2 };
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command. `Ok` carries 0, or 1 when some instances failed.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, out),
        Command::Index(a) => cmd_index(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| 0),
        Command::Overlap(a) => cmd_overlap(&a, out).map(|_| 0),
    }
}

pub fn cmd_prepare(args: &PrepareArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if !args.dataset.is_file() {
        return Err(CliError::Input(format!(
            "no such file: {}",
            args.dataset.display()
        )));
    }
    let parsed = parse_dataset(&args.dataset).map_err(input)?;
    for r in &parsed.rejections {
        log::warn!("{}:{}: skipped: {}", args.dataset.display(), r.line, r.reason);
    }
    let input_hash = corpus_hash(&parsed.instances);
    let (kept, dropped) = filter_instances(parsed.instances, args.max_tokens).map_err(input)?;
    let split = split_dataset(&kept, args.ratios, args.seed).map_err(input)?;
    create_dir(&args.out)?;
    for (name, part) in ["train", "valid", "test"].iter().zip(split.parts()) {
        corpus::write_jsonl(args.out.join(format!("{name}.jsonl")), part).map_err(runtime)?;
    }
    let manifest = SplitManifest::new(
        &split,
        args.ratios,
        args.max_tokens,
        input_hash,
        dropped.len(),
        parsed.rejections.len(),
    );
    write_json(&args.out.join(SPLIT_MANIFEST), &manifest)?;
    let _ = writeln!(
        out,
        "kept {} (dropped {} over {} tokens, rejected {} malformed)",
        kept.len(),
        dropped.len(),
        args.max_tokens,
        parsed.rejections.len()
    );
    let _ = writeln!(
        out,
        "train {} / valid {} / test {} instances; {} / {} / {} repos",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        manifest.train_repos.len(),
        manifest.valid_repos.len(),
        manifest.test_repos.len()
    );
    Ok(0)
}

pub fn cmd_index(args: &IndexArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let train = load_split(&args.train)?;
    let index = Bm25Index::load_or_build(&args.out, &train, Bm25Params::default()).map_err(runtime)?;
    let _ = writeln!(
        out,
        "indexed {} documents, {} terms, avgdl {:.2}",
        index.doc_count(),
        index.vocabulary().count(),
        index.avgdl()
    );
    Ok(0)
}

/// Everything a run needs besides the pipeline configuration itself.
struct RunContext {
    base: PipelineConfig,
    backend: BackendConfig,
    templates: TemplateSet,
    test: Vec<BugInstance>,
    test_hash: String,
    train: Option<(Vec<BugInstance>, String)>,
    split_seed: Option<u64>,
    workers: usize,
    clock: ClockKind,
}

impl RunContext {
    fn load(args: &CommonRunArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut backend = file.backend;
        if let Some(choice) = args.backend {
            backend.kind = match choice {
                BackendChoice::Http => BackendKind::Http,
                BackendChoice::Mock => BackendKind::Mock,
            };
        }
        if let Some(s) = &args.script {
            backend.script = Some(s.clone());
        }
        if let Some(e) = &args.endpoint {
            backend.endpoint = Some(e.clone());
        }
        if let Some(m) = &args.model {
            backend.model_name = Some(m.clone());
        }
        backend.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let templates = match &args.templates {
            Some(dir) if !dir.is_dir() => {
                return Err(CliError::Input(format!(
                    "no such template directory: {}",
                    dir.display()
                )))
            }
            Some(dir) => TemplateSet::load_dir(dir).map_err(input)?,
            None => TemplateSet::default(),
        };

        let test = load_split(&args.test)?;
        let test_hash = corpus_hash(&test);
        let train = match &args.train {
            Some(p) => {
                let t = load_split(p)?;
                let h = corpus_hash(&t);
                Some((t, h))
            }
            None => None,
        };
        let split_seed = args
            .test
            .parent()
            .map(|d| d.join(SPLIT_MANIFEST))
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|t| serde_json::from_str::<SplitManifest>(&t).ok())
            .map(|m| m.seed);
        let workers = match args.workers {
            Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let clock = match backend.kind {
            BackendKind::Mock => ClockKind::Logical,
            BackendKind::Http => ClockKind::Wall,
        };
        Ok(RunContext {
            base: file.pipeline,
            backend,
            templates,
            test,
            test_hash,
            train,
            split_seed,
            workers,
            clock,
        })
    }

    fn check_config(&self, cfg: &PipelineConfig) -> Result<(), CliError> {
        cfg.validate().map_err(CliError::Usage)?;
        if cfg.enable_diagnosis && self.train.is_none() {
            return Err(CliError::Usage("diagnosis needs a retrieval corpus (--train)".into()));
        }
        if self.backend.kind == BackendKind::Mock {
            let path = self.backend.script.as_ref().expect("validated");
            let script = MockScript::load(path).map_err(input)?;
            let gaps = script.coverage_gaps(&cfg.reachable_calls());
            if !gaps.is_empty() {
                log::warn!("mock script has no generic reply for {gaps:?}");
            }
        }
        Ok(())
    }

    fn index(&self, dir: &Path, needed: bool) -> Result<Option<Bm25Index>, CliError> {
        match (&self.train, needed) {
            (Some((train, _)), true) => {
                create_dir(dir)?;
                Bm25Index::load_or_build(dir.join(INDEX_CACHE), train, Bm25Params::default())
                    .map(Some)
                    .map_err(runtime)
            }
            _ => Ok(None),
        }
    }

    fn run(
        &self,
        args: &CommonRunArgs,
        cfg: &PipelineConfig,
        dir: &Path,
        backend: &dyn ChatBackend,
        index: Option<&Bm25Index>,
    ) -> Result<(RunManifest, Vec<crate::orchestrator::PipelineResult>), CliError> {
        create_dir(dir)?;
        let started = unix_ms();
        let audited = Audited::to_file(backend, dir.join(AUDIT_FILE)).map_err(runtime)?;
        let opts = BenchmarkOptions {
            workers: self.workers,
            run_dir: Some(dir.to_path_buf()),
            resume: args.resume,
            clock: self.clock,
        };
        let outcome =
            run_benchmark(&self.test, cfg, &self.templates, &audited, index, &opts).map_err(runtime)?;
        let failed = outcome.failures().count();
        for f in outcome.failures() {
            if let crate::orchestrator::PipelineStatus::Failed { stage, reason } = &f.status {
                log::warn!("{} failed at {stage}: {reason}", f.instance_id);
            }
        }
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            pipeline: cfg.clone(),
            backend: self.backend.clone(),
            clock: self.clock,
            workers: self.workers,
            test_path: args.test.display().to_string(),
            test_hash: self.test_hash.clone(),
            train_path: args.train.as_ref().map(|p| p.display().to_string()),
            train_hash: self.train.as_ref().map(|(_, h)| h.clone()),
            split_seed: self.split_seed,
            template_hash: self.templates.hash(),
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
            instances: outcome.results.len(),
            executed: outcome.executed,
            resumed: outcome.resumed,
            failed,
        };
        write_json(&dir.join(RUN_MANIFEST), &manifest)?;
        Ok((manifest, outcome.results))
    }
}

fn summary_line(m: &RunManifest) -> String {
    format!(
        "{} instances: {} completed, {} failed ({} executed, {} resumed)",
        m.instances,
        m.instances - m.failed,
        m.failed,
        m.executed,
        m.resumed
    )
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let ctx = RunContext::load(&args.common)?;
    let mut cfg = ctx.base.clone();
    if let Some(t) = args.turns {
        cfg.max_turns = t;
    }
    ctx.check_config(&cfg)?;
    let backend = ctx.backend.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let index = ctx.index(&args.common.out, cfg.enable_diagnosis)?;
    let (manifest, _) = ctx.run(&args.common, &cfg, &args.common.out, &backend, index.as_ref())?;
    let _ = writeln!(out, "{}", summary_line(&manifest));
    let _ = writeln!(out, "results: {}", args.common.out.join(RESULTS_FILE).display());
    Ok(if manifest.failed > 0 { 1 } else { 0 })
}

/// One configuration of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub tester: bool,
    pub diagnosis: bool,
    pub reviewer: bool,
    pub turns: u32,
    pub fix_at_1: f64,
    pub mean_bleu4: f64,
    pub mean_lev: f64,
    pub backend_calls: usize,
    pub failed: usize,
}

/// The component ladder (none, +tester, +tester+diagnosis, all) followed
/// by the full pipeline at each requested turn budget.
pub fn ablation_configs(base: &PipelineConfig, turns: &[u32]) -> Vec<(String, PipelineConfig)> {
    let with = |tester, diagnosis, reviewer, max_turns| PipelineConfig {
        enable_tester: tester,
        enable_diagnosis: diagnosis,
        enable_reviewer: reviewer,
        max_turns,
        ..base.clone()
    };
    let mut configs = vec![
        ("components-none".to_string(), with(false, false, false, 0)),
        ("components-tester".to_string(), with(true, false, false, 0)),
        ("components-tester-diagnosis".to_string(), with(true, true, false, 0)),
        ("components-all".to_string(), with(true, true, true, base.max_turns)),
    ];
    for &t in turns {
        configs.push((format!("turns-{t}"), with(true, true, true, t)));
    }
    configs
}

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let ctx = RunContext::load(&args.common)?;
    let configs = ablation_configs(&ctx.base, &args.turns.0);
    for (_, cfg) in &configs {
        ctx.check_config(cfg)?;
    }
    let backend = Caching::new(ctx.backend.build().map_err(|e| CliError::Usage(e.to_string()))?);
    let index = ctx.index(&args.common.out, configs.iter().any(|(_, c)| c.enable_diagnosis))?;

    let mut rows = Vec::new();
    let mut any_failed = false;
    let _ = writeln!(out, "config\ttester\tdiagnosis\treviewer\tturns\tFix@1 (%)\tBLEU-4\tLevenshtein Distance");
    for (name, cfg) in &configs {
        let dir = args.common.out.join(name);
        let (manifest, results) = ctx.run(&args.common, cfg, &dir, &backend, index.as_ref())?;
        any_failed |= manifest.failed > 0;
        let summaries: Vec<_> = results.iter().map(|r| r.summary()).collect();
        let report = evaluate(&summaries, &ctx.test, 1).map_err(runtime)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        let mark = |b: bool| if b { "yes" } else { "no" };
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}\t{}",
            mark(cfg.enable_tester),
            mark(cfg.enable_diagnosis),
            mark(cfg.enable_reviewer),
            cfg.effective_turns(),
            report.table_row()
        );
        rows.push(AblationRow {
            name: name.clone(),
            tester: cfg.enable_tester,
            diagnosis: cfg.enable_diagnosis,
            reviewer: cfg.enable_reviewer,
            turns: cfg.effective_turns(),
            fix_at_1: report.fix_at_k,
            mean_bleu4: report.mean_bleu4,
            mean_lev: report.mean_lev,
            backend_calls: summaries.iter().map(|s| s.backend_calls).sum(),
            failed: manifest.failed,
        });
    }
    write_json(&args.common.out.join("ablation.json"), &rows)?;
    log::info!("{} backend calls answered from cache", backend.hits());
    Ok(if any_failed { 1 } else { 0 })
}

fn results_path(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join(RESULTS_FILE)
    } else {
        run.to_path_buf()
    }
}

fn evaluate_run(run: &Path, references: &[BugInstance], k: usize) -> Result<EvalReport, CliError> {
    let path = results_path(run);
    if !path.is_file() {
        return Err(CliError::Input(format!("no results at {}", path.display())));
    }
    let results = read_results(&path).map_err(input)?;
    evaluate(&results, references, k).map_err(input)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport, CliError> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let references = load_split(&args.test)?;
    let report = evaluate_run(&args.run, &references, args.k)?;
    let dest = match &args.out {
        Some(p) => p.clone(),
        None if args.run.is_dir() => args.run.join(REPORT_FILE),
        None => args.run.with_file_name(REPORT_FILE),
    };
    write_json(&dest, &report)?;
    let _ = writeln!(out, "{}", report.table_header());
    let _ = writeln!(out, "{}", report.table_row());
    Ok(report)
}

pub fn cmd_overlap(args: &OverlapArgs, out: &mut dyn Write) -> Result<String, CliError> {
    if args.runs.len() < 2 {
        return Err(CliError::Usage(format!(
            "overlap needs at least two --run directories, got {}",
            args.runs.len()
        )));
    }
    if !args.names.is_empty() && args.names.len() != args.runs.len() {
        return Err(CliError::Usage(format!(
            "{} names for {} runs",
            args.names.len(),
            args.runs.len()
        )));
    }
    let references = match &args.test {
        Some(p) => Some(load_split(p)?),
        None => None,
    };
    let mut fixed = Vec::new();
    for (i, run) in args.runs.iter().enumerate() {
        let name = match args.names.get(i) {
            Some(n) => n.clone(),
            None => run
                .file_name()
                .map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned()),
        };
        let report_path = run.join(REPORT_FILE);
        let report: EvalReport = if report_path.is_file() {
            let text = fs::read_to_string(&report_path).map_err(input)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", report_path.display())))?
        } else if let Some(refs) = &references {
            evaluate_run(run, refs, args.k)?
        } else {
            return Err(CliError::Input(format!(
                "{} has no {REPORT_FILE}; pass --test to score it",
                run.display()
            )));
        };
        fixed.push((name, report.fixed_ids()));
    }
    let matrix = overlap_matrix_ordered(&fixed).map_err(|e| CliError::Usage(e.to_string()))?;
    let csv = matrix.to_csv();
    fs::write(&args.out, &csv)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    let _ = write!(out, "{csv}");
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratios("0.8,0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
        let r = parse_ratios("8:1:1").unwrap();
        assert!((r[0] - 0.8).abs() < 1e-12 && (r[2] - 0.1).abs() < 1e-12);
        assert!(parse_ratios("1,1").is_err());
        assert!(parse_ratios("1,0,1").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }

    #[test]
    fn turn_parsing() {
        assert_eq!(parse_single_turn("2").unwrap(), 2);
        assert!(parse_single_turn("0..3").is_err());
        assert!(parse_single_turn("0,1").is_err());
        assert_eq!(parse_turn_list("0..3").unwrap().0, [0, 1, 2, 3]);
        assert_eq!(parse_turn_list("0..=2").unwrap().0, [0, 1, 2]);
        assert_eq!(parse_turn_list("1,3").unwrap().0, [1, 3]);
        assert!(parse_turn_list("3..1").is_err());
    }

    #[test]
    fn ablation_ladder_shape() {
        let configs = ablation_configs(&PipelineConfig::default(), &[0, 1, 2, 3]);
        assert_eq!(configs.len(), 8);
        let ladder: Vec<(bool, bool, bool)> = configs[..4]
            .iter()
            .map(|(_, c)| (c.enable_tester, c.enable_diagnosis, c.enable_reviewer))
            .collect();
        assert_eq!(
            ladder,
            [
                (false, false, false),
                (true, false, false),
                (true, true, false),
                (true, true, true)
            ]
        );
        assert_eq!(configs[3].1.max_turns, 3);
        let turns: Vec<u32> = configs[4..].iter().map(|(_, c)| c.effective_turns()).collect();
        assert_eq!(turns, [0, 1, 2, 3]);
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_entry(["stagefix", "eval", "--bogus"], &mut out, &mut err);
        assert_eq!(code, 2);
        assert!(String::from_utf8(err).unwrap().contains("--bogus"));
    }

    #[test]
    fn help_lists_canonical_flags() {
        let mut help = Vec::new();
        for sub in ["prepare", "run", "ablate", "eval", "overlap"] {
            let mut cmd = Cli::command();
            let sc = cmd.find_subcommand_mut(sub).unwrap();
            help.push(sc.render_long_help().to_string());
        }
        let all = help.join("\n");
        for flag in [
            "--dataset", "--out", "--seed", "--ratios", "--max-tokens", "--train", "--test",
            "--config", "--backend", "--script", "--endpoint", "--model", "--turns", "--workers",
            "--resume", "--templates",
        ] {
            assert!(all.contains(flag), "{flag} missing from help");
        }
    }

    #[test]
    fn config_file_rejects_unknown_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"pipeline": {"max_turns": 1}, "extra": 1}"#).unwrap();
        assert!(matches!(ConfigFile::load(&p), Err(CliError::Input(_))));
        fs::write(&p, r#"{"pipeline": {"max_turns": 1}}"#).unwrap();
        let c = ConfigFile::load(&p).unwrap();
        assert_eq!(c.pipeline.max_turns, 1);
        assert_eq!(c.pipeline.k_demos, 3);
        assert_eq!(c.backend, BackendConfig::default());
    }
}
