//! The four-stage repair pipeline: bug report, diagnosis, patch generation
//! and reviewer-driven verification.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CallContext, ChatBackend, GenerationParams};
use crate::corpus::BugInstance;
use crate::prompting::{
    extract_patch, parse_verdict, ChatMessage, Conversation, PromptError, ReviewDigest, Stage,
    TemplateSet,
};
use crate::retrieval::Bm25Index;
use crate::transcript::{self, StageRecord, TranscriptError};

/// Stands in for the output of a disabled stage.
pub const NOT_AVAILABLE: &str = "(not available)";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error("workers must be at least 1")]
    NoWorkers,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Completion token caps per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageCaps {
    pub report: u32,
    pub pattern: u32,
    pub explanation: u32,
    pub patch: u32,
    pub review: u32,
}

impl Default for StageCaps {
    fn default() -> Self {
        StageCaps {
            report: 200,
            pattern: 500,
            explanation: 500,
            patch: 150,
            review: 200,
        }
    }
}

impl StageCaps {
    pub fn for_stage(&self, stage: Stage) -> u32 {
        match stage {
            Stage::Report => self.report,
            Stage::Pattern => self.pattern,
            Stage::Explain => self.explanation,
            Stage::Generate | Stage::Regenerate => self.patch,
            Stage::Review => self.review,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub enable_tester: bool,
    pub enable_diagnosis: bool,
    pub enable_reviewer: bool,
    pub max_turns: u32,
    pub k_demos: usize,
    pub caps: StageCaps,
    pub temperature: f64,
    /// Pattern, explanation and patch requests continue one developer
    /// conversation instead of starting fresh.
    pub shared_developer_context: bool,
    /// Permit retrieval from a corpus that contains the instance's own
    /// repository (e.g. ablations over training data).
    pub allow_same_repo_retrieval: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            enable_tester: true,
            enable_diagnosis: true,
            enable_reviewer: true,
            max_turns: 3,
            k_demos: 3,
            caps: StageCaps::default(),
            temperature: 0.0,
            shared_developer_context: false,
            allow_same_repo_retrieval: false,
        }
    }
}

impl PipelineConfig {
    /// Every component off: the patch is generated from the buggy method
    /// alone.
    pub fn bare() -> Self {
        PipelineConfig {
            enable_tester: false,
            enable_diagnosis: false,
            enable_reviewer: false,
            max_turns: 0,
            ..Self::default()
        }
    }

    /// Review budget actually in force.
    pub fn effective_turns(&self) -> u32 {
        if self.enable_reviewer {
            self.max_turns
        } else {
            0
        }
    }

    pub fn params(&self, stage: Stage) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature,
            max_tokens: self.caps.for_stage(stage),
            n: 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let c = &self.caps;
        if [c.report, c.pattern, c.explanation, c.patch, c.review].contains(&0) {
            return Err("token caps must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err("temperature must be >= 0".into());
        }
        if self.enable_diagnosis && !(1..=3).contains(&self.k_demos) {
            return Err("k_demos must be between 1 and 3".into());
        }
        Ok(())
    }

    /// Every `(stage, turn)` a run under this config can reach.
    pub fn reachable_calls(&self) -> Vec<(Stage, u32)> {
        let mut calls = Vec::new();
        if self.enable_tester {
            calls.push((Stage::Report, 0));
        }
        if self.enable_diagnosis {
            calls.push((Stage::Pattern, 0));
            calls.push((Stage::Explain, 0));
        }
        calls.push((Stage::Generate, 0));
        for t in 1..=self.effective_turns() {
            calls.push((Stage::Review, t));
            calls.push((Stage::Regenerate, t));
        }
        calls
    }

    /// Upper bound on backend calls for one instance.
    pub fn max_calls(&self) -> usize {
        self.reachable_calls().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    /// Unix milliseconds.
    #[default]
    Wall,
    /// A per-instance counter: 0, 1, 2, ... Keeps transcripts byte-stable.
    Logical,
}

struct Clock {
    kind: ClockKind,
    tick: u64,
}

impl Clock {
    fn new(kind: ClockKind) -> Self {
        Clock { kind, tick: 0 }
    }

    fn now(&mut self) -> u64 {
        match self.kind {
            ClockKind::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            ClockKind::Logical => {
                let t = self.tick;
                self.tick += 1;
                t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum PipelineStatus {
    Completed,
    Failed { stage: Stage, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub instance_id: String,
    pub final_patch: String,
    pub passed_review: bool,
    pub turns_used: u32,
    pub records: Vec<StageRecord>,
    pub status: PipelineStatus,
}

impl PipelineResult {
    pub fn is_completed(&self) -> bool {
        self.status == PipelineStatus::Completed
    }

    pub fn stage_sequence(&self) -> Vec<Stage> {
        self.records.iter().map(|r| r.stage).collect()
    }

    /// Rebuilds a completed result from its transcript records.
    pub fn from_records(instance_id: &str, records: Vec<StageRecord>) -> Option<Self> {
        let patch_reply = records
            .iter()
            .rev()
            .find(|r| matches!(r.stage, Stage::Generate | Stage::Regenerate))?
            .reply()?;
        let final_patch = extract_patch(patch_reply).ok()?;
        let reviews: Vec<&StageRecord> =
            records.iter().filter(|r| r.stage == Stage::Review).collect();
        let passed_review = match reviews.last() {
            Some(r) => parse_verdict(r.reply()?).passed,
            None => false,
        };
        if records.iter().any(|r| r.reply().is_none()) {
            return None;
        }
        Some(PipelineResult {
            instance_id: instance_id.to_string(),
            final_patch,
            passed_review,
            turns_used: reviews.len() as u32,
            records,
            status: PipelineStatus::Completed,
        })
    }

    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            instance_id: self.instance_id.clone(),
            final_patch: self.final_patch.clone(),
            candidates: if self.final_patch.is_empty() {
                Vec::new()
            } else {
                vec![self.final_patch.clone()]
            },
            passed_review: self.passed_review,
            turns_used: self.turns_used,
            backend_calls: self.records.len(),
            stages: self
                .records
                .iter()
                .map(|r| match r.stage {
                    Stage::Review | Stage::Regenerate => format!("{}@{}", r.stage, r.turn),
                    s => s.to_string(),
                })
                .collect(),
            status: self.status.clone(),
        }
    }
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub instance_id: String,
    pub final_patch: String,
    /// Ranked candidate patches; the pipeline produces one.
    #[serde(default)]
    pub candidates: Vec<String>,
    #[serde(default)]
    pub passed_review: bool,
    #[serde(default)]
    pub turns_used: u32,
    #[serde(default)]
    pub backend_calls: usize,
    #[serde(default)]
    pub stages: Vec<String>,
    #[serde(flatten)]
    pub status: PipelineStatus,
}

struct Step<'a, B: ?Sized> {
    x: &'a BugInstance,
    cfg: &'a PipelineConfig,
    backend: &'a B,
    clock: Clock,
    records: Vec<StageRecord>,
}

struct Failure {
    stage: Stage,
    reason: String,
}

impl<B: ChatBackend + ?Sized> Step<'_, B> {
    fn call(&mut self, stage: Stage, turn: u32, mut conv: Conversation) -> Result<(String, Conversation), Failure> {
        let ctx = CallContext {
            instance_id: &self.x.id,
            stage,
            turn,
        };
        let started = self.clock.now();
        let result = self.backend.complete(&ctx, &conv, &self.cfg.params(stage));
        let finished = self.clock.now();
        let reply = result.as_ref().ok().map(|c| c.text.clone());
        if let Some(text) = &reply {
            conv.push(ChatMessage::assistant(text.clone()));
        }
        self.records.push(StageRecord {
            stage,
            turn,
            started,
            finished,
            conversation: conv.clone(),
        });
        match result {
            Ok(c) => Ok((c.text, conv)),
            Err(e) => Err(Failure {
                stage,
                reason: describe(&e),
            }),
        }
    }
}

fn describe(e: &BackendError) -> String {
    e.to_string()
}

fn prompt_failure(stage: Stage) -> impl FnOnce(PromptError) -> Failure {
    move |e| Failure {
        stage,
        reason: e.to_string(),
    }
}

fn or_not_available(text: String) -> String {
    if text.trim().is_empty() {
        NOT_AVAILABLE.to_string()
    } else {
        text
    }
}

/// Continues `prior` (ending with a reply) with the user message of `fresh`.
fn continue_with(prior: &Conversation, fresh: Conversation) -> Conversation {
    let mut conv = prior.clone();
    conv.messages
        .extend(fresh.messages.into_iter().filter(|m| m.role != crate::prompting::Role::System));
    conv
}

/// Runs the pipeline for one instance. Never panics on backend failure:
/// the result then carries `Failed` status and the partial transcript.
pub fn run_pipeline<B: ChatBackend + ?Sized>(
    x: &BugInstance,
    cfg: &PipelineConfig,
    templates: &TemplateSet,
    backend: &B,
    index: Option<&Bm25Index>,
    clock: ClockKind,
) -> PipelineResult {
    let mut step = Step {
        x,
        cfg,
        backend,
        clock: Clock::new(clock),
        records: Vec::new(),
    };
    let mut state = PipelineResult {
        instance_id: x.id.clone(),
        final_patch: String::new(),
        passed_review: false,
        turns_used: 0,
        records: Vec::new(),
        status: PipelineStatus::Completed,
    };
    let outcome = drive(&mut step, &mut state, templates, index);
    state.records = step.records;
    if let Err(f) = outcome {
        state.status = PipelineStatus::Failed {
            stage: f.stage,
            reason: f.reason,
        };
    }
    state
}

fn drive<B: ChatBackend + ?Sized>(
    step: &mut Step<'_, B>,
    state: &mut PipelineResult,
    templates: &TemplateSet,
    index: Option<&Bm25Index>,
) -> Result<(), Failure> {
    let x = step.x;
    let cfg = step.cfg;

    // (1) bug reporting
    let report = if cfg.enable_tester {
        or_not_available(step.call(Stage::Report, 0, templates.render_tester_prompt(x))?.0)
    } else {
        NOT_AVAILABLE.to_string()
    };

    // (2) diagnosis
    let mut developer: Option<Conversation> = None;
    let (patterns, explanation) = if cfg.enable_diagnosis {
        let fail = |reason: String| Failure {
            stage: Stage::Pattern,
            reason,
        };
        let index = index.ok_or_else(|| fail("no retrieval index".into()))?;
        if !cfg.allow_same_repo_retrieval && index.contains_repo(&x.repo) {
            return Err(fail(format!(
                "leakage: repository {:?} is part of the retrieval corpus",
                x.repo
            )));
        }
        let demos = index.top_k(x, cfg.k_demos);
        let prompt = templates
            .render_pattern_prompt(&demos)
            .map_err(prompt_failure(Stage::Pattern))?;
        let (patterns, conv) = step.call(Stage::Pattern, 0, prompt)?;
        let fresh = templates.render_explanation_prompt(x);
        let prompt = if cfg.shared_developer_context {
            continue_with(&conv, fresh)
        } else {
            fresh
        };
        let (explanation, conv) = step.call(Stage::Explain, 0, prompt)?;
        if cfg.shared_developer_context {
            developer = Some(conv);
        }
        (or_not_available(patterns), or_not_available(explanation))
    } else {
        (NOT_AVAILABLE.to_string(), NOT_AVAILABLE.to_string())
    };

    // (3) patch generation
    let fresh = templates
        .render_patch_prompt(x, &report, &patterns, &explanation)
        .map_err(prompt_failure(Stage::Generate))?;
    let prompt = match &developer {
        Some(prior) => continue_with(prior, fresh),
        None => fresh,
    };
    let (reply, mut developer) = step.call(Stage::Generate, 0, prompt)?;
    let mut candidate = extract_patch(&reply).map_err(prompt_failure(Stage::Generate))?;
    state.final_patch = candidate.clone();

    // (4) verification
    let digest = ReviewDigest {
        report: &report,
        patterns: &patterns,
        explanation: &explanation,
    };
    for turn in 1..=cfg.effective_turns() {
        let prompt = templates
            .render_review_prompt(x, digest, &candidate)
            .map_err(prompt_failure(Stage::Review))?;
        let (review, _) = step.call(Stage::Review, turn, prompt)?;
        let verdict = parse_verdict(&review);
        state.turns_used = turn;
        state.passed_review = verdict.passed;
        if verdict.passed {
            break;
        }
        let prompt = templates
            .render_regenerate_prompt(&developer, &verdict.feedback)
            .map_err(prompt_failure(Stage::Regenerate))?;
        let (reply, conv) = step.call(Stage::Regenerate, turn, prompt)?;
        developer = conv;
        candidate = extract_patch(&reply).map_err(prompt_failure(Stage::Regenerate))?;
        state.final_patch = candidate.clone();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub workers: usize,
    /// When set, transcripts and `results.jsonl` are written here.
    pub run_dir: Option<PathBuf>,
    /// Skip instances whose completed transcript already exists.
    pub resume: bool,
    pub clock: ClockKind,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            workers: 1,
            run_dir: None,
            resume: false,
            clock: ClockKind::Wall,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    /// In input order.
    pub results: Vec<PipelineResult>,
    /// Pipelines actually executed (not restored from transcripts).
    pub executed: usize,
    pub resumed: usize,
}

impl BenchmarkOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &PipelineResult> {
        self.results.iter().filter(|r| !r.is_completed())
    }
}

pub const TRANSCRIPT_DIR: &str = "transcripts";
pub const RESULTS_FILE: &str = "results.jsonl";

fn write_atomic(path: &Path, contents: &str) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn restore(dir: &Path, id: &str) -> Result<Option<PipelineResult>, RunError> {
    let path = transcript::transcript_path(dir, id);
    if !path.exists() {
        return Ok(None);
    }
    let lines = transcript::read_lines(&path)?;
    Ok(PipelineResult::from_records(id, transcript::from_lines(&lines)))
}

fn persist(dir: &Path, result: &PipelineResult) -> Result<(), RunError> {
    let text = transcript::render(&result.instance_id, &result.records);
    let done = transcript::transcript_path(dir, &result.instance_id);
    let partial = transcript::partial_path(dir, &result.instance_id);
    if result.is_completed() {
        write_atomic(&done, &text)?;
        if partial.exists() {
            fs::remove_file(&partial).map_err(io_err(&partial))?;
        }
    } else {
        write_atomic(&partial, &text)?;
        if done.exists() {
            fs::remove_file(&done).map_err(io_err(&done))?;
        }
    }
    Ok(())
}

/// Runs every instance on a pool of `opts.workers` threads. Individual
/// failures are recorded in the results; only I/O on the run directory
/// aborts the batch.
pub fn run_benchmark<B: ChatBackend + ?Sized>(
    instances: &[BugInstance],
    cfg: &PipelineConfig,
    templates: &TemplateSet,
    backend: &B,
    index: Option<&Bm25Index>,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkOutcome, RunError> {
    if opts.workers == 0 {
        return Err(RunError::NoWorkers);
    }
    let tdir = opts.run_dir.as_ref().map(|d| d.join(TRANSCRIPT_DIR));
    if let Some(d) = &tdir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let slots: Vec<Mutex<Option<(PipelineResult, bool)>>> =
        instances.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<RunError>> = Mutex::new(None);

    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= instances.len() || first_error.lock().unwrap().is_some() {
            break;
        }
        let x = &instances[i];
        let outcome = (|| -> Result<(PipelineResult, bool), RunError> {
            if let (Some(d), true) = (&tdir, opts.resume) {
                if let Some(done) = restore(d, &x.id)? {
                    return Ok((done, false));
                }
            }
            let result = run_pipeline(x, cfg, templates, backend, index, opts.clock);
            if let Some(d) = &tdir {
                persist(d, &result)?;
            }
            Ok((result, true))
        })();
        match outcome {
            Ok(r) => *slots[i].lock().unwrap() = Some(r),
            Err(e) => {
                first_error.lock().unwrap().get_or_insert(e);
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 0..opts.workers.min(instances.len().max(1)) {
            s.spawn(work);
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut results = Vec::with_capacity(instances.len());
    let mut executed = 0;
    for slot in slots {
        let (result, ran) = slot.into_inner().unwrap().expect("every slot filled");
        executed += ran as usize;
        results.push(result);
    }
    if let Some(dir) = &opts.run_dir {
        let mut text = String::new();
        for r in &results {
            text.push_str(&serde_json::to_string(&r.summary()).expect("summaries serialize"));
            text.push('\n');
        }
        write_atomic(&dir.join(RESULTS_FILE), &text)?;
    }
    Ok(BenchmarkOutcome {
        resumed: results.len() - executed,
        executed,
        results,
    })
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultSummary>, RunError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Io {
                path: format!("{}:{}", path.display(), n + 1),
                source: io::Error::new(io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}
