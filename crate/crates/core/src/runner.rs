//! Experiment orchestration: render, complete, parse and persist each
//! question; score persisted runs; render reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    match_answer, popularity_terciles, DatasetError, PopularityTier, QuestionRecord, QuestionSet,
};
use crate::metrics::{
    geo_mean_token_prob, MetricReport, MetricsError, Outcome, OutcomeCounts, ScoredTrial,
};
use crate::modelgw::{
    cached_complete, synthetic_complete, CacheStatus, GatewayError, HttpTransport,
    ModelEndpointConfig, RawCompletion, ResponseCache, SyntheticAgentConfig, Transport,
};
use crate::protocol::{
    evaluated_answer, parse_response, render_prompt, Channel, Field, FirstRound, ParsedResponse,
    ProtocolError, RewardConfig,
};
use crate::riskctl::CalibrationPoint;

/// Version tag written at the top of every report.
pub const REPORT_SCHEMA: &str = "abstain-report/v1";

/// Bins used for the ECE columns.
pub const ECE_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run record for unknown question {0}")]
    UnknownQuestion(String),
    #[error("{path}: line {line}: {reason}")]
    CorruptRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("nothing to report")]
    EmptyInput,
}

type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where completions come from. Exactly one per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Live {
        endpoint: ModelEndpointConfig,
        #[serde(default)]
        cache: Option<PathBuf>,
    },
    Synthetic {
        agent: SyntheticAgentConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub scheme: RewardConfig,
    pub model: ModelSource,
    pub output: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub limit: Option<usize>,
    /// Stop issuing new requests after the first failed question.
    #[serde(default)]
    pub fail_fast: bool,
}

/// One persisted attempt at a question. Records with `parsed` set are terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question_id: String,
    /// Hex SHA-256 of the rendered prompt.
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<RawCompletion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheStatus>,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub attempts: u32,
}

impl RunRecord {
    pub fn is_terminal(&self) -> bool {
        self.parsed.is_some()
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Loads every record from a JSONL run file; a missing file is an empty run.
/// A torn final line from an interrupted write is ignored.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path).map_err(io_err(path))?)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(io_err(path))?;
    let last = lines.len();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == last => {}
            Err(e) => {
                return Err(RunError::CorruptRecord {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// A completion source as seen by the runner.
pub trait Completer: Sync {
    fn complete(
        &self,
        q: &QuestionRecord,
        prompt: &str,
        scheme: &RewardConfig,
    ) -> std::result::Result<(RawCompletion, Option<CacheStatus>), GatewayError>;

    /// Upper bound on concurrent requests.
    fn max_parallel(&self) -> usize;
}

pub struct SyntheticCompleter {
    pub agent: SyntheticAgentConfig,
}

impl Completer for SyntheticCompleter {
    fn complete(
        &self,
        q: &QuestionRecord,
        _prompt: &str,
        scheme: &RewardConfig,
    ) -> std::result::Result<(RawCompletion, Option<CacheStatus>), GatewayError> {
        synthetic_complete(q, &self.agent, scheme).map(|c| (c, None))
    }

    fn max_parallel(&self) -> usize {
        std::thread::available_parallelism().map_or(4, |n| n.get())
    }
}

pub struct LiveCompleter {
    pub endpoint: ModelEndpointConfig,
    pub transport: Box<dyn Transport>,
    pub cache: Option<ResponseCache>,
}

impl LiveCompleter {
    pub fn connect(
        endpoint: ModelEndpointConfig,
        cache: Option<&Path>,
    ) -> std::result::Result<Self, GatewayError> {
        let transport = Box::new(HttpTransport::new(endpoint.clone())?);
        let cache = cache.map(ResponseCache::open).transpose()?;
        Ok(Self {
            endpoint,
            transport,
            cache,
        })
    }
}

impl Completer for LiveCompleter {
    fn complete(
        &self,
        _q: &QuestionRecord,
        prompt: &str,
        _scheme: &RewardConfig,
    ) -> std::result::Result<(RawCompletion, Option<CacheStatus>), GatewayError> {
        match &self.cache {
            Some(cache) => cached_complete(prompt, &self.endpoint, cache, self.transport.as_ref())
                .map(|(c, s)| (c, Some(s))),
            None => self.transport.complete(prompt).map(|c| (c, None)),
        }
    }

    fn max_parallel(&self) -> usize {
        self.endpoint.max_parallel
    }
}

/// Builds the completer a config asks for.
pub fn completer_for(cfg: &RunConfig) -> Result<Box<dyn Completer>> {
    Ok(match &cfg.model {
        ModelSource::Synthetic { agent } => {
            agent.validate()?;
            Box::new(SyntheticCompleter {
                agent: agent.clone(),
            })
        }
        ModelSource::Live { endpoint, cache } => {
            Box::new(LiveCompleter::connect(endpoint.clone(), cache.as_deref())?)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    /// Questions in scope after `limit`.
    pub selected: usize,
    /// Already terminal in the output file before this run.
    pub skipped: usize,
    pub completed: usize,
    pub errors: usize,
    /// Some question failed after exhausting retries.
    pub exhausted: bool,
    /// Stopped early by the progress callback or fail-fast.
    pub interrupted: bool,
}

fn attempt_question(q: &QuestionRecord, cfg: &RunConfig, completer: &dyn Completer) -> RunRecord {
    let started_ms = now_ms();
    let prompt = render_prompt(q, &cfg.scheme).expect("scheme validated before the run");
    let mut rec = RunRecord {
        question_id: q.id.clone(),
        prompt_hash: prompt_hash(&prompt),
        completion: None,
        parsed: None,
        error: None,
        cache: None,
        started_ms,
        finished_ms: started_ms,
        attempts: 1,
    };
    match completer.complete(q, &prompt, &cfg.scheme) {
        Ok((c, cache)) => {
            rec.attempts = c.attempts();
            rec.parsed = Some(parse_response(&c.text));
            rec.completion = Some(c);
            rec.cache = cache;
        }
        Err(e) => {
            if let GatewayError::RateLimited { attempts }
            | GatewayError::Transport { attempts, .. } = e
            {
                rec.attempts = attempts;
            }
            rec.error = Some(e.to_string());
        }
    }
    rec.finished_ms = now_ms();
    rec
}

/// Runs every question in scope that has no terminal record in `cfg.output`,
/// appending one record per attempt.
///
/// Workers fan out up to the completer's `max_parallel`; the calling thread
/// is the only writer. `progress` sees each persisted record and may return
/// `Break` to stop handing out new questions.
pub fn run_experiment(
    cfg: &RunConfig,
    set: &QuestionSet,
    completer: &dyn Completer,
    progress: &mut dyn FnMut(&Progress) -> ControlFlow<()>,
) -> Result<RunSummary> {
    cfg.scheme.validate()?;
    let done: HashSet<String> = read_records(&cfg.output)?
        .into_iter()
        .filter(RunRecord::is_terminal)
        .map(|r| r.question_id)
        .collect();
    let in_scope = &set.records()[..cfg.limit.unwrap_or(usize::MAX).min(set.len())];
    let todo: Vec<&QuestionRecord> = in_scope.iter().filter(|q| !done.contains(&q.id)).collect();
    let mut summary = RunSummary {
        selected: in_scope.len(),
        skipped: in_scope.len() - todo.len(),
        completed: 0,
        errors: 0,
        exhausted: false,
        interrupted: false,
    };
    if todo.is_empty() {
        return Ok(summary);
    }
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let out_path = cfg.output.as_path();
    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_path)
        .map_err(io_err(out_path))?;

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = completer.max_parallel().clamp(1, todo.len());
    // bounded so an interrupt leaves at most 2 * workers requests in flight or queued
    let (tx, rx) = mpsc::sync_channel::<(RunRecord, bool)>(workers);
    let outcome: Result<()> = std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, todo) = (&next, &stop, &todo);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = todo.get(i) else { break };
                let rec = attempt_question(q, cfg, completer);
                let exhausted = rec.error.is_some() && rec_is_exhaustion(&rec);
                if tx.send((rec, exhausted)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (rec, exhausted) in rx {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}")
                .and_then(|_| out.flush())
                .map_err(io_err(out_path))?;
            if rec.is_terminal() {
                summary.completed += 1;
            } else {
                summary.errors += 1;
                summary.exhausted |= exhausted;
                if cfg.fail_fast {
                    stop.store(true, Ordering::SeqCst);
                    summary.interrupted = true;
                }
            }
            let p = Progress {
                done: summary.skipped + summary.completed,
                total: summary.selected,
                errors: summary.errors,
            };
            if progress(&p).is_break() {
                stop.store(true, Ordering::SeqCst);
                summary.interrupted = true;
            }
        }
        Ok(())
    });
    outcome?;
    out.sync_all().map_err(io_err(out_path))?;
    Ok(summary)
}

fn rec_is_exhaustion(rec: &RunRecord) -> bool {
    rec.error
        .as_deref()
        .is_some_and(|e| e.starts_with("rate limited") || e.starts_with("transport error"))
}

/// Metrics for one popularity tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub tier: PopularityTier,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRun {
    pub label: String,
    pub dataset: String,
    pub scheme: RewardConfig,
    /// One per question with a terminal record, in dataset order.
    pub trials: Vec<ScoredTrial>,
    pub counts: OutcomeCounts,
    pub report: MetricReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terciles: Vec<TierReport>,
    /// Dataset questions without a terminal record.
    pub n_missing: usize,
    pub incomplete: bool,
}

impl ScoredRun {
    /// Points for threshold calibration: every graded trial with a confidence.
    pub fn calibration_points(&self) -> Vec<CalibrationPoint> {
        self.trials
            .iter()
            .filter_map(|t| CalibrationPoint::from_confidence(t.confidence?, t.correct?).ok())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scored run serializes")
    }
}

/// Geometric-mean probability of the tokens overlapping the graded answer.
fn answer_token_conf(c: &RawCompletion, channel: Channel) -> Option<f64> {
    let tokens = c.token_logprobs.as_ref()?;
    let field = match channel {
        Channel::FirstRound => Field::Answer,
        Channel::BestGuess => Field::BestGuess,
        Channel::None => return None,
    };
    let span = crate::protocol::field_span(&c.text, field)?;
    let mut offset = 0;
    let mut logprobs = Vec::new();
    for t in tokens {
        let range = offset..offset + t.token.len();
        offset += t.token.len();
        if range.start < span.end && span.start < range.end {
            logprobs.push(t.logprob);
        }
    }
    if offset != c.text.len() {
        return None;
    }
    geo_mean_token_prob(&logprobs).ok()
}

fn score_one(q: &QuestionRecord, rec: &RunRecord) -> Result<ScoredTrial> {
    let parsed = rec.parsed.as_ref().expect("terminal record");
    let outcome = match parsed.first_round {
        FirstRound::Answered { .. } => Outcome::Answered,
        FirstRound::Abstained { .. } => Outcome::Abstained,
        FirstRound::ParseFailure { .. } => Outcome::ParseFailure,
    };
    let eval = evaluated_answer(parsed);
    let correct = eval
        .answer
        .as_deref()
        .map(|a| match_answer(a, &q.references))
        .transpose()?;
    Ok(ScoredTrial {
        question_id: q.id.clone(),
        outcome,
        channel: eval.channel,
        confidence: eval.confidence,
        correct,
        token_conf: rec
            .completion
            .as_ref()
            .and_then(|c| answer_token_conf(c, eval.channel)),
    })
}

/// Grades the last terminal record of each question against `set`.
pub fn score_run(
    records: &[RunRecord],
    set: &QuestionSet,
    scheme: &RewardConfig,
    label: impl Into<String>,
) -> Result<ScoredRun> {
    let mut latest: HashMap<&str, &RunRecord> = HashMap::new();
    for r in records {
        if set.get(&r.question_id).is_none() {
            return Err(RunError::UnknownQuestion(r.question_id.clone()));
        }
        if r.is_terminal() {
            latest.insert(&r.question_id, r);
        }
    }
    let mut trials = Vec::with_capacity(latest.len());
    for q in set.records() {
        if let Some(rec) = latest.get(q.id.as_str()) {
            trials.push(score_one(q, rec)?);
        }
    }
    let report = MetricReport::compute(&trials, scheme, ECE_BINS)?;
    let terciles = match popularity_terciles(set) {
        Ok(t) => {
            let mut by_tier: BTreeMap<PopularityTier, Vec<ScoredTrial>> = BTreeMap::new();
            for trial in &trials {
                if let Some(tier) = t.tier_of(&trial.question_id) {
                    by_tier.entry(tier).or_default().push(trial.clone());
                }
            }
            by_tier
                .into_iter()
                .map(|(tier, ts)| {
                    Ok(TierReport {
                        tier,
                        report: MetricReport::compute(&ts, scheme, ECE_BINS)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Err(_) => Vec::new(),
    };
    let n_missing = set.len() - trials.len();
    Ok(ScoredRun {
        label: label.into(),
        dataset: set.source().to_string(),
        scheme: *scheme,
        counts: report.counts,
        trials,
        report,
        terciles,
        n_missing,
        incomplete: n_missing > 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "table" => Ok(Self::Table),
            other => Err(format!("unknown report format {other}")),
        }
    }
}

/// Report columns, in order. Changing them requires bumping [`REPORT_SCHEMA`].
pub const REPORT_COLUMNS: [&str; 33] = [
    "run",
    "scheme",
    "reward",
    "penalty",
    "abstain",
    "norms",
    "n_total",
    "n_answered",
    "n_abstained",
    "n_parse_failure",
    "n_incorrect_answered",
    "n_incorrect_overall",
    "far_answered",
    "far_answered_ci",
    "far_overall",
    "far_overall_ci",
    "coverage",
    "coverage_ci",
    "aer",
    "aer_upper_bound",
    "total_reward",
    "brier_answered",
    "brier_answered_ci",
    "brier_overall",
    "ece_answered",
    "ece_overall",
    "pearson_r",
    "pearson_ci_low",
    "pearson_ci_high",
    "precision",
    "recall",
    "f1",
    "incomplete",
];

fn row(s: &ScoredRun) -> Vec<Value> {
    let r = &s.report;
    let c = &s.counts;
    let f = |x: Option<f64>| x.map_or(Value::Null, Value::from);
    vec![
        Value::from(s.label.clone()),
        Value::from(s.scheme.scheme.label()),
        Value::from(s.scheme.reward_correct),
        Value::from(s.scheme.penalty_incorrect),
        f(s.scheme.reward_abstain),
        Value::from(s.scheme.norms),
        Value::from(c.n_total),
        Value::from(c.n_answered),
        Value::from(c.n_abstained),
        Value::from(c.n_parse_failure),
        Value::from(c.n_incorrect_answered),
        Value::from(c.n_incorrect_overall),
        f(r.far_answered),
        f(r.far_answered_ci),
        f(r.far_overall),
        f(r.far_overall_ci),
        f(r.coverage),
        f(r.coverage_ci),
        f(r.aer),
        f(r.aer_upper_bound),
        f(r.total_reward),
        f(r.brier_answered),
        f(r.brier_answered_ci),
        f(r.brier_overall),
        f(r.ece_answered),
        f(r.ece_overall),
        f(r.pearson_r),
        f(r.pearson_ci_low),
        f(r.pearson_ci_high),
        f(r.precision),
        f(r.recall),
        f(r.f1),
        Value::from(s.incomplete),
    ]
}

fn cell(v: &Value, fixed: bool) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) if fixed && !(n.is_u64() || n.is_i64()) => {
            format!("{:.4}", n.as_f64().unwrap())
        }
        other => other.to_string(),
    }
}

/// One row per run. CSV and table output start with a `# abstain-report/v1`
/// line; JSON wraps the rows as `{"schema": …, "runs": […]}`.
pub fn report(scored: &[ScoredRun], format: ReportFormat) -> Result<String> {
    if scored.is_empty() {
        return Err(RunError::EmptyInput);
    }
    for s in scored {
        s.counts.check()?;
    }
    let rows: Vec<Vec<Value>> = scored.iter().map(row).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            let runs: Vec<serde_json::Map<String, Value>> = rows
                .into_iter()
                .map(|r| {
                    REPORT_COLUMNS
                        .iter()
                        .map(|k| k.to_string())
                        .zip(r)
                        .collect()
                })
                .collect();
            out = serde_json::to_string_pretty(
                &serde_json::json!({"schema": REPORT_SCHEMA, "runs": runs}),
            )
            .expect("json");
            out.push('\n');
        }
        ReportFormat::Csv => {
            writeln!(out, "# {REPORT_SCHEMA}").unwrap();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS).expect("in-memory write");
            for r in &rows {
                w.write_record(r.iter().map(|v| cell(v, false)))
                    .expect("in-memory write");
            }
            out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
        }
        ReportFormat::Table => {
            writeln!(out, "# {REPORT_SCHEMA}").unwrap();
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| r.iter().map(|v| cell(v, true)).collect())
                .collect();
            let width = |i: usize| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([REPORT_COLUMNS[i].len()])
                    .max()
                    .unwrap()
            };
            let widths: Vec<usize> = (0..REPORT_COLUMNS.len()).map(width).collect();
            let line = |items: Vec<&str>| {
                items
                    .iter()
                    .zip(&widths)
                    .map(|(s, w)| format!("{s:>w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            writeln!(out, "{}", line(REPORT_COLUMNS.to_vec())).unwrap();
            for r in &cells {
                writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgw::{synthetic_question_set, uniform_knowledge, AgentPolicy};
    use std::sync::atomic::AtomicUsize;

    fn synthetic_cfg(out: PathBuf, set: &QuestionSet, limit: Option<usize>) -> RunConfig {
        RunConfig {
            dataset: set.source().into(),
            scheme: RewardConfig::scheme_b(1.0, 1.0, 0.4),
            model: ModelSource::Synthetic {
                agent: SyntheticAgentConfig {
                    knowledge: uniform_knowledge(set, 3),
                    default_q_true: None,
                    confidence_noise: 0.0,
                    policy: AgentPolicy::BayesThreshold { tau: 0.7 },
                    seed: 42,
                    emit_logprobs: true,
                },
            },
            output: out,
            seed: 42,
            limit,
            fail_fast: false,
        }
    }

    struct Counted<'a> {
        inner: &'a dyn Completer,
        calls: AtomicUsize,
    }

    impl Completer for Counted<'_> {
        fn complete(
            &self,
            q: &QuestionRecord,
            p: &str,
            s: &RewardConfig,
        ) -> std::result::Result<(RawCompletion, Option<CacheStatus>), GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(q, p, s)
        }

        fn max_parallel(&self) -> usize {
            3
        }
    }

    fn go(_: &Progress) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    #[test]
    fn synthetic_run_is_complete_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_question_set(100, 1);
        let mut scored = Vec::new();
        for name in ["a.jsonl", "b.jsonl"] {
            let cfg = synthetic_cfg(dir.path().join(name), &set, None);
            let c = completer_for(&cfg).unwrap();
            let s = run_experiment(&cfg, &set, c.as_ref(), &mut go).unwrap();
            assert_eq!((s.completed, s.errors, s.skipped), (100, 0, 0));
            let recs = read_records(&cfg.output).unwrap();
            assert_eq!(recs.len(), 100);
            scored.push(
                score_run(&recs, &set, &cfg.scheme, "run")
                    .unwrap()
                    .to_json(),
            );
        }
        assert_eq!(scored[0], scored[1]);
    }

    #[test]
    fn resume_issues_only_missing_questions() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_question_set(100, 2);
        let cfg = synthetic_cfg(dir.path().join("r.jsonl"), &set, None);
        let base = completer_for(&cfg).unwrap();
        let counted = Counted {
            inner: base.as_ref(),
            calls: AtomicUsize::new(0),
        };
        let mut stop_at_50 = |p: &Progress| {
            if p.done >= 50 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        };
        let first = run_experiment(&cfg, &set, &counted, &mut stop_at_50).unwrap();
        assert!(first.interrupted);
        let persisted = read_records(&cfg.output).unwrap().len();
        assert!((50..=50 + 2 * 3).contains(&persisted), "{persisted}");
        let before = counted.calls.load(Ordering::SeqCst);
        let second = run_experiment(&cfg, &set, &counted, &mut go).unwrap();
        assert_eq!(second.skipped, persisted);
        assert_eq!(
            counted.calls.load(Ordering::SeqCst) - before,
            100 - persisted
        );
        assert_eq!(read_records(&cfg.output).unwrap().len(), 100);
    }

    #[test]
    fn limit_caps_records() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_question_set(300, 3);
        let cfg = synthetic_cfg(dir.path().join("l.jsonl"), &set, Some(10));
        let c = completer_for(&cfg).unwrap();
        run_experiment(&cfg, &set, c.as_ref(), &mut go).unwrap();
        let recs = read_records(&cfg.output).unwrap();
        assert_eq!(recs.len(), 10);
        let s = score_run(&recs, &set, &cfg.scheme, "l").unwrap();
        assert!(s.incomplete);
        assert_eq!(s.n_missing, 290);
    }

    struct Flaky;

    impl Completer for Flaky {
        fn complete(
            &self,
            q: &QuestionRecord,
            _: &str,
            _: &RewardConfig,
        ) -> std::result::Result<(RawCompletion, Option<CacheStatus>), GatewayError> {
            match q.id.as_str() {
                "a" => Ok((
                    RawCompletion::text_only("Answer: Paris\nConfidence: 0.9"),
                    None,
                )),
                "b" => Ok((RawCompletion::text_only("I think it's Rome"), None)),
                _ => Err(GatewayError::RateLimited { attempts: 5 }),
            }
        }

        fn max_parallel(&self) -> usize {
            1
        }
    }

    fn small_set() -> QuestionSet {
        let r = |id: &str| QuestionRecord::new(id, "Capital?", ["Paris"]).unwrap();
        QuestionSet::new(vec![r("a"), r("b"), r("c")], "small").unwrap()
    }

    #[test]
    fn errors_are_recorded_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        let set = small_set();
        let mut cfg = synthetic_cfg(dir.path().join("f.jsonl"), &set, None);
        let s = run_experiment(&cfg, &set, &Flaky, &mut go).unwrap();
        assert_eq!((s.completed, s.errors, s.exhausted), (2, 1, true));
        let recs = read_records(&cfg.output).unwrap();
        let failed = recs.iter().find(|r| r.question_id == "c").unwrap();
        assert_eq!(failed.attempts, 5);
        assert!(!failed.is_terminal());

        let scored = score_run(&recs, &set, &cfg.scheme, "f").unwrap();
        assert_eq!(scored.counts.n_parse_failure, 1);
        assert_eq!(scored.counts.n_total, 2);
        assert!(scored.incomplete);

        cfg.output = dir.path().join("ff.jsonl");
        cfg.fail_fast = true;
        let set2 = QuestionSet::new(
            vec![
                QuestionRecord::new("c", "x", ["y"]).unwrap(),
                QuestionRecord::new("a", "x", ["y"]).unwrap(),
            ],
            "s2",
        )
        .unwrap();
        let s = run_experiment(&cfg, &set2, &Flaky, &mut go).unwrap();
        assert!(s.interrupted);
        assert_eq!(s.completed, 0);
    }

    #[test]
    fn duplicate_ids_keep_last_terminal_record() {
        let set = small_set();
        let mk = |id: &str, text: &str| RunRecord {
            question_id: id.into(),
            prompt_hash: String::new(),
            completion: Some(RawCompletion::text_only(text)),
            parsed: Some(parse_response(text)),
            error: None,
            cache: None,
            started_ms: 0,
            finished_ms: 0,
            attempts: 1,
        };
        let recs = vec![
            mk("a", "Answer: Rome\nConfidence: 0.5"),
            mk("a", "Answer: Paris\nConfidence: 0.5"),
        ];
        let s = score_run(&recs, &set, &RewardConfig::scheme_a(1.0, 1.0), "d").unwrap();
        assert_eq!(s.trials.len(), 1);
        assert_eq!(s.trials[0].correct, Some(true));
        let bad = vec![mk("zz", "Answer: x")];
        assert!(matches!(
            score_run(&bad, &set, &RewardConfig::scheme_a(1.0, 1.0), "d"),
            Err(RunError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn all_correct_run_has_no_aer() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_question_set(40, 4);
        let mut cfg = synthetic_cfg(dir.path().join("c.jsonl"), &set, None);
        if let ModelSource::Synthetic { agent } = &mut cfg.model {
            agent.knowledge.clear();
            agent.default_q_true = Some(1.0);
        }
        let c = completer_for(&cfg).unwrap();
        run_experiment(&cfg, &set, c.as_ref(), &mut go).unwrap();
        let s = score_run(&read_records(&cfg.output).unwrap(), &set, &cfg.scheme, "c").unwrap();
        assert_eq!(s.report.far_answered, Some(0.0));
        assert_eq!(s.report.aer, None);
        assert_eq!(s.terciles.len(), 3);
    }

    #[test]
    fn token_conf_uses_answer_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_question_set(50, 5);
        let cfg = synthetic_cfg(dir.path().join("t.jsonl"), &set, None);
        let c = completer_for(&cfg).unwrap();
        run_experiment(&cfg, &set, c.as_ref(), &mut go).unwrap();
        let s = score_run(&read_records(&cfg.output).unwrap(), &set, &cfg.scheme, "t").unwrap();
        let knowledge = uniform_knowledge(&set, 3);
        for t in &s.trials {
            let expected = knowledge[&t.question_id].max(1e-6);
            assert!((t.token_conf.unwrap() - expected).abs() < 1e-9, "{t:?}");
        }
        // σ = 0: stated and token confidence coincide up to 4-decimal rounding
        assert!(s.report.pearson_r.unwrap() > 0.999);
    }

    #[test]
    fn torn_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("torn.jsonl");
        std::fs::write(&p, "{\"question_id\":\"a\",\"prompt_hash\":\"\",\"started_ms\":0,\"finished_ms\":0,\"attempts\":1}\n{\"question_id\":").unwrap();
        assert_eq!(read_records(&p).unwrap().len(), 1);
        std::fs::write(&p, "garbage\n{\"question_id\":\"a\",\"prompt_hash\":\"\",\"started_ms\":0,\"finished_ms\":0,\"attempts\":1}\n").unwrap();
        assert!(matches!(
            read_records(&p),
            Err(RunError::CorruptRecord { line: 1, .. })
        ));
    }

    fn two_runs() -> Vec<ScoredRun> {
        let set = small_set();
        let rec = |id: &str, text: &str| RunRecord {
            question_id: id.into(),
            prompt_hash: String::new(),
            completion: Some(RawCompletion::text_only(text)),
            parsed: Some(parse_response(text)),
            error: None,
            cache: None,
            started_ms: 0,
            finished_ms: 0,
            attempts: 1,
        };
        let recs = vec![
            rec("a", "Answer: Paris\nConfidence: 0.9"),
            rec(
                "b",
                "Answer: I don't know\nConfidence:\nBest Guess: Lyon\nBest Guess Confidence: 0.2",
            ),
            rec("c", "Answer: Rome\nConfidence: 0.6"),
        ];
        vec![
            score_run(&recs, &set, &RewardConfig::scheme_b(1.0, 1.0, 0.4), "b-run").unwrap(),
            score_run(&recs, &set, &RewardConfig::pure_eval(), "pure-run").unwrap(),
        ]
    }

    #[test]
    fn report_formats() {
        let runs = two_runs();
        let csv = report(&runs[..1], ReportFormat::Csv).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "# abstain-report/v1");
        assert_eq!(lines[1], REPORT_COLUMNS.join(","));

        let json: Value =
            serde_json::from_str(&report(&runs, ReportFormat::Json).unwrap()).unwrap();
        let arr = json["runs"].as_array().unwrap();
        assert_eq!(arr.len(), 2);
        let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&arr[0]), keys(&arr[1]));
        assert!(matches!(
            report(&[], ReportFormat::Csv),
            Err(RunError::EmptyInput)
        ));
    }

    #[test]
    fn table_golden() {
        let table = report(&two_runs(), ReportFormat::Table).unwrap();
        let golden = include_str!("../tests/golden/report_table.txt");
        assert_eq!(table, golden);
    }
}
