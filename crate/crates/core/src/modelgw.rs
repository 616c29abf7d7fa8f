//! Completion sources: a chat-completions HTTP client with retry and a
//! response cache, and a deterministic synthetic agent for offline runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{match_answer, QuestionRecord, QuestionSet};
use crate::protocol::{format_response, FirstRound, RewardConfig, Scheme};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("cache entry {0} is corrupt and was quarantined")]
    CacheCorrupt(String),
    #[error("cache I/O: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Failures that survive retries and would hit every later request too.
    pub fn is_exhaustion(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimited { .. } | GatewayError::Transport { .. }
        )
    }
}

type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failed_attempts: u32) -> Duration {
        let factor = 1u64 << failed_attempts.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

/// Live endpoint settings. Holds the *name* of the token variable, never the token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub request_logprobs: bool,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl ModelEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            request_logprobs: true,
            auth_token_env: None,
            max_parallel: 1,
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel == 0 {
            return Err(GatewayError::Config(
                "max_parallel must be at least 1".into(),
            ));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Config(
                "temperature must be nonnegative".into(),
            ));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(GatewayError::Config(format!(
                "base_url {} is not an http(s) URL",
                self.base_url
            )));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, Value>,
}

impl RawCompletion {
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            provider_meta: BTreeMap::new(),
        }
    }

    /// Number of transport attempts recorded by the client, 1 when absent.
    pub fn attempts(&self) -> u32 {
        self.provider_meta
            .get("attempts")
            .and_then(Value::as_u64)
            .unwrap_or(1) as u32
    }
}

/// Something that turns a prompt into a completion.
pub trait Transport: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<RawCompletion>;
}

struct Secret(String);

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<redacted>")
    }
}

/// Refills `rate` tokens per second up to `capacity`.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: usize, rate_per_sec: f64) -> Self {
        Self {
            capacity: capacity as f64,
            rate: rate_per_sec,
            state: Mutex::new((capacity as f64, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Blocking chat-completions client.
#[derive(Debug)]
pub struct HttpTransport {
    cfg: ModelEndpointConfig,
    client: reqwest::blocking::Client,
    token: Option<Secret>,
    bucket: TokenBucket,
}

impl HttpTransport {
    /// Reads the token from `cfg.auth_token_env` when one is named.
    pub fn new(cfg: ModelEndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let token = match &cfg.auth_token_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(Secret(v)),
                _ => {
                    return Err(GatewayError::Auth(format!(
                        "environment variable {var} is not set"
                    )))
                }
            },
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let bucket = TokenBucket::new(cfg.max_parallel, cfg.max_parallel as f64);
        Ok(Self {
            cfg,
            client,
            token,
            bucket,
        })
    }

    pub fn config(&self) -> &ModelEndpointConfig {
        &self.cfg
    }

    fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "logprobs": self.cfg.request_logprobs,
        })
    }
}

enum Attempt {
    Done(RawCompletion),
    Retry(GatewayError),
    Fatal(GatewayError),
}

fn excerpt(body: &str) -> String {
    body.chars().take(300).collect()
}

fn parse_completion(body: &str, want_logprobs: bool) -> Result<RawCompletion> {
    let bad = |msg: &str| GatewayError::Provider {
        status: 200,
        body: format!("{msg}: {}", excerpt(body)),
    };
    let v: Value = serde_json::from_str(body).map_err(|_| bad("response is not JSON"))?;
    let choice = v.pointer("/choices/0").ok_or_else(|| bad("no choices"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("no message content"))?
        .to_string();
    let mut meta = BTreeMap::new();
    for key in ["id", "model", "usage"] {
        if let Some(x) = v.get(key) {
            meta.insert(key.to_string(), x.clone());
        }
    }
    let token_logprobs = match choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
    {
        Some(items) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                let token = item
                    .get("token")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("logprob entry without token"))?;
                let logprob = item
                    .get("logprob")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| bad("logprob entry without value"))?;
                if logprob > 0.0 {
                    return Err(bad("positive logprob"));
                }
                out.push(TokenLogprob {
                    token: token.to_string(),
                    logprob,
                });
            }
            Some(out)
        }
        None => None,
    };
    if want_logprobs && token_logprobs.is_none() {
        meta.insert("logprobs_missing".into(), Value::Bool(true));
    }
    Ok(RawCompletion {
        text,
        token_logprobs,
        provider_meta: meta,
    })
}

impl HttpTransport {
    fn attempt(&self, prompt: &str, attempt: u32) -> Attempt {
        let mut req = self
            .client
            .post(self.cfg.endpoint())
            .json(&self.request_body(prompt));
        if let Some(Secret(t)) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(GatewayError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let body = resp.text().unwrap_or_default();
        match status {
            200..=299 => match parse_completion(&body, self.cfg.request_logprobs) {
                Ok(c) => Attempt::Done(c),
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(GatewayError::Auth(format!(
                "status {status}: {}",
                excerpt(&body)
            ))),
            429 => Attempt::Retry(GatewayError::RateLimited { attempts: attempt }),
            500..=599 => Attempt::Retry(GatewayError::Provider {
                status,
                body: excerpt(&body),
            }),
            _ => Attempt::Fatal(GatewayError::Provider {
                status,
                body: excerpt(&body),
            }),
        }
    }
}

impl Transport for HttpTransport {
    fn complete(&self, prompt: &str) -> Result<RawCompletion> {
        let max = self.cfg.retry.max_attempts;
        let mut attempt = 1;
        loop {
            self.bucket.acquire();
            match self.attempt(prompt, attempt) {
                Attempt::Done(mut c) => {
                    c.provider_meta
                        .insert("attempts".into(), Value::from(attempt));
                    return Ok(c);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) if attempt >= max => {
                    return Err(match e {
                        GatewayError::RateLimited { .. } => {
                            GatewayError::RateLimited { attempts: attempt }
                        }
                        GatewayError::Transport { message, .. } => GatewayError::Transport {
                            attempts: attempt,
                            message,
                        },
                        other => other,
                    })
                }
                Attempt::Retry(_) => {
                    std::thread::sleep(self.cfg.retry.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

/// Hex SHA-256 over an unambiguous encoding of the request identity.
pub fn cache_key(
    model_name: &str,
    temperature: f64,
    request_logprobs: bool,
    prompt: &str,
) -> String {
    let encoded =
        serde_json::to_vec(&(model_name, temperature.to_bits(), request_logprobs, prompt))
            .expect("tuple serializes");
    hex::encode(Sha256::digest(encoded))
}

fn checksum(c: &RawCompletion) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(c).expect("completion serializes"),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    completion: RawCompletion,
    checksum: String,
}

/// Append-only JSONL store of completions keyed by [`cache_key`].
///
/// Lines that fail to parse or whose checksum disagrees are moved to
/// `<path>.quarantine` when the cache is opened; the first lookup of such a
/// key reports [`GatewayError::CacheCorrupt`].
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, RawCompletion>>,
    corrupt: Mutex<HashMap<String, ()>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        let mut corrupt = HashMap::new();
        let mut good_lines = Vec::new();
        let mut bad_lines = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(e) if checksum(&e.completion) == e.checksum => {
                        entries.insert(e.key, e.completion);
                        good_lines.push(line);
                    }
                    _ => {
                        let key = serde_json::from_str::<Value>(&line)
                            .ok()
                            .and_then(|v| v.get("key").and_then(Value::as_str).map(str::to_string));
                        if let Some(k) = key {
                            corrupt.insert(k, ());
                        }
                        bad_lines.push(line);
                    }
                }
            }
        }
        if !bad_lines.is_empty() {
            let mut q = OpenOptions::new()
                .create(true)
                .append(true)
                .open(quarantine_path(&path))?;
            for l in &bad_lines {
                writeln!(q, "{l}")?;
            }
            q.sync_all()?;
            let tmp = path.with_extension("rewrite");
            let mut f = File::create(&tmp)?;
            for l in &good_lines {
                writeln!(f, "{l}")?;
            }
            f.sync_all()?;
            std::fs::rename(&tmp, &path)?;
        }
        for k in entries.keys() {
            corrupt.remove(k);
        }
        let writer = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            corrupt: Mutex::new(corrupt),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Result<Option<RawCompletion>> {
        if self.corrupt.lock().unwrap().remove(key).is_some() {
            return Err(GatewayError::CacheCorrupt(key.to_string()));
        }
        Ok(self.entries.read().unwrap().get(key).cloned())
    }

    pub fn put(&self, key: &str, completion: &RawCompletion) -> Result<()> {
        let line = serde_json::to_string(&CacheLine {
            key: key.to_string(),
            completion: completion.clone(),
            checksum: checksum(completion),
        })
        .expect("cache line serializes");
        {
            let mut w = self.writer.lock().unwrap();
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), completion.clone());
        Ok(())
    }
}

pub fn quarantine_path(cache: &Path) -> PathBuf {
    let mut s = cache.as_os_str().to_owned();
    s.push(".quarantine");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Hit,
    Miss,
}

/// Cache lookup, falling through to `transport` on a miss and persisting the
/// result before returning it.
pub fn cached_complete(
    prompt: &str,
    cfg: &ModelEndpointConfig,
    cache: &ResponseCache,
    transport: &dyn Transport,
) -> Result<(RawCompletion, CacheStatus)> {
    let key = cache_key(
        &cfg.model_name,
        cfg.temperature,
        cfg.request_logprobs,
        prompt,
    );
    if let Some(hit) = cache.get(&key)? {
        return Ok((hit, CacheStatus::Hit));
    }
    let fresh = transport.complete(prompt)?;
    cache.put(&key, &fresh)?;
    Ok((fresh, CacheStatus::Miss))
}

/// How the synthetic agent decides to abstain given its confidence `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentPolicy {
    /// Abstain iff `p < tau`.
    BayesThreshold {
        tau: f64,
    },
    AlwaysAnswer,
    /// Answers everything below `c` and abstains at or above it.
    NeverAbstainBelow {
        c: f64,
    },
}

impl AgentPolicy {
    pub fn abstains(&self, p: f64) -> bool {
        match *self {
            AgentPolicy::BayesThreshold { tau } => p < tau,
            AgentPolicy::AlwaysAnswer => false,
            AgentPolicy::NeverAbstainBelow { c } => p >= c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgentConfig {
    /// Probability that the agent's candidate answer is right, per question id.
    #[serde(default)]
    pub knowledge: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_q_true: Option<f64>,
    #[serde(default)]
    pub confidence_noise: f64,
    pub policy: AgentPolicy,
    pub seed: u64,
    /// Emit per-token logprobs on the answer tokens.
    #[serde(default)]
    pub emit_logprobs: bool,
}

impl SyntheticAgentConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if let Some((id, _)) = self.knowledge.iter().find(|(_, &q)| !in_unit(q)) {
            return Err(GatewayError::Config(format!(
                "q_true for {id} outside [0, 1]"
            )));
        }
        if self.default_q_true.is_some_and(|q| !in_unit(q)) {
            return Err(GatewayError::Config("default_q_true outside [0, 1]".into()));
        }
        if !(self.confidence_noise >= 0.0 && self.confidence_noise.is_finite()) {
            return Err(GatewayError::Config(
                "confidence_noise must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn q_true(&self, id: &str) -> Result<f64> {
        self.knowledge
            .get(id)
            .copied()
            .or(self.default_q_true)
            .ok_or_else(|| GatewayError::UnknownQuestion(id.to_string()))
    }
}

fn agent_rng(seed: u64, id: &str, scheme: &RewardConfig) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((id.len() as u64).to_le_bytes());
    h.update(id.as_bytes());
    h.update(serde_json::to_vec(scheme).expect("scheme serializes"));
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn wrong_answer<R: Rng>(rng: &mut R, references: &[String]) -> String {
    loop {
        let len = rng.gen_range(6..=10);
        let word: String = (0..len)
            .map(|_| rng.gen_range(b'a'..=b'z') as char)
            .collect();
        if !match_answer(&word, references).unwrap_or(true) {
            return word;
        }
    }
}

/// Splits text into tokens that concatenate back to it: each token is a run
/// of non-whitespace followed by its trailing whitespace.
fn pseudo_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_space = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_space = true;
        } else if in_space {
            out.push(&text[start..i]);
            start = i;
            in_space = false;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Deterministic response for `q` under `scheme`, parseable by the response parser.
///
/// Correctness is Bernoulli(`q_true`); the stated confidence is
/// `clamp(q_true + σ·N(0, 1))`. Under Pure Eval the agent answers without a
/// confidence.
pub fn synthetic_complete(
    q: &QuestionRecord,
    cfg: &SyntheticAgentConfig,
    scheme: &RewardConfig,
) -> Result<RawCompletion> {
    let q_true = cfg.q_true(&q.id)?;
    let mut rng = agent_rng(cfg.seed, &q.id, scheme);
    let correct = rng.gen::<f64>() < q_true;
    let z: f64 = StandardNormal.sample(&mut rng);
    let p = (q_true + cfg.confidence_noise * z).clamp(0.0, 1.0);
    let z2: f64 = StandardNormal.sample(&mut rng);
    let token_p = (q_true + cfg.confidence_noise * z2).clamp(1e-6, 1.0);
    let wrong = wrong_answer(&mut rng, &q.references);
    let answer = if correct {
        q.references[0].clone()
    } else {
        wrong
    };

    let first_round = match scheme.scheme {
        Scheme::PureEval => FirstRound::Answered {
            answer: answer.clone(),
            confidence: None,
        },
        _ if cfg.policy.abstains(p) => FirstRound::Abstained {
            best_guess: Some(answer.clone()),
            best_guess_confidence: Some(p),
        },
        _ => FirstRound::Answered {
            answer: answer.clone(),
            confidence: Some(p),
        },
    };
    let text = format_response(&first_round);

    let mut meta = BTreeMap::new();
    meta.insert("synthetic".into(), Value::Bool(true));
    let token_logprobs = cfg.emit_logprobs.then(|| {
        let answer_field = match first_round {
            FirstRound::Abstained { .. } => "Best Guess:",
            _ => "Answer:",
        };
        let span_start = text
            .find(answer_field)
            .map(|i| i + answer_field.len())
            .unwrap_or(0);
        let span = span_start
            ..span_start
                + text[span_start..]
                    .find('\n')
                    .unwrap_or(text.len() - span_start);
        let mut offset = 0;
        pseudo_tokens(&text)
            .into_iter()
            .map(|t| {
                let range = offset..offset + t.len();
                offset += t.len();
                let in_answer =
                    range.start < span.end && span.start < range.end && !t.trim().ends_with(':');
                TokenLogprob {
                    token: t.to_string(),
                    logprob: if in_answer { token_p.ln() } else { 0.0 },
                }
            })
            .collect()
    });
    Ok(RawCompletion {
        text,
        token_logprobs,
        provider_meta: meta,
    })
}

/// `n` questions `syn-00001 …` with one reference each and log-normal popularity.
pub fn synthetic_question_set(n: usize, seed: u64) -> QuestionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop: LogNormal<f64> = LogNormal::new(6.0, 2.0).expect("valid parameters");
    let width = n.to_string().len().max(5);
    let records = (1..=n)
        .map(|i| {
            QuestionRecord::new(
                format!("syn-{i:0width$}"),
                format!("What is the answer to synthetic question {i}?"),
                [format!("answer {i}")],
            )
            .expect("nonempty reference")
            .with_popularity(pop.sample(&mut rng).round())
        })
        .collect();
    QuestionSet::new(records, format!("synthetic:{n}:{seed}")).expect("unique ids")
}

/// `q_true ~ Uniform(0, 1)` independently per question.
pub fn uniform_knowledge(set: &QuestionSet, seed: u64) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    set.records()
        .iter()
        .map(|r| (r.id.clone(), rng.gen::<f64>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{evaluated_answer, parse_response, Channel};
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn q(id: &str) -> QuestionRecord {
        QuestionRecord::new(id, "Capital of France?", ["Paris"]).unwrap()
    }

    fn agent(q_true: f64, policy: AgentPolicy) -> SyntheticAgentConfig {
        SyntheticAgentConfig {
            knowledge: BTreeMap::new(),
            default_q_true: Some(q_true),
            confidence_noise: 0.0,
            policy,
            seed: 11,
            emit_logprobs: false,
        }
    }

    const B: fn() -> RewardConfig = || RewardConfig::scheme_b(1.0, 1.0, 0.4);

    #[test]
    fn synthetic_answers_above_threshold() {
        let c = synthetic_complete(
            &q("1"),
            &agent(0.9, AgentPolicy::BayesThreshold { tau: 0.7 }),
            &B(),
        )
        .unwrap();
        let p = parse_response(&c.text);
        match p.first_round {
            FirstRound::Answered { confidence, .. } => assert_eq!(confidence, Some(0.9)),
            other => panic!("{other:?}"),
        }
        assert!(c.text.contains("Confidence: 0.9000"));
    }

    #[test]
    fn synthetic_abstains_below_threshold() {
        let c = synthetic_complete(
            &q("1"),
            &agent(0.2, AgentPolicy::BayesThreshold { tau: 0.7 }),
            &B(),
        )
        .unwrap();
        assert!(c.text.starts_with("Answer: I don't know"));
        assert!(c.text.ends_with("Best Guess Confidence: 0.2000"));
        let e = evaluated_answer(&parse_response(&c.text));
        assert_eq!(e.channel, Channel::BestGuess);
        assert_eq!(e.confidence, Some(0.2));
    }

    #[test]
    fn zero_threshold_never_abstains() {
        for i in 0..50 {
            let qt = i as f64 / 49.0;
            let c = synthetic_complete(
                &q("x"),
                &agent(qt, AgentPolicy::BayesThreshold { tau: 0.0 }),
                &B(),
            )
            .unwrap();
            assert!(!c.text.contains("I don't know"));
        }
    }

    #[test]
    fn inverted_policy() {
        let p = AgentPolicy::NeverAbstainBelow { c: 0.8 };
        assert!(!p.abstains(0.5));
        assert!(p.abstains(0.8));
        assert!(!AgentPolicy::AlwaysAnswer.abstains(0.0));
    }

    #[test]
    fn pure_eval_has_no_confidence() {
        let c = synthetic_complete(
            &q("1"),
            &agent(0.1, AgentPolicy::BayesThreshold { tau: 0.7 }),
            &RewardConfig::pure_eval(),
        )
        .unwrap();
        match parse_response(&c.text).first_round {
            FirstRound::Answered { confidence, .. } => assert_eq!(confidence, None),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_scheme_sensitive() {
        let mut cfg = agent(0.5, AgentPolicy::AlwaysAnswer);
        cfg.confidence_noise = 0.2;
        cfg.emit_logprobs = true;
        let a = synthetic_complete(&q("7"), &cfg, &B()).unwrap();
        assert_eq!(a, synthetic_complete(&q("7"), &cfg, &B()).unwrap());
        let texts: std::collections::BTreeSet<_> = (0..20)
            .map(|i| {
                synthetic_complete(&q(&i.to_string()), &cfg, &B())
                    .unwrap()
                    .text
            })
            .collect();
        assert!(texts.len() > 10);
        let joined: String = a
            .token_logprobs
            .as_ref()
            .unwrap()
            .iter()
            .map(|t| t.token.as_str())
            .collect();
        assert_eq!(joined, a.text);
    }

    #[test]
    fn unknown_question() {
        let mut cfg = agent(0.5, AgentPolicy::AlwaysAnswer);
        cfg.default_q_true = None;
        assert!(matches!(
            synthetic_complete(&q("z"), &cfg, &B()),
            Err(GatewayError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn wrong_answers_never_match() {
        let cfg = agent(0.0, AgentPolicy::AlwaysAnswer);
        let set = synthetic_question_set(200, 1);
        for r in set.records() {
            let c = synthetic_complete(r, &cfg, &B()).unwrap();
            let e = evaluated_answer(&parse_response(&c.text));
            assert!(!match_answer(e.answer.as_deref().unwrap(), &r.references).unwrap());
        }
    }

    #[test]
    fn cache_keys_distinguish_fields() {
        let k = cache_key("m", 0.0, true, "p");
        assert_eq!(k.len(), 64);
        assert_ne!(k, cache_key("m2", 0.0, true, "p"));
        assert_ne!(k, cache_key("m", 0.5, true, "p"));
        assert_ne!(k, cache_key("m", 0.0, false, "p"));
        assert_ne!(k, cache_key("m", 0.0, true, "p "));
        assert_eq!(k, cache_key("m", 0.0, true, "p"));
    }

    struct Counting(AtomicUsize);

    impl Transport for Counting {
        fn complete(&self, prompt: &str) -> Result<RawCompletion> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(RawCompletion::text_only(format!(
                "Answer: {}",
                prompt.len()
            )))
        }
    }

    #[test]
    fn cache_hit_skips_transport() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cfg = ModelEndpointConfig::new("http://localhost", "m");
        let t = Counting(AtomicUsize::new(0));
        let cache = ResponseCache::open(&path).unwrap();
        let (a, s1) = cached_complete("hello", &cfg, &cache, &t).unwrap();
        let (b, s2) = cached_complete("hello", &cfg, &cache, &t).unwrap();
        assert_eq!(
            (a.clone(), s1, s2),
            (b, CacheStatus::Miss, CacheStatus::Hit)
        );
        assert_eq!(t.0.load(Ordering::SeqCst), 1);
        drop(cache);
        let reopened = ResponseCache::open(&path).unwrap();
        assert_eq!(cached_complete("hello", &cfg, &reopened, &t).unwrap().0, a);
        assert_eq!(t.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn corrupt_entry_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cfg = ModelEndpointConfig::new("http://localhost", "m");
        let t = Counting(AtomicUsize::new(0));
        {
            let cache = ResponseCache::open(&path).unwrap();
            cached_complete("a", &cfg, &cache, &t).unwrap();
            cached_complete("bb", &cfg, &cache, &t).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("Answer: 1", "Answer: 9", 1)).unwrap();
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        let err = cached_complete("a", &cfg, &cache, &t).unwrap_err();
        assert!(
            matches!(err, GatewayError::CacheCorrupt(k) if k == cache_key("m", 0.0, true, "a"))
        );
        assert_eq!(
            std::fs::read_to_string(quarantine_path(&path))
                .unwrap()
                .lines()
                .count(),
            1
        );
        // the next lookup is a clean miss
        assert_eq!(
            cached_complete("a", &cfg, &cache, &t).unwrap().1,
            CacheStatus::Miss
        );
    }

    /// Serves canned `(status, body)` responses in order, then repeats the last.
    fn mock_server(
        responses: Vec<(u16, String)>,
    ) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let request = read_request(&mut stream);
                b.lock().unwrap().push(request);
                let i = h.fetch_add(1, Ordering::SeqCst);
                let (status, body) = &responses[i.min(responses.len() - 1)];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), hits, bodies)
    }

    fn read_request(stream: &mut std::net::TcpStream) -> String {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        loop {
            let n = stream.read(&mut chunk).unwrap();
            buf.extend_from_slice(&chunk[..n]);
            let text = String::from_utf8_lossy(&buf).to_string();
            if let Some(end) = text.find("\r\n\r\n") {
                let len = text[..end]
                    .lines()
                    .find_map(|l| {
                        l.to_ascii_lowercase()
                            .strip_prefix("content-length:")
                            .map(|v| v.trim().parse::<usize>().unwrap())
                    })
                    .unwrap_or(0);
                if buf.len() >= end + 4 + len {
                    return text;
                }
            }
            if n == 0 {
                return text;
            }
        }
    }

    fn endpoint(url: String) -> ModelEndpointConfig {
        let mut cfg = ModelEndpointConfig::new(url, "test-model");
        cfg.retry = RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 1,
        };
        cfg.max_parallel = 100;
        cfg
    }

    const OK_BODY: &str = r#"{"id":"r1","choices":[{"message":{"content":"Answer: Paris\nConfidence: 0.9"},"logprobs":{"content":[{"token":"Answer","logprob":0.0},{"token":" Paris","logprob":-0.1}]}}],"usage":{"total_tokens":5}}"#;

    #[test]
    fn http_success_with_logprobs() {
        let (url, hits, bodies) = mock_server(vec![(200, OK_BODY.into())]);
        let t = HttpTransport::new(endpoint(url)).unwrap();
        let c = t.complete("Question?").unwrap();
        assert_eq!(c.text, "Answer: Paris\nConfidence: 0.9");
        assert_eq!(c.token_logprobs.as_ref().unwrap()[1].logprob, -0.1);
        assert_eq!(c.provider_meta["id"], "r1");
        assert_eq!(c.attempts(), 1);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let req = bodies.lock().unwrap()[0].clone();
        assert!(req.starts_with("POST /v1/chat/completions"));
        assert!(req.contains(r#""temperature":0.0"#));
        assert!(req.contains(r#""logprobs":true"#));
    }

    #[test]
    fn http_missing_logprobs_flagged() {
        let body = r#"{"choices":[{"message":{"content":"Answer: x"}}]}"#;
        let (url, _, _) = mock_server(vec![(200, body.into())]);
        let c = HttpTransport::new(endpoint(url))
            .unwrap()
            .complete("q")
            .unwrap();
        assert!(c.token_logprobs.is_none());
        assert_eq!(c.provider_meta["logprobs_missing"], true);
    }

    #[test]
    fn http_rate_limit_exhausts() {
        let (url, hits, _) = mock_server(vec![(429, "{}".into())]);
        let err = HttpTransport::new(endpoint(url))
            .unwrap()
            .complete("q")
            .unwrap_err();
        assert!(matches!(err, GatewayError::RateLimited { attempts: 3 }));
        assert!(err.is_exhaustion());
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_recovers_after_server_errors() {
        let (url, hits, _) = mock_server(vec![
            (503, "busy".into()),
            (500, "oops".into()),
            (200, OK_BODY.into()),
        ]);
        let c = HttpTransport::new(endpoint(url))
            .unwrap()
            .complete("q")
            .unwrap();
        assert_eq!(c.attempts(), 3);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_auth_and_client_errors_are_not_retried() {
        let (url, hits, _) = mock_server(vec![(401, "nope".into())]);
        assert!(matches!(
            HttpTransport::new(endpoint(url)).unwrap().complete("q"),
            Err(GatewayError::Auth(_))
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let (url, _, _) = mock_server(vec![(400, "bad request".into())]);
        assert!(matches!(
            HttpTransport::new(endpoint(url)).unwrap().complete("q"),
            Err(GatewayError::Provider { status: 400, .. })
        ));
    }

    #[test]
    fn token_comes_from_environment_and_is_redacted() {
        let (url, _, bodies) = mock_server(vec![(200, OK_BODY.into())]);
        let mut cfg = endpoint(url);
        cfg.auth_token_env = Some("ABSTAIN_TEST_TOKEN_PRESENT".into());
        std::env::set_var("ABSTAIN_TEST_TOKEN_PRESENT", "s3cret-value");
        let t = HttpTransport::new(cfg.clone()).unwrap();
        assert!(!format!("{t:?}").contains("s3cret-value"));
        assert!(!serde_json::to_string(&cfg)
            .unwrap()
            .contains("s3cret-value"));
        t.complete("q").unwrap();
        assert!(bodies.lock().unwrap()[0].contains("Bearer s3cret-value"));

        cfg.auth_token_env = Some("ABSTAIN_TEST_TOKEN_ABSENT".into());
        assert!(matches!(
            HttpTransport::new(cfg),
            Err(GatewayError::Auth(_))
        ));
    }

    #[test]
    fn connection_refused_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let err = HttpTransport::new(endpoint(format!("http://127.0.0.1:{port}")))
            .unwrap()
            .complete("q")
            .unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }));
    }

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 100,
        };
        assert_eq!(
            (1..=3)
                .map(|a| r.backoff(a).as_millis())
                .collect::<Vec<_>>(),
            vec![100, 200, 400]
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ModelEndpointConfig::new("http://x", "m");
        assert!(c.validate().is_ok());
        c.max_parallel = 0;
        assert!(c.validate().is_err());
        assert!(ModelEndpointConfig::new("ftp://x", "m").validate().is_err());
    }
}
