//! Client for OpenAI-compatible chat-completion endpoints: retrying
//! requests, few-shot example selection, the model-assisted preprocessing
//! steps (document summaries, descriptive QA options), and benchmark runs
//! with bounded concurrency. [`MockServer`] speaks the same wire protocol
//! in-process for tests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Summarizer;
use crate::metrics::{evaluate_dataset, EvalReport, MetricError};
use crate::parse::{parse_for_layout, PredictionRecord};
use crate::prompt::{ner_fewshot_preamble, render, Layout, PromptError, RenderOptions};
use crate::rng::{derive_seed, SplitMix64};
use crate::types::{NluInstance, OutputCategory, PromptPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 250 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Base URL such as `http://host:8000/v1`, or the full
    /// `.../chat/completions` URL.
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Environment variable holding the bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env_var: Option<String>,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> u64 {
    120_000
}

impl InferenceConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            max_concurrent_requests: default_concurrency(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout(),
            api_key_env_var: None,
        }
    }

    pub fn validate(&self) -> Result<(), InferError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(InferError::InvalidConfig("temperature must be non-negative".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(InferError::InvalidConfig("max_concurrent_requests must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(InferError::InvalidConfig("retry.max_attempts must be at least 1".into()));
        }
        if self.endpoint_url.is_empty() {
            return Err(InferError::InvalidConfig("endpoint_url is empty".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.endpoint_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected credentials (HTTP {status})")]
    AuthRejected { status: u16 },
    #[error("endpoint rejected request (HTTP {status}): {body}")]
    ClientError { status: u16, body: String },
    #[error("malformed response: {0}")]
    ResponseMalformed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error("cannot pick {k} examples with distinct outputs ({distinct} distinct available)")]
    CannotSatisfyDistinctness { k: usize, distinct: usize },
    #[error("few-shot pool has {available} candidates, {k} requested")]
    PoolTooSmall { k: usize, available: usize },
    #[error("instance `{id}`: {source}")]
    Render {
        id: String,
        #[source]
        source: PromptError,
    },
    #[error("scoring dataset `{dataset}`: {source}")]
    Metric {
        dataset: String,
        #[source]
        source: MetricError,
    },
}

/// Assistant text plus request bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    /// The endpoint stopped at the output-token limit.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    cfg: InferenceConfig,
    url: String,
    api_key: Option<String>,
}

impl ChatClient {
    pub fn new(cfg: InferenceConfig) -> Result<Self, InferError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| InferError::InvalidConfig(e.to_string()))?;
        let api_key = match &cfg.api_key_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                InferError::InvalidConfig(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(Self { http, url: cfg.completions_url(), cfg, api_key })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        })
    }

    /// Sends one user message. Transport errors and 5xx responses are
    /// retried with exponential backoff; 4xx responses are not.
    pub async fn complete(&self, prompt: &str) -> Result<Completion, InferError> {
        if prompt.is_empty() {
            return Err(InferError::InvalidArgument("empty prompt".into()));
        }
        let body = self.request_body(prompt);
        let max = self.cfg.retry.max_attempts;
        let mut last = String::new();
        for attempt in 1..=max {
            let mut req = self.http.post(&self.url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let v: Value = resp
                            .json()
                            .await
                            .map_err(|e| InferError::ResponseMalformed(e.to_string()))?;
                        return extract_completion(&v, attempt);
                    }
                    let code = status.as_u16();
                    let text = resp.text().await.unwrap_or_default();
                    if code == 401 || code == 403 {
                        return Err(InferError::AuthRejected { status: code });
                    }
                    if status.is_client_error() {
                        return Err(InferError::ClientError { status: code, body: text });
                    }
                    last = format!("HTTP {code}: {text}");
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < max {
                let wait = self.cfg.retry.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::debug!("attempt {attempt} failed ({last}); retrying in {wait} ms");
                tokio::time::sleep(Duration::from_millis(wait)).await;
            }
        }
        Err(InferError::Transport { attempts: max, message: last })
    }
}

fn extract_completion(v: &Value, attempts: u32) -> Result<Completion, InferError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| InferError::ResponseMalformed("no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| InferError::ResponseMalformed("choices[0].message.content missing".into()))?;
    let truncated = choice.get("finish_reason").and_then(Value::as_str) == Some("length");
    Ok(Completion { text: text.to_string(), attempts, truncated })
}

/// One-off completion with a fresh client.
pub async fn chat_complete(prompt: &str, cfg: &InferenceConfig) -> Result<String, InferError> {
    Ok(ChatClient::new(cfg.clone())?.complete(prompt).await?.text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPolicy {
    pub k: usize,
    pub seed: u64,
    pub require_distinct_outputs: bool,
    /// Resampling rounds before giving up on distinct outputs.
    pub max_attempts: usize,
    pub pool: Vec<PromptPair>,
}

impl FewShotPolicy {
    pub fn new(pool: Vec<PromptPair>, seed: u64) -> Self {
        Self { k: 2, seed, require_distinct_outputs: true, max_attempts: 1000, pool }
    }
}

/// Draws `k` pool examples (never the query itself) uniformly without
/// replacement, reproducibly per `(seed, query_id)`. With distinct outputs
/// required, draws are repeated until the gold outputs differ pairwise.
pub fn select_fewshot(policy: &FewShotPolicy, query_id: &str) -> Result<Vec<PromptPair>, InferError> {
    let candidates: Vec<&PromptPair> = policy.pool.iter().filter(|p| p.instance_id != query_id).collect();
    let k = policy.k;
    if candidates.len() < k {
        return Err(InferError::PoolTooSmall { k, available: candidates.len() });
    }
    let distinct = candidates.iter().map(|p| p.output.as_str()).collect::<BTreeSet<_>>().len();
    if policy.require_distinct_outputs && distinct < k {
        return Err(InferError::CannotSatisfyDistinctness { k, distinct });
    }
    let mut rng = SplitMix64::new(derive_seed(policy.seed, &[b"fewshot", query_id.as_bytes()]));
    for _ in 0..policy.max_attempts.max(1) {
        let picks: Vec<&PromptPair> =
            rng.sample_indices(candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
        let outputs: BTreeSet<&str> = picks.iter().map(|p| p.output.as_str()).collect();
        if !policy.require_distinct_outputs || outputs.len() == k {
            return Ok(picks.into_iter().cloned().collect());
        }
    }
    Err(InferError::CannotSatisfyDistinctness { k, distinct })
}

/// Output-format preamble, then each example's input and output, then the
/// query, separated by blank lines.
pub fn fewshot_prompt(examples: &[PromptPair], query_input: &str) -> String {
    let mut parts = vec![ner_fewshot_preamble().to_string()];
    for ex in examples {
        parts.push(ex.input.clone());
        parts.push(ex.output.clone());
    }
    parts.push(query_input.to_string());
    parts.join("\n\n")
}

pub fn summary_prompt(type_label: &str, note: &str) -> String {
    format!("Summarize the {type_label} from the following clinical note.\n\n{note}")
}

/// Summarizes a long clinical note with respect to one classification type.
pub async fn summarize_document(client: &ChatClient, note: &str, type_label: &str) -> Result<String, InferError> {
    if type_label.trim().is_empty() {
        return Err(InferError::InvalidArgument("empty summary type".into()));
    }
    if note.trim().is_empty() {
        return Err(InferError::InvalidArgument("empty note".into()));
    }
    Ok(client.complete(&summary_prompt(type_label, note)).await?.text)
}

/// Input used to ask for one descriptive QA option; the one-shot exemplar
/// passed to [`describe_qa_options`] should be built the same way.
pub fn qa_statement_input(question: &str, answer: &str) -> String {
    format!(
        "Combine the question and the answer into a single statement.\n\nQuestion: {}\n\nAnswer: {}",
        question.trim(),
        answer.trim()
    )
}

/// Turns single-word answers into descriptive options, each ending with
/// the original answer in parentheses.
pub async fn describe_qa_options(
    client: &ChatClient,
    question: &str,
    answers: &[String],
    one_shot: &PromptPair,
) -> Result<Vec<String>, InferError> {
    if answers.is_empty() {
        return Err(InferError::InvalidArgument("no answers".into()));
    }
    if question.trim().is_empty() {
        return Err(InferError::InvalidArgument("empty question".into()));
    }
    let mut out = Vec::with_capacity(answers.len());
    for answer in answers {
        let prompt = format!(
            "{}\n\n{}\n\n{}",
            one_shot.input,
            one_shot.output,
            qa_statement_input(question, answer)
        );
        let text = client.complete(&prompt).await?.text;
        out.push(describe_option(&text, answer));
    }
    Ok(out)
}

/// `statement` with its final period replaced by ` (answer).`
pub fn describe_option(statement: &str, answer: &str) -> String {
    let line = statement.trim().lines().next().unwrap_or_default().trim();
    format!("{} ({}).", line.trim_end_matches('.').trim_end(), answer.trim())
}

/// Blocking adapter so corpus assembly can summarize through a client.
pub struct BlockingSummarizer {
    runtime: tokio::runtime::Runtime,
    client: ChatClient,
}

impl BlockingSummarizer {
    pub fn new(client: ChatClient) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        Ok(Self { runtime, client })
    }
}

impl Summarizer for BlockingSummarizer {
    fn summarize(&self, note: &str, type_label: &str) -> Result<String, String> {
        self.runtime
            .block_on(summarize_document(&self.client, note, type_label))
            .map_err(|e| e.to_string())
    }
}

/// Few-shot setup for benchmark runs. Examples for a query are drawn from
/// pool instances of the same dataset; only token-classification tasks
/// use them.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSetup {
    pub k: usize,
    pub seed: u64,
    pub require_distinct_outputs: bool,
    pub max_attempts: usize,
    pub pool: Vec<NluInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLogEntry {
    pub instance_id: String,
    pub dataset: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub k: usize,
    pub seed: u64,
    pub require_distinct_outputs: bool,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_concurrent_requests: usize,
    pub render: RenderOptions,
    pub fewshot: Option<FewShotSummary>,
    pub n_instances: usize,
    pub n_completed: usize,
    pub n_failed: usize,
    pub coverage: f64,
    pub n_unscoreable: usize,
    /// Instances whose completion hit the output-token limit.
    pub truncated: Vec<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    /// In input order.
    pub predictions: Vec<PredictionRecord>,
    pub prompts: Vec<PromptLogEntry>,
    /// One per dataset, sorted by dataset name.
    pub reports: Vec<EvalReport>,
    pub manifest: RunManifest,
}

impl BenchmarkRun {
    pub fn is_partial(&self) -> bool {
        self.manifest.n_failed > 0
    }
}

/// Digest of every client-side setting that affects prompts or requests.
pub fn config_hash(cfg: &InferenceConfig, render: &RenderOptions, fewshot: Option<&FewShotSummary>) -> String {
    let v = json!({ "inference": cfg, "render": render, "fewshot": fewshot });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn build_prompts(
    instances: &[NluInstance],
    fewshot: Option<&FewShotSetup>,
    opts: &RenderOptions,
) -> Result<Vec<(String, Layout)>, InferError> {
    let mut policies: BTreeMap<&str, FewShotPolicy> = BTreeMap::new();
    if let Some(fs) = fewshot {
        for inst in &fs.pool {
            if inst.task.output_category() != OutputCategory::TokenClassification {
                continue;
            }
            let r = render(inst, opts).map_err(|source| InferError::Render { id: inst.id.clone(), source })?;
            policies
                .entry(inst.dataset.as_str())
                .or_insert_with(|| FewShotPolicy {
                    k: fs.k,
                    seed: fs.seed,
                    require_distinct_outputs: fs.require_distinct_outputs,
                    max_attempts: fs.max_attempts,
                    pool: Vec::new(),
                })
                .pool
                .push(r.pair);
        }
    }
    instances
        .iter()
        .map(|inst| {
            let r = render(inst, opts).map_err(|source| InferError::Render { id: inst.id.clone(), source })?;
            let token = inst.task.output_category() == OutputCategory::TokenClassification;
            let prompt = match fewshot {
                Some(fs) if token && fs.k > 0 => {
                    let empty = FewShotPolicy {
                        k: fs.k,
                        seed: fs.seed,
                        require_distinct_outputs: fs.require_distinct_outputs,
                        max_attempts: fs.max_attempts,
                        pool: Vec::new(),
                    };
                    let policy = policies.get(inst.dataset.as_str()).unwrap_or(&empty);
                    fewshot_prompt(&select_fewshot(policy, &inst.id)?, &r.pair.input)
                }
                _ => r.pair.input,
            };
            Ok((prompt, r.layout))
        })
        .collect()
}

/// Renders, dispatches, parses and scores a benchmark pass. Remote
/// failures are recorded per instance and the run still completes.
pub async fn run_benchmark(
    instances: &[NluInstance],
    client: &ChatClient,
    fewshot: Option<&FewShotSetup>,
    opts: &RenderOptions,
) -> Result<BenchmarkRun, InferError> {
    let started = Instant::now();
    let prompts = build_prompts(instances, fewshot, opts)?;
    let limit = client.config().max_concurrent_requests;

    let mut results: Vec<(usize, Result<Completion, InferError>)> = stream::iter(prompts.iter().enumerate())
        .map(|(i, (prompt, _))| async move { (i, client.complete(prompt).await) })
        .buffer_unordered(limit)
        .collect()
        .await;
    results.sort_by_key(|(i, _)| *i);

    let mut predictions = Vec::with_capacity(instances.len());
    let mut log = Vec::with_capacity(instances.len());
    let mut truncated = Vec::new();
    let mut n_failed = 0;
    for ((inst, (prompt, layout)), (_, result)) in instances.iter().zip(&prompts).zip(results) {
        let mut entry = PromptLogEntry {
            instance_id: inst.id.clone(),
            dataset: inst.dataset.clone(),
            prompt: prompt.clone(),
            completion: None,
            attempts: 0,
            error: None,
        };
        let record = match result {
            Ok(c) => {
                if c.truncated {
                    truncated.push(inst.id.clone());
                }
                entry.attempts = c.attempts;
                let rec = parse_for_layout(&inst.id, &c.text, layout, &inst.source_text);
                entry.completion = Some(c.text);
                rec
            }
            Err(e) => {
                n_failed += 1;
                if let InferError::Transport { attempts, .. } = &e {
                    entry.attempts = *attempts;
                }
                entry.error = Some(e.to_string());
                PredictionRecord {
                    instance_id: inst.id.clone(),
                    error: Some(format!("request failed: {e}")),
                    ..Default::default()
                }
            }
        };
        predictions.push(record);
        log.push(entry);
    }

    let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_dataset.entry(inst.dataset.as_str()).or_default().push(i);
    }
    let mut reports = Vec::with_capacity(by_dataset.len());
    for (dataset, idx) in by_dataset {
        let items: Vec<(&NluInstance, &Layout, &PredictionRecord)> =
            idx.iter().map(|&i| (&instances[i], &prompts[i].1, &predictions[i])).collect();
        let report = evaluate_dataset(&items)
            .map_err(|source| InferError::Metric { dataset: dataset.to_string(), source })?;
        reports.push(report);
    }

    let cfg = client.config();
    let fewshot_summary = fewshot.map(|f| FewShotSummary {
        k: f.k,
        seed: f.seed,
        require_distinct_outputs: f.require_distinct_outputs,
        pool_size: f.pool.len(),
    });
    let n = instances.len();
    let manifest = RunManifest {
        config_hash: config_hash(cfg, opts, fewshot_summary.as_ref()),
        endpoint_url: cfg.endpoint_url.clone(),
        model_name: cfg.model_name.clone(),
        temperature: cfg.temperature,
        max_output_tokens: cfg.max_output_tokens,
        max_concurrent_requests: cfg.max_concurrent_requests,
        render: opts.clone(),
        fewshot: fewshot_summary,
        n_instances: n,
        n_completed: n - n_failed,
        n_failed,
        coverage: if n == 0 { 1.0 } else { (n - n_failed) as f64 / n as f64 },
        n_unscoreable: predictions.iter().filter(|p| p.error.is_some()).count(),
        truncated,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok(BenchmarkRun { predictions, prompts: log, reports, manifest })
}

/// What the mock endpoint sends back for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    /// 200 with a well-formed completion.
    Text(String),
    /// 200 with a completion cut at the token limit.
    Truncated(String),
    /// Error status with a small JSON body.
    Status(u16),
    /// Arbitrary status and raw body.
    Raw(u16, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub body: Value,
    /// Content of the first user message, if present.
    pub prompt: Option<String>,
    pub authorization: Option<String>,
}

type ReplyFn = dyn Fn(&str) -> MockReply + Send + Sync;

struct MockState {
    reply: Box<ReplyFn>,
    script: Mutex<VecDeque<MockReply>>,
    delay: Duration,
    log: Mutex<Vec<RecordedRequest>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    /// Replies served in order before `reply` takes over.
    pub script: Vec<MockReply>,
    /// Held before answering each request.
    pub delay: Duration,
}

/// In-process chat-completion endpoint on its own thread and runtime.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    pub fn start<F>(reply: F) -> Self
    where
        F: Fn(&str) -> MockReply + Send + Sync + 'static,
    {
        Self::start_with(reply, MockOptions::default())
    }

    pub fn start_with<F>(reply: F, opts: MockOptions) -> Self
    where
        F: Fn(&str) -> MockReply + Send + Sync + 'static,
    {
        let state = Arc::new(MockState {
            reply: Box::new(reply),
            script: Mutex::new(opts.script.into()),
            delay: opts.delay,
            log: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        });
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let app_state = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("mock runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind mock");
                addr_tx.send(listener.local_addr().expect("mock addr")).expect("report addr");
                let app = axum::Router::new()
                    .route("/chat/completions", axum::routing::post(mock_handler))
                    .route("/v1/chat/completions", axum::routing::post(mock_handler))
                    .with_state(app_state);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock serve");
            });
        });
        let addr = addr_rx.recv().expect("mock server started");
        Self { addr, state, shutdown: Some(tx), thread: Some(thread) }
    }

    /// Base URL, e.g. `http://127.0.0.1:PORT/v1`.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().expect("mock log").clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.log.lock().expect("mock log").len()
    }

    /// Highest number of requests seen in flight at once.
    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

async fn mock_handler(
    axum::extract::State(state): axum::extract::State<Arc<MockState>>,
    headers: axum::http::HeaderMap,
    body: axum::body::Bytes,
) -> axum::response::Response {
    use axum::response::IntoResponse;

    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let prompt = body.pointer("/messages/0/content").and_then(Value::as_str).map(str::to_string);
    let authorization = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    state.log.lock().expect("mock log").push(RecordedRequest {
        body: body.clone(),
        prompt: prompt.clone(),
        authorization,
    });
    if !state.delay.is_zero() {
        tokio::time::sleep(state.delay).await;
    }
    let scripted = state.script.lock().expect("mock script").pop_front();
    let reply = scripted.unwrap_or_else(|| (state.reply)(prompt.as_deref().unwrap_or_default()));
    state.in_flight.fetch_sub(1, Ordering::SeqCst);

    let completion = |text: String, finish: &str| {
        axum::Json(json!({
            "id": "mock",
            "object": "chat.completion",
            "model": body.get("model").cloned().unwrap_or(Value::Null),
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": finish,
            }],
        }))
        .into_response()
    };
    let status = |code: u16| {
        axum::http::StatusCode::from_u16(code).unwrap_or(axum::http::StatusCode::INTERNAL_SERVER_ERROR)
    };
    match reply {
        MockReply::Text(t) => completion(t, "stop"),
        MockReply::Truncated(t) => completion(t, "length"),
        MockReply::Status(code) => {
            (status(code), axum::Json(json!({"error": {"message": "mock error", "code": code}}))).into_response()
        }
        MockReply::Raw(code, raw) => (status(code), raw).into_response(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, output: &str) -> PromptPair {
        PromptPair { instance_id: id.into(), input: format!("input {id}"), output: output.into() }
    }

    #[test]
    fn fewshot_selection() {
        let mut policy = FewShotPolicy::new(vec![pair("a", "x"), pair("b", "y"), pair("q", "z")], 5);
        let picked = select_fewshot(&policy, "q").unwrap();
        let ids: BTreeSet<_> = picked.iter().map(|p| p.instance_id.as_str()).collect();
        assert_eq!(ids, BTreeSet::from(["a", "b"]));
        assert_eq!(picked, select_fewshot(&policy, "q").unwrap());

        policy.pool = vec![pair("a", "None"), pair("b", "None"), pair("c", "None")];
        assert!(matches!(
            select_fewshot(&policy, "q"),
            Err(InferError::CannotSatisfyDistinctness { k: 2, distinct: 1 })
        ));
        policy.require_distinct_outputs = false;
        assert_eq!(select_fewshot(&policy, "q").unwrap().len(), 2);
        policy.pool.truncate(1);
        assert!(matches!(select_fewshot(&policy, "q"), Err(InferError::PoolTooSmall { .. })));
    }

    #[test]
    fn fewshot_layout() {
        let p = fewshot_prompt(&[pair("a", "Drug: x"), pair("b", "Drug: None")], "query");
        assert!(p.starts_with(ner_fewshot_preamble()));
        assert!(p.ends_with("\n\ninput a\n\nDrug: x\n\ninput b\n\nDrug: None\n\nquery"));
    }

    #[test]
    fn option_description() {
        assert_eq!(
            describe_option("There is a connection between sublingual varices and hypertension.", "yes"),
            "There is a connection between sublingual varices and hypertension (yes)."
        );
        assert_eq!(
            describe_option(" The answer is not mentioned in the text \n", "maybe"),
            "The answer is not mentioned in the text (maybe)."
        );
    }

    #[test]
    fn urls() {
        let mut c = InferenceConfig::new("http://h:1/v1/", "m");
        assert_eq!(c.completions_url(), "http://h:1/v1/chat/completions");
        c.endpoint_url = "http://h:1/v1/chat/completions".into();
        assert_eq!(c.completions_url(), "http://h:1/v1/chat/completions");
        c.max_concurrent_requests = 0;
        assert!(c.validate().is_err());
    }

    fn client(server: &MockServer, attempts: u32) -> ChatClient {
        let mut cfg = InferenceConfig::new(server.url(), "mock-model");
        cfg.retry = RetryPolicy { max_attempts: attempts, backoff_base_ms: 1 };
        ChatClient::new(cfg).unwrap()
    }

    #[tokio::test]
    async fn round_trip_and_wire_shape() {
        let server = MockServer::start(|_| MockReply::Text("(C) contradiction\n".into()));
        let c = client(&server, 3);
        let out = c.complete("hello").await.unwrap();
        assert_eq!(out, Completion { text: "(C) contradiction\n".into(), attempts: 1, truncated: false });
        let req = &server.requests()[0];
        assert_eq!(
            req.body,
            json!({"model": "mock-model", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.0, "max_tokens": 1024})
        );
    }

    #[tokio::test]
    async fn retry_classes() {
        let opts = MockOptions { script: vec![MockReply::Status(500), MockReply::Status(503)], ..Default::default() };
        let server = MockServer::start_with(|_| MockReply::Text("ok".into()), opts);
        let out = client(&server, 3).complete("p").await.unwrap();
        assert_eq!((out.text.as_str(), out.attempts), ("ok", 3));

        let server = MockServer::start(|_| MockReply::Status(401));
        assert!(matches!(client(&server, 3).complete("p").await, Err(InferError::AuthRejected { status: 401 })));
        assert_eq!(server.request_count(), 1);

        let server = MockServer::start(|_| MockReply::Status(400));
        assert!(matches!(client(&server, 3).complete("p").await, Err(InferError::ClientError { status: 400, .. })));
        assert_eq!(server.request_count(), 1);

        let server = MockServer::start(|_| MockReply::Status(502));
        assert!(matches!(client(&server, 2).complete("p").await, Err(InferError::Transport { attempts: 2, .. })));
        assert_eq!(server.request_count(), 2);

        let server = MockServer::start(|_| MockReply::Raw(200, "{\"choices\":[]}".into()));
        assert!(matches!(client(&server, 3).complete("p").await, Err(InferError::ResponseMalformed(_))));
    }

    #[tokio::test]
    async fn preprocessing_prompts() {
        let server = MockServer::start(|p| {
            if p.starts_with("Summarize") {
                MockReply::Text("Current smoker.".into())
            } else {
                MockReply::Text("There is a connection between sublingual varices and hypertension.".into())
            }
        });
        let c = client(&server, 1);
        let s = summarize_document(&c, "Pt smokes 1 ppd.", "smoking status").await.unwrap();
        assert_eq!(s, "Current smoker.");
        let sent = server.requests()[0].prompt.clone().unwrap();
        assert!(sent.starts_with("Summarize the smoking status from the following clinical note."));
        assert!(matches!(summarize_document(&c, "note", "").await, Err(InferError::InvalidArgument(_))));

        let shot = PromptPair {
            instance_id: "ex".into(),
            input: qa_statement_input("Is aspirin an NSAID?", "yes"),
            output: "Aspirin is an NSAID.".into(),
        };
        let q = "Is there a connection between sublingual varices and hypertension?";
        let opts = describe_qa_options(&c, q, &["yes".to_string()], &shot).await.unwrap();
        assert_eq!(opts, vec!["There is a connection between sublingual varices and hypertension (yes).".to_string()]);
        assert!(matches!(describe_qa_options(&c, q, &[], &shot).await, Err(InferError::InvalidArgument(_))));
    }
}
