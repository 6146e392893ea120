//! Deterministic stand-in for a multimodal chat endpoint.
//!
//! The mock reads candidate species off the prompt text (every line holding a
//! vocabulary display name, in order of appearance), looks up the test item
//! through the `x-poc-item-id` header, and answers in the `<ranking>` format
//! the prompts request. Answers depend only on the request, the answer key
//! and the mode's seed.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{ConnectInfo, DefaultBodyLimit, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use poc_core::{ClassId, SpeciesVocabulary};

use crate::wire::{AssistantMessage, ChatRequest, ChatResponse, Choice, Usage, ITEM_ID_HEADER};

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub enum MockMode {
    /// Answers the true class first when it is among the candidates, with
    /// probability `p` per item; otherwise echoes the prompt's order.
    OracleIfInTopK { p: f64, seed: u64 },
    /// Repeats the candidates in prompt order.
    ExpertEcho,
    /// A seeded per-item shuffle of the candidates.
    FixedRank { seed: u64 },
    /// Fixed text per image id.
    CannedText(Arc<HashMap<String, String>>),
}

/// Makes requests for `item_id` (or every item when `None`) answer `status`,
/// the first `times` times or forever.
#[derive(Debug, Clone)]
pub struct FailureRule {
    pub item_id: Option<String>,
    pub status: u16,
    pub times: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub mode: MockMode,
    pub vocab: Arc<SpeciesVocabulary>,
    pub answer_key: Arc<HashMap<String, ClassId>>,
    pub failures: Vec<FailureRule>,
    /// Added to every request; makes concurrency observable.
    pub latency: Duration,
}

impl MockConfig {
    pub fn new(
        mode: MockMode,
        vocab: SpeciesVocabulary,
        answer_key: HashMap<String, ClassId>,
    ) -> Self {
        Self {
            mode,
            vocab: Arc::new(vocab),
            answer_key: Arc::new(answer_key),
            failures: Vec::new(),
            latency: Duration::ZERO,
        }
    }
}

#[derive(Debug, Default)]
pub struct MockCounters {
    requests: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    peers: Mutex<HashSet<SocketAddr>>,
}

impl MockCounters {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Distinct client sockets seen, i.e. TCP connections opened.
    pub fn connections(&self) -> usize {
        self.peers.lock().expect("peer set lock").len()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

struct InFlight<'a>(&'a MockCounters);

impl<'a> InFlight<'a> {
    fn enter(c: &'a MockCounters) -> Self {
        let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        c.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(c)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Shared {
    config: MockConfig,
    counters: Arc<MockCounters>,
    failure_hits: Mutex<HashMap<(usize, String), u32>>,
}

pub struct MockHandle {
    addr: SocketAddr,
    counters: Arc<MockCounters>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl MockHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for [`crate::EndpointConfig::base_url`].
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn counters(&self) -> &MockCounters {
        &self.counters
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }

    /// Runs until the server task ends.
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub async fn serve_mock(config: MockConfig, addr: SocketAddr) -> Result<MockHandle, MockError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| MockError::BindFailure { addr, source })?;
    let bound = listener
        .local_addr()
        .map_err(|source| MockError::BindFailure { addr, source })?;
    let counters = Arc::new(MockCounters::default());
    let shared = Arc::new(Shared {
        config,
        counters: counters.clone(),
        failure_hits: Mutex::new(HashMap::new()),
    });
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(shared);
    let (tx, rx) = oneshot::channel();
    let task = tokio::spawn(async move {
        let served = axum::serve(
            listener,
            app.into_make_service_with_connect_info::<SocketAddr>(),
        )
        .with_graceful_shutdown(async {
            let _ = rx.await;
        })
        .await;
        if let Err(e) = served {
            tracing::error!("mock server stopped: {e}");
        }
    });
    Ok(MockHandle {
        addr: bound,
        counters,
        shutdown: Some(tx),
        task,
    })
}

async fn chat(
    State(shared): State<Arc<Shared>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Json(request): Json<ChatRequest>,
) -> Response {
    let counters = &shared.counters;
    counters.requests.fetch_add(1, Ordering::SeqCst);
    counters.peers.lock().expect("peer set lock").insert(peer);
    let _guard = InFlight::enter(counters);
    if !shared.config.latency.is_zero() {
        tokio::time::sleep(shared.config.latency).await;
    }
    let item_id = headers
        .get(ITEM_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();

    if let Some(status) = injected_failure(&shared, &item_id) {
        let body =
            serde_json::json!({"error": {"message": "injected failure", "code": status.as_u16()}});
        return (status, Json(body)).into_response();
    }

    let text = respond(&shared.config, &request, &item_id);
    let usage = Usage {
        prompt_tokens: (request.user_text().len() as u64).div_ceil(4)
            + 85 * request.image_count() as u64,
        completion_tokens: (text.len() as u64).div_ceil(4),
    };
    Json(ChatResponse {
        choices: vec![Choice {
            message: AssistantMessage {
                role: Some("assistant".into()),
                content: Some(text),
            },
        }],
        usage: Some(usage),
    })
    .into_response()
}

fn injected_failure(shared: &Shared, item_id: &str) -> Option<StatusCode> {
    let mut hits = shared.failure_hits.lock().expect("failure counter lock");
    for (i, rule) in shared.config.failures.iter().enumerate() {
        if rule.item_id.as_deref().is_some_and(|id| id != item_id) {
            continue;
        }
        let n = hits.entry((i, item_id.to_string())).or_default();
        if rule.times.is_none_or(|t| *n < t) {
            *n += 1;
            return StatusCode::from_u16(rule.status).ok();
        }
    }
    None
}

/// Candidate classes named in the prompt, in order of first appearance. A
/// line contributes the class with the longest display name it contains.
pub fn prompt_candidates(text: &str, vocab: &SpeciesVocabulary) -> Vec<ClassId> {
    let displays: Vec<(ClassId, String)> = vocab
        .records()
        .iter()
        .map(|r| (r.class_id, r.display_name()))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let best = displays
            .iter()
            .filter(|(_, d)| line.contains(d.as_str()))
            .max_by_key(|(_, d)| d.len());
        if let Some((id, _)) = best {
            if seen.insert(*id) {
                out.push(*id);
            }
        }
    }
    out
}

fn item_rng(seed: u64, item_id: &str) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(item_id.as_bytes())
        .finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Uniform in `[0, 1)`, fixed per (seed, item).
fn item_uniform(seed: u64, item_id: &str) -> f64 {
    use rand::Rng;
    item_rng(seed ^ 0x9e37_79b9_7f4a_7c15, item_id).random::<f64>()
}

fn ranking_text(order: &[ClassId], vocab: &SpeciesVocabulary) -> String {
    let mut s = String::from("<ranking>\n");
    for (i, c) in order.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, vocab.get(*c).display_name()));
    }
    s.push_str("</ranking>");
    s
}

const UNSURE: &str = "I cannot identify the species in this image.";

/// The mock's answer to one request.
pub fn respond(config: &MockConfig, request: &ChatRequest, item_id: &str) -> String {
    let vocab = &config.vocab;
    let candidates = prompt_candidates(&request.user_text(), vocab);
    let truth = config.answer_key.get(item_id).copied();
    match &config.mode {
        MockMode::CannedText(map) => map
            .get(item_id)
            .cloned()
            .unwrap_or_else(|| UNSURE.to_string()),
        MockMode::ExpertEcho if candidates.is_empty() => UNSURE.to_string(),
        MockMode::ExpertEcho => ranking_text(&candidates, vocab),
        MockMode::FixedRank { seed } => {
            if candidates.is_empty() {
                return UNSURE.to_string();
            }
            let mut order = candidates;
            order.shuffle(&mut item_rng(*seed, item_id));
            ranking_text(&order, vocab)
        }
        MockMode::OracleIfInTopK { p, seed } => {
            let chosen = item_uniform(*seed, item_id) < *p;
            match truth {
                Some(t) if chosen && candidates.is_empty() => {
                    let r = vocab.get(t);
                    format!(
                        "Species: {}\nExplanation: it matches the reference.",
                        r.display_name()
                    )
                }
                Some(t) if chosen && candidates.contains(&t) => {
                    let mut order = vec![t];
                    order.extend(candidates.iter().copied().filter(|c| *c != t));
                    ranking_text(&order, vocab)
                }
                _ if candidates.is_empty() => UNSURE.to_string(),
                _ => ranking_text(&candidates, vocab),
            }
        }
    }
}
