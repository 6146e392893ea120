//! Chat-completions client for prompt bundles: bounded parallel batches,
//! retry with exponential backoff and full jitter, and a content-addressed
//! response cache. [`mock`] serves the same wire shape for tests.

pub mod cache;
pub mod mock;
pub mod wire;

use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use rand::Rng;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use poc_core::prompt::PromptBundle;

pub use cache::{cache_key, CacheEntry, CacheHandle};
pub use wire::Usage;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("endpoint rejected credentials (HTTP {0})")]
    AuthFailure(u16),
    #[error("request payload too large (HTTP 413)")]
    PayloadTooLarge,
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("endpoint rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
}

/// Retry delays: attempt `n` (0-based) sleeps a uniform draw from
/// `[0, min(cap, base * factor^n)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backoff {
    #[serde(default = "Backoff::default_base_ms")]
    pub base_ms: u64,
    #[serde(default = "Backoff::default_factor")]
    pub factor: f64,
    #[serde(default = "Backoff::default_cap_ms")]
    pub cap_ms: u64,
}

impl Backoff {
    fn default_base_ms() -> u64 {
        1_000
    }
    fn default_factor() -> f64 {
        2.0
    }
    fn default_cap_ms() -> u64 {
        60_000
    }

    pub fn ceiling(&self, attempt: u32) -> Duration {
        let ms = self.base_ms as f64 * self.factor.powi(attempt as i32);
        Duration::from_millis(ms.min(self.cap_ms as f64) as u64)
    }

    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let ceiling = self.ceiling(attempt).as_millis() as u64;
        Duration::from_millis(rng.random_range(0..=ceiling))
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base_ms: Self::default_base_ms(),
            factor: Self::default_factor(),
            cap_ms: Self::default_cap_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Up to and including the API version, e.g. `http://127.0.0.1:8080/v1`.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is never read from or written to disk.
    #[serde(default)]
    pub api_key_env_var_name: Option<String>,
    #[serde(default = "EndpointConfig::default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "EndpointConfig::default_retries")]
    pub max_retries: u32,
    #[serde(default = "EndpointConfig::default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "EndpointConfig::default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub backoff: Backoff,
}

impl EndpointConfig {
    fn default_timeout() -> f64 {
        120.0
    }
    fn default_retries() -> u32 {
        5
    }
    fn default_parallel() -> usize {
        8
    }
    fn default_max_tokens() -> u32 {
        1024
    }

    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env_var_name: None,
            timeout_secs: Self::default_timeout(),
            max_retries: Self::default_retries(),
            max_parallel: Self::default_parallel(),
            temperature: 0.0,
            max_output_tokens: Self::default_max_tokens(),
            backoff: Backoff::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: &str| Err(ClientError::InvalidConfig(m.into()));
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1");
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs must be positive");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be a non-negative number");
        }
        if self.backoff.factor < 1.0 {
            return bad("backoff factor must be at least 1");
        }
        if self.model_name.is_empty() {
            return bad("model_name is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub content_hash: String,
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    /// HTTP attempts made; 0 for cache hits.
    pub attempt_count: u32,
    pub served_from_cache: bool,
}

enum Attempt {
    Done(Result<(String, Usage), ClientError>),
    Retry {
        reason: String,
        timeout: bool,
        after: Option<Duration>,
    },
}

pub struct LmmClient {
    http: reqwest::Client,
    cfg: EndpointConfig,
    cache: CacheHandle,
    api_key: Option<String>,
}

impl LmmClient {
    pub fn new(cfg: EndpointConfig, cache: CacheHandle) -> Result<Self, ClientError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
        let api_key = cfg
            .api_key_env_var_name
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|k| !k.is_empty());
        Ok(Self {
            http,
            cfg,
            cache,
            api_key,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &CacheHandle {
        &self.cache
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        )
    }

    async fn attempt(&self, body: &wire::ChatRequest, item_id: &str) -> Attempt {
        let mut req = self
            .http
            .post(self.endpoint())
            .header(wire::ITEM_ID_HEADER, item_id)
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    reason: e.to_string(),
                    timeout: e.is_timeout(),
                    after: None,
                }
            }
        };
        let status = resp.status();
        if status.is_success() {
            let bytes = match resp.bytes().await {
                Ok(b) => b,
                Err(e) => {
                    return Attempt::Retry {
                        reason: e.to_string(),
                        timeout: e.is_timeout(),
                        after: None,
                    }
                }
            };
            let parsed: wire::ChatResponse = match serde_json::from_slice(&bytes) {
                Ok(p) => p,
                Err(e) => return Attempt::Done(Err(ClientError::MalformedResponse(e.to_string()))),
            };
            let text = parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .unwrap_or_default();
            if text.is_empty() {
                return Attempt::Done(Err(ClientError::MalformedResponse(
                    "empty completion".into(),
                )));
            }
            return Attempt::Done(Ok((text, parsed.usage.unwrap_or_default())));
        }
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = resp.text().await.unwrap_or_default();
        match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                Attempt::Done(Err(ClientError::AuthFailure(status.as_u16())))
            }
            StatusCode::PAYLOAD_TOO_LARGE => Attempt::Done(Err(ClientError::PayloadTooLarge)),
            s if s == StatusCode::TOO_MANY_REQUESTS || s.is_server_error() => Attempt::Retry {
                reason: format!("HTTP {}", s.as_u16()),
                timeout: false,
                after: retry_after,
            },
            s => Attempt::Done(Err(ClientError::Rejected {
                status: s.as_u16(),
                body: body.chars().take(500).collect(),
            })),
        }
    }

    /// Cached response if present, otherwise the wire exchange with retries.
    pub async fn query(&self, bundle: &PromptBundle) -> Result<RawResponse, ClientError> {
        let hash = bundle.content_hash();
        let (model, temp) = (&self.cfg.model_name, self.cfg.temperature);
        if let Some(hit) = self.cache.get(hash, model, temp) {
            return Ok(RawResponse {
                content_hash: hash.to_string(),
                text: hit.text,
                usage: hit.usage,
                latency_ms: 0,
                attempt_count: 0,
                served_from_cache: true,
            });
        }
        let body = wire::ChatRequest::from_bundle(bundle, model, temp, self.cfg.max_output_tokens);
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, &bundle.provenance.image_id).await {
                Attempt::Done(Ok((text, usage))) => {
                    let entry = CacheEntry {
                        content_hash: hash.to_string(),
                        model: model.clone(),
                        temperature: temp,
                        text,
                        usage,
                    };
                    if let Err(e) = self.cache.put(&entry) {
                        tracing::warn!(image_id = %bundle.provenance.image_id, "cache write failed: {e}");
                    }
                    return Ok(RawResponse {
                        content_hash: entry.content_hash,
                        text: entry.text,
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempts,
                        served_from_cache: false,
                    });
                }
                Attempt::Done(Err(e)) => return Err(e),
                Attempt::Retry {
                    reason,
                    timeout,
                    after,
                } => {
                    if attempts > self.cfg.max_retries {
                        return Err(if timeout {
                            ClientError::Timeout { attempts }
                        } else {
                            ClientError::Exhausted {
                                attempts,
                                last: reason,
                            }
                        });
                    }
                    let jittered = self.cfg.backoff.delay(attempts - 1, &mut rand::rng());
                    let cap = Duration::from_millis(self.cfg.backoff.cap_ms);
                    let wait = after.map_or(jittered, |a| a.min(cap).max(jittered));
                    tracing::debug!(image_id = %bundle.provenance.image_id, attempts, ?wait, "retrying: {reason}");
                    tokio::time::sleep(wait).await;
                }
            }
        }
    }

    /// Results in input order; at most `max_parallel` requests in flight.
    /// A failing item never stops the batch.
    pub async fn run_batch(
        &self,
        bundles: &[PromptBundle],
    ) -> Vec<Result<RawResponse, ClientError>> {
        stream::iter(bundles.iter().map(|b| self.query(b)))
            .buffered(self.cfg.max_parallel)
            .collect()
            .await
    }
}

pub async fn query(
    bundle: &PromptBundle,
    cfg: &EndpointConfig,
    cache: &CacheHandle,
) -> Result<RawResponse, ClientError> {
    LmmClient::new(cfg.clone(), cache.clone())?
        .query(bundle)
        .await
}

pub async fn run_batch(
    bundles: &[PromptBundle],
    cfg: &EndpointConfig,
    cache: &CacheHandle,
) -> Result<Vec<Result<RawResponse, ClientError>>, ClientError> {
    Ok(LmmClient::new(cfg.clone(), cache.clone())?
        .run_batch(bundles)
        .await)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backoff_ceiling_and_jitter() {
        let b = Backoff::default();
        assert_eq!(b.ceiling(0), Duration::from_secs(1));
        assert_eq!(b.ceiling(3), Duration::from_secs(8));
        assert_eq!(b.ceiling(10), Duration::from_secs(60));
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        for attempt in 0..12 {
            for _ in 0..50 {
                assert!(b.delay(attempt, &mut rng) <= b.ceiling(attempt));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = EndpointConfig::new("http://x/v1", "m");
        assert!(c.validate().is_ok());
        c.max_parallel = 0;
        assert!(c.validate().is_err());
        c.max_parallel = 1;
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
        let parsed: EndpointConfig =
            serde_json::from_str(r#"{"base_url":"u","model_name":"m"}"#).unwrap();
        assert_eq!(parsed.temperature, 0.0);
        assert_eq!(parsed.backoff, Backoff::default());
    }
}
