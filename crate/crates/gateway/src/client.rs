//! HTTP transport with retries, caching and a per-call run log.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use editdiff_core::raster::Rgb;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::{CacheEntry, CacheKey, ResponseCache};
use crate::error::{GatewayError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    /// Stable identifier used in cache keys; defaults to the URL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub url: String,
    pub model: String,
}

impl Endpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            id: None,
            url: url.into(),
            model: model.into(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.url)
    }

    fn route_url(&self, route: Route) -> String {
        format!("{}/{}", self.url.trim_end_matches('/'), route.path())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Chat,
    Embeddings,
}

impl Route {
    pub fn path(self) -> &'static str {
        match self {
            Route::Chat => "chat/completions",
            Route::Embeddings => "embeddings",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoints {
    pub detector: Endpoint,
    pub coherence: Endpoint,
    pub captioner: Endpoint,
    pub composer: Endpoint,
    pub embeddings: Endpoint,
}

impl Endpoints {
    /// The same base URL for every role, with the given model ids.
    pub fn single(url: &str, chat_model: &str, embedding_model: &str) -> Self {
        let chat = Endpoint::new(url, chat_model);
        Self {
            detector: chat.clone(),
            coherence: chat.clone(),
            captioner: chat.clone(),
            composer: chat,
            embeddings: Endpoint::new(url, embedding_model),
        }
    }
}

/// Delays before each retry; the number of retries is the list length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub delays_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            delays_ms: vec![1_000, 4_000, 16_000],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { delays_ms: Vec::new() }
    }

    /// `retries` retries without waiting.
    pub fn immediate(retries: usize) -> Self {
        Self {
            delays_ms: vec![0; retries],
        }
    }

    pub fn max_attempts(&self) -> usize {
        self.delays_ms.len() + 1
    }
}

/// Outline colors and thickness for coherence overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub thickness: u32,
    pub add: Rgb,
    pub edit: Rgb,
    pub remove: Rgb,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            thickness: 4,
            add: Rgb::RED,
            edit: Rgb::GREEN,
            remove: Rgb::BLUE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub endpoints: Endpoints,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub cache_dir: Option<std::path::PathBuf>,
    pub overlay: OverlayStyle,
    pub top_k_alternatives: u8,
    pub max_tokens: u32,
    pub max_images: usize,
}

impl GatewayConfig {
    pub fn new(endpoints: Endpoints) -> Self {
        Self {
            endpoints,
            api_key: None,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            cache_dir: None,
            overlay: OverlayStyle::default(),
            top_k_alternatives: 5,
            max_tokens: 512,
            max_images: 2,
        }
    }
}

/// One logical call, as written to the run manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallRecord {
    pub op: String,
    pub case_id: String,
    pub key: CacheKey,
    pub endpoint: String,
    pub model: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

pub struct Gateway {
    pub(crate) config: GatewayConfig,
    agent: ureq::Agent,
    cache: Option<ResponseCache>,
    records: Mutex<Vec<CallRecord>>,
    network_calls: AtomicU64,
    pub(crate) embedding_dim: Mutex<Option<usize>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self> {
        if config.overlay.thickness == 0 {
            return Err(GatewayError::InvalidRequest("overlay thickness must be ≥ 1".into()));
        }
        if config.max_images < 2 {
            return Err(GatewayError::InvalidRequest(
                "endpoint must accept at least 2 images".into(),
            ));
        }
        let cache = config.cache_dir.as_ref().map(ResponseCache::open).transpose()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            cache,
            records: Mutex::new(Vec::new()),
            network_calls: AtomicU64::new(0),
            embedding_dim: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// HTTP requests actually sent, counting each retry.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    /// Call records so far, in canonical order.
    pub fn records(&self) -> Vec<CallRecord> {
        let mut r = self.records.lock().expect("record lock").clone();
        r.sort();
        r
    }

    /// Sends `body` to `endpoint`, or answers it from the cache.
    pub(crate) fn call(
        &self,
        op: &str,
        case_id: &str,
        endpoint: &Endpoint,
        route: Route,
        body: &Value,
    ) -> Result<Value> {
        let key = CacheKey::new(endpoint.id(), &endpoint.model, route.path(), body);
        let entry = match self.cache.as_ref().and_then(|c| c.get(&key)) {
            Some(hit) => hit,
            None => {
                let started = Instant::now();
                let response = self.send_with_retries(&endpoint.route_url(route), body)?;
                let entry = CacheEntry {
                    key: key.clone(),
                    latency_ms: started.elapsed().as_millis() as u64,
                    response,
                };
                if let Some(c) = &self.cache {
                    c.put(&entry)?;
                }
                entry
            }
        };
        let usage = entry.response.get("usage");
        let count = |field: &str| usage.and_then(|u| u.get(field)).and_then(Value::as_u64);
        let record = CallRecord {
            op: op.to_string(),
            case_id: case_id.to_string(),
            key,
            endpoint: endpoint.id().to_string(),
            model: endpoint.model.clone(),
            latency_ms: entry.latency_ms,
            prompt_tokens: count("prompt_tokens"),
            completion_tokens: count("completion_tokens"),
        };
        self.records.lock().expect("record lock").push(record);
        Ok(entry.response)
    }

    fn send_with_retries(&self, url: &str, body: &Value) -> Result<Value> {
        let delays = &self.config.retry.delays_ms;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(url, body, attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt <= delays.len() => {
                    let wait = delays[attempt - 1];
                    tracing::warn!(%url, attempt, wait_ms = wait, error = %e, "retrying");
                    std::thread::sleep(Duration::from_millis(wait));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn send_once(&self, url: &str, body: &Value, attempt: usize) -> Result<Value> {
        self.network_calls.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(k) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let transport = |e: ureq::Error| GatewayError::Transport {
            url: url.to_string(),
            attempts: attempt,
            message: e.to_string(),
        };
        let mut resp = req.send(body.to_string()).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status {
                url: url.to_string(),
                status,
                attempts: attempt,
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))
    }
}

/// Runs `f` over `items` on at most `limit` threads, keeping input order.
pub fn map_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}
