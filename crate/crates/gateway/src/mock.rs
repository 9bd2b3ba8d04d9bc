//! Scripted in-process inference backend for tests and offline runs.
//!
//! The server speaks the same chat-completions and embeddings routes as a
//! real endpoint. It dispatches on the system prompt:
//!
//! - detection replies are looked up by the fingerprint of the second image;
//! - coherence and compose replies by the first rule whose needle occurs in
//!   the user text;
//! - captions by the fingerprint of the image.
//!
//! Embeddings reproduce [`MeanPixelEmbedder`]'s raw vectors. Every request
//! body is captured.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use editdiff_core::evalcomp::MeanPixelEmbedder;
use editdiff_core::EditCommand;
use serde_json::{json, Value};

use crate::prompts::{CAPTION_SYSTEM_PROMPT, COHERENCE_SYSTEM_PROMPT, COMPOSE_SYSTEM_PROMPT, DIFFERENCE_SYSTEM_PROMPT};
use crate::wire::{decode_data_url, PNG_DATA_URL_PREFIX};

#[derive(Debug, Clone)]
pub struct MockScript {
    /// Detection completion by fingerprint of the edited image.
    pub detections: HashMap<String, String>,
    pub default_detection: String,
    /// (needle, reply) pairs tried in order against the coherence user text.
    pub coherence: Vec<(String, String)>,
    pub default_coherence: String,
    pub captions: HashMap<String, String>,
    pub default_caption: String,
    pub compose: Vec<(String, String)>,
    pub default_compose: String,
    /// Probability given to the sampled command at each command token; the
    /// rest is split evenly over the other two commands.
    pub command_probability: f64,
    /// Per-line overrides of `command_probability`, keyed by the full line.
    pub line_probability: HashMap<String, f64>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            detections: HashMap::new(),
            default_detection: String::new(),
            coherence: Vec::new(),
            default_coherence: "Reasoning: no rule matched.\nDecision: \"NO\"".into(),
            captions: HashMap::new(),
            default_caption: "a photograph".into(),
            compose: Vec::new(),
            default_compose: "a photograph".into(),
            command_probability: 0.9,
            line_probability: HashMap::new(),
        }
    }
}

/// A request as received.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedRequest {
    pub route: &'static str,
    pub body: Value,
}

impl CapturedRequest {
    pub fn system_prompt(&self) -> Option<&str> {
        self.body["messages"][0]["content"].as_str()
    }

    /// Concatenated text parts of the user message.
    pub fn user_text(&self) -> String {
        user_parts(&self.body)
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Image data URLs of the user message, in order.
    pub fn image_urls(&self) -> Vec<&str> {
        user_parts(&self.body)
            .iter()
            .filter_map(|p| p["image_url"]["url"].as_str())
            .collect()
    }
}

fn user_parts(body: &Value) -> &[Value] {
    body["messages"][1]["content"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or(&[])
}

struct MockState {
    script: Mutex<MockScript>,
    captured: Mutex<Vec<CapturedRequest>>,
    calls: AtomicU64,
    fail_next: AtomicUsize,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(script: MockScript) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            script: Mutex::new(script),
            captured: Mutex::new(Vec::new()),
            calls: AtomicU64::new(0),
            fail_next: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/v1/embeddings", post(embeddings))
            .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
            .with_state(state.clone());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    /// Base URL to configure an endpoint with.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests received, including failed ones.
    pub fn call_count(&self) -> u64 {
        self.state.calls.load(Ordering::SeqCst)
    }

    pub fn captured(&self) -> Vec<CapturedRequest> {
        self.state.captured.lock().expect("capture lock").clone()
    }

    pub fn clear_captured(&self) {
        self.state.captured.lock().expect("capture lock").clear();
    }

    /// Answers the next `n` requests with HTTP 503.
    pub fn fail_next(&self, n: usize) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn update_script(&self, f: impl FnOnce(&mut MockScript)) {
        f(&mut self.state.script.lock().expect("script lock"));
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

fn record(state: &MockState, route: &'static str, body: &Value) -> Option<Response> {
    state.calls.fetch_add(1, Ordering::SeqCst);
    state.captured.lock().expect("capture lock").push(CapturedRequest {
        route,
        body: body.clone(),
    });
    let injected = state
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    injected.then(|| (StatusCode::SERVICE_UNAVAILABLE, "injected failure").into_response())
}

fn bad_request(msg: &str) -> Response {
    (StatusCode::BAD_REQUEST, msg.to_string()).into_response()
}

fn first_match(rules: &[(String, String)], haystack: &str, default: &str) -> String {
    rules
        .iter()
        .find(|(needle, _)| haystack.contains(needle.as_str()))
        .map(|(_, reply)| reply.clone())
        .unwrap_or_else(|| default.to_string())
}

async fn chat(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> Response {
    if let Some(r) = record(&state, "chat/completions", &body) {
        return r;
    }
    let req = CapturedRequest {
        route: "chat/completions",
        body,
    };
    let script = state.script.lock().expect("script lock").clone();
    let fingerprint_of = |i: usize| {
        req.image_urls()
            .get(i)
            .and_then(|u| decode_data_url(u).ok())
            .map(|img| img.fingerprint())
    };
    let text = match req.system_prompt() {
        Some(DIFFERENCE_SYSTEM_PROMPT) => match fingerprint_of(1) {
            Some(fp) => script
                .detections
                .get(&fp)
                .cloned()
                .unwrap_or(script.default_detection.clone()),
            None => return bad_request("detection needs two images"),
        },
        Some(COHERENCE_SYSTEM_PROMPT) => first_match(&script.coherence, &req.user_text(), &script.default_coherence),
        Some(CAPTION_SYSTEM_PROMPT) => match fingerprint_of(0) {
            Some(fp) => script
                .captions
                .get(&fp)
                .cloned()
                .unwrap_or(script.default_caption.clone()),
            None => return bad_request("caption needs an image"),
        },
        Some(COMPOSE_SYSTEM_PROMPT) => first_match(&script.compose, &req.user_text(), &script.default_compose),
        _ => return bad_request("unknown system prompt"),
    };

    let tokens = tokenize(&text);
    let mut choice = json!({
        "index": 0,
        "message": {"role": "assistant", "content": text},
        "finish_reason": "stop",
    });
    if req.body["logprobs"].as_bool() == Some(true) {
        choice["logprobs"] = json!({"content": token_logprobs(&text, &tokens, &script)});
    }
    let prompt_tokens = req.user_text().len() / 4 + 85 * req.image_urls().len();
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "model": req.body["model"],
        "choices": [choice],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": tokens.len()},
    }))
    .into_response()
}

async fn embeddings(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> Response {
    if let Some(r) = record(&state, "embeddings", &body) {
        return r;
    }
    let Some(inputs) = body["input"].as_array() else {
        return bad_request("input must be a list");
    };
    let mut data = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let Some(s) = input.as_str() else {
            return bad_request("inputs must be strings");
        };
        let v = if s.starts_with(PNG_DATA_URL_PREFIX) {
            match decode_data_url(s) {
                Ok(img) => MeanPixelEmbedder::raw_image_vector(&img),
                Err(e) => return bad_request(&e.to_string()),
            }
        } else {
            MeanPixelEmbedder::raw_text_vector(s)
        };
        data.push(json!({"object": "embedding", "index": i, "embedding": v}));
    }
    Json(json!({"object": "list", "data": data, "model": body["model"]})).into_response()
}

/// Splits text into tokens: letter runs in chunks of at most three, single
/// digits, whitespace runs, and single other characters.
pub fn tokenize(text: &str) -> Vec<String> {
    #[derive(PartialEq, Clone, Copy)]
    enum Kind {
        Alpha,
        Space,
        Other,
    }
    let kind = |c: char| {
        if c.is_alphabetic() {
            Kind::Alpha
        } else if c.is_whitespace() {
            Kind::Space
        } else {
            Kind::Other
        }
    };
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut cur_kind = None;
    for c in text.chars() {
        let k = kind(c);
        let extend = match (cur_kind, k) {
            (Some(Kind::Alpha), Kind::Alpha) => cur.chars().count() < 3,
            (Some(Kind::Space), Kind::Space) => c != '\n' && !cur.ends_with('\n'),
            _ => false,
        };
        if !extend && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(c);
        cur_kind = Some(k);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn first_chunk(c: EditCommand) -> String {
    c.as_str().chars().take(3).collect()
}

fn token_logprobs(text: &str, tokens: &[String], script: &MockScript) -> Vec<Value> {
    // byte offsets of lines whose first word is a command
    let mut command_at: HashMap<usize, (EditCommand, f64)> = HashMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let lead = line.len() - line.trim_start_matches(|c: char| !c.is_alphabetic()).len();
        let word: String = line[lead..].chars().take_while(|c| c.is_alphabetic()).collect();
        if let Ok(cmd) = word.parse::<EditCommand>() {
            let key = line.trim_end_matches(['\n', '\r']);
            let p = script
                .line_probability
                .get(key)
                .copied()
                .unwrap_or(script.command_probability);
            command_at.insert(offset + lead, (cmd, p));
        }
        offset += line.len();
    }

    let mut at = 0;
    tokens
        .iter()
        .map(|t| {
            let entry = match command_at.get(&at) {
                Some(&(cmd, p)) => {
                    let rest = (1.0 - p) / 2.0;
                    let alts: Vec<Value> = EditCommand::ALL
                        .iter()
                        .map(|&c| {
                            let tok = if c == cmd { t.clone() } else { first_chunk(c) };
                            let prob = if c == cmd { p } else { rest };
                            json!({"token": tok, "logprob": prob.ln()})
                        })
                        .collect();
                    json!({"token": t, "logprob": p.ln(), "top_logprobs": alts})
                }
                None => json!({"token": t, "logprob": 0.0, "top_logprobs": [{"token": t, "logprob": 0.0}]}),
            };
            at += t.len();
            entry
        })
        .collect()
}
