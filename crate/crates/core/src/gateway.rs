//! Chat-completions client with a record/replay transcript cache.
//!
//! Every request is keyed by a SHA-256 over its canonical JSON form. In
//! `Replay` mode responses come only from the cache and no transport is
//! touched; `Record` serves known keys from the cache and appends new live
//! responses; `Live` bypasses the cache entirely.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text {
        text: String,
    },
    /// Path relative to the gateway's image root, resolved only when sent.
    ImagePath {
        path: String,
    },
    ImageBase64 {
        media_type: String,
        data: String,
    },
}

impl ContentPart {
    pub fn text(t: impl Into<String>) -> Self {
        ContentPart::Text { text: t.into() }
    }

    pub fn image(path: impl Into<String>) -> Self {
        ContentPart::ImagePath { path: path.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Hex SHA-256 of the canonical serialization. `serde_json::Value`
    /// objects keep keys sorted, so field order never leaks into the key.
    pub fn request_key(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter(|p| !matches!(p, ContentPart::Text { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub request_key: String,
    pub response: String,
    pub latency_ms: u64,
    pub timestamp: u64,
    pub provider: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    #[default]
    Replay,
}

impl std::str::FromStr for GatewayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            other => Err(Error::GatewayConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub endpoint: Option<String>,
    /// Text model used for guideline updates and synthesis.
    pub model: String,
    /// Multimodal model used for refinement and grounding.
    pub vision_model: String,
    pub api_key_env: String,
    pub provider: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub max_image_bytes: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            mode: GatewayMode::Replay,
            endpoint: None,
            model: "qwen-max".into(),
            vision_model: "qwen2.5-vl-72b-instruct".into(),
            api_key_env: "GMNER_API_KEY".into(),
            provider: "openai-compatible".into(),
            max_retries: 3,
            backoff_ms: 500,
            concurrency: 4,
            timeout_secs: 120,
            max_image_bytes: 4 * 1024 * 1024,
            temperature: 0.0,
            max_tokens: 2048,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::Config {
                field: "gateway.concurrency".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.mode != GatewayMode::Replay && self.endpoint.is_none() {
            return Err(Error::Config {
                field: "gateway.endpoint".into(),
                message: format!("required in {:?} mode", self.mode),
            });
        }
        Ok(())
    }

    pub fn text_request(&self, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn vision_request(&self, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model: self.vision_model.clone(),
            ..self.text_request(messages)
        }
    }
}

#[derive(Debug)]
pub enum TransportError {
    Status { code: u16, body: String },
    Io(String),
    Payload(String),
    Request(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { code, .. } => *code == 429 || *code >= 500,
            TransportError::Io(_) => true,
            TransportError::Payload(_) | TransportError::Request(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Status { code, body } => write!(f, "status {code}: {body}"),
            TransportError::Io(m) => write!(f, "transport: {m}"),
            TransportError::Payload(m) => write!(f, "payload: {m}"),
            TransportError::Request(m) => write!(f, "request: {m}"),
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportError>;
}

/// Transport backed by a closure; used for scripted providers in tests and
/// fixture generation.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&ChatRequest) -> std::result::Result<String, TransportError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportError> {
        (self.0)(request)
    }
}

/// Blocking HTTP transport speaking the chat-completions wire format.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    image_root: PathBuf,
    max_image_bytes: usize,
}

impl HttpTransport {
    pub fn new(config: &GatewayConfig, image_root: impl Into<PathBuf>) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::GatewayConfig("no endpoint configured".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpTransport {
            agent,
            endpoint,
            api_key: std::env::var(&config.api_key_env).ok(),
            image_root: image_root.into(),
            max_image_bytes: config.max_image_bytes,
        })
    }

    fn wire_part(&self, part: &ContentPart) -> std::result::Result<serde_json::Value, TransportError> {
        Ok(match part {
            ContentPart::Text { text } => serde_json::json!({"type": "text", "text": text}),
            ContentPart::ImagePath { path } => {
                let full = self.image_root.join(path);
                let bytes = fs::read(&full).map_err(|e| TransportError::Request(format!("{}: {e}", full.display())))?;
                image_part(&media_type(path), &bytes, self.max_image_bytes)?
            }
            ContentPart::ImageBase64 { media_type, data } => {
                if data.len() / 4 * 3 > self.max_image_bytes {
                    return Err(TransportError::Request(format!(
                        "image exceeds {} bytes",
                        self.max_image_bytes
                    )));
                }
                serde_json::json!({"type": "image_url", "image_url": {"url": format!("data:{media_type};base64,{data}")}})
            }
        })
    }

    fn wire_body(&self, request: &ChatRequest) -> std::result::Result<String, TransportError> {
        let mut messages = Vec::with_capacity(request.messages.len());
        for m in &request.messages {
            let parts = m
                .content
                .iter()
                .map(|p| self.wire_part(p))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            messages.push(serde_json::json!({"role": m.role, "content": parts}));
        }
        let body = serde_json::json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": false,
        });
        Ok(body.to_string())
    }
}

fn media_type(path: &str) -> String {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png".into()
    } else if lower.ends_with(".gif") {
        "image/gif".into()
    } else if lower.ends_with(".webp") {
        "image/webp".into()
    } else {
        "image/jpeg".into()
    }
}

fn image_part(media: &str, bytes: &[u8], cap: usize) -> std::result::Result<serde_json::Value, TransportError> {
    if bytes.len() > cap {
        return Err(TransportError::Request(format!(
            "image of {} bytes exceeds cap {cap}",
            bytes.len()
        )));
    }
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(serde_json::json!({"type": "image_url", "image_url": {"url": format!("data:{media};base64,{data}")}}))
}

/// Pulls `choices[0].message.content` out of a chat-completions reply.
pub fn parse_completion(body: &str) -> std::result::Result<String, TransportError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| TransportError::Payload(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    if let Some(s) = content.as_str() {
        return Ok(s.to_string());
    }
    // some providers return content as a list of text parts
    if let Some(parts) = content.as_array() {
        let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
        if !text.is_empty() {
            return Ok(text);
        }
    }
    Err(TransportError::Payload(format!(
        "no message content in {}",
        truncate(body, 200)
    )))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportError> {
        let body = self.wire_body(request)?;
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.as_str()).map_err(|e| TransportError::Io(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(TransportError::Status {
                code,
                body: truncate(&text, 500).to_string(),
            });
        }
        parse_completion(&text)
    }
}

/// Append-only JSON-lines store of transcripts, one per request key.
#[derive(Debug, Default)]
pub struct TranscriptCache {
    path: Option<PathBuf>,
    entries: HashMap<String, Transcript>,
}

impl TranscriptCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file; a missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::<String, Transcript>::new();
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let t: Transcript =
                    serde_json::from_str(line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
                match entries.get(&t.request_key) {
                    Some(prev) if prev.response != t.response => {
                        return Err(Error::GatewayConfig(format!(
                            "{}:{}: conflicting responses for key {}",
                            path.display(),
                            i + 1,
                            t.request_key
                        )))
                    }
                    Some(_) => {}
                    None => {
                        entries.insert(t.request_key.clone(), t);
                    }
                }
            }
        }
        Ok(TranscriptCache {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn get(&self, key: &str) -> Option<&Transcript> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn append(&mut self, t: Transcript) -> Result<()> {
        if self.entries.contains_key(&t.request_key) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            let mut line = serde_json::to_string(&t).map_err(|e| Error::json("transcript", e))?;
            line.push('\n');
            f.write_all(line.as_bytes())
                .map_err(|e| Error::io(format!("appending to {}", path.display()), e))?;
        }
        self.entries.insert(t.request_key.clone(), t);
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub live_calls: AtomicU64,
    pub retries: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub cache_hits: u64,
    pub live_calls: u64,
    pub retries: u64,
    pub failures: u64,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    config: GatewayConfig,
    cache: Mutex<TranscriptCache>,
    transport: Option<Box<dyn Transport>>,
    slots: Semaphore,
    metrics: Metrics,
}

impl Gateway {
    pub fn new(config: GatewayConfig, cache: TranscriptCache, transport: Option<Box<dyn Transport>>) -> Result<Self> {
        if config.mode != GatewayMode::Replay && transport.is_none() {
            return Err(Error::GatewayConfig(format!(
                "{:?} mode needs a transport",
                config.mode
            )));
        }
        Ok(Gateway {
            slots: Semaphore::new(config.concurrency.max(1)),
            config,
            cache: Mutex::new(cache),
            transport,
            metrics: Metrics::default(),
        })
    }

    /// Replay-only gateway over a cache; never touches the network.
    pub fn replay(cache: TranscriptCache) -> Self {
        Gateway::new(GatewayConfig::default(), cache, None).expect("replay needs no transport")
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn mode(&self) -> GatewayMode {
        self.config.mode
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let m = &self.metrics;
        MetricsSnapshot {
            requests: m.requests.load(Ordering::Relaxed),
            cache_hits: m.cache_hits.load(Ordering::Relaxed),
            live_calls: m.live_calls.load(Ordering::Relaxed),
            retries: m.retries.load(Ordering::Relaxed),
            failures: m.failures.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.metrics.requests.fetch_add(1, Ordering::Relaxed);
        let key = request.request_key();
        if self.config.mode != GatewayMode::Live {
            if let Some(t) = self.cache.lock().unwrap().get(&key) {
                self.metrics.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(t.response.clone());
            }
            if self.config.mode == GatewayMode::Replay {
                return Err(Error::CacheMiss(key));
            }
        }
        let started = Instant::now();
        let response = self.call_with_retries(request)?;
        if self.config.mode == GatewayMode::Record {
            let timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            self.cache.lock().unwrap().append(Transcript {
                request_key: key,
                response: response.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                timestamp,
                provider: self.config.provider.clone(),
            })?;
        }
        Ok(response)
    }

    fn call_with_retries(&self, request: &ChatRequest) -> Result<String> {
        let transport = self.transport.as_ref().expect("checked at construction");
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.metrics.live_calls.fetch_add(1, Ordering::Relaxed);
            let result = {
                let _permit = self.slots.acquire();
                transport.send(request)
            };
            match result {
                Ok(text) => return Ok(text),
                Err(TransportError::Payload(m)) => {
                    self.metrics.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(Error::ProviderPayload(m));
                }
                Err(e) if e.is_transient() && attempt <= self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    log::warn!("attempt {attempt} failed ({e}); retrying in {delay} ms");
                    self.metrics.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => {
                    self.metrics.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(Error::Http {
                        attempts: attempt,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
}
