//! Chat-completion transport.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::prompt::{Decoding, Message};
use super::GatewayError;

pub trait ChatClient: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, messages: &[Message], decoding: &Decoding) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
}

pub const ENV_BASE: &str = "VTHINKER_API_BASE";
pub const ENV_KEY: &str = "VTHINKER_API_KEY";
pub const ENV_MODEL: &str = "VTHINKER_MODEL";

impl EndpointConfig {
    pub fn from_env() -> Result<Self, GatewayError> {
        let get = |k: &str| {
            std::env::var(k)
                .ok()
                .filter(|v| !v.trim().is_empty())
                .ok_or_else(|| GatewayError::Config(format!("{k} is not set")))
        };
        Ok(Self {
            base: get(ENV_BASE)?,
            api_key: get(ENV_KEY)?,
            model: get(ENV_MODEL)?,
            timeout: Duration::from_secs(120),
        })
    }

    pub fn url(&self) -> String {
        let base = self.base.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, for 1-based `attempt`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

/// Shared token bucket; `acquire` blocks until a token is available.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        assert!(per_second > 0.0, "refill rate must be positive");
        Self {
            capacity: f64::from(capacity.max(1)),
            per_second,
            state: Mutex::new((f64::from(capacity.max(1)), Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_second;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - s.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Client for an OpenAI-compatible `/v1/chat/completions` endpoint.
pub struct HttpChatClient {
    endpoint: EndpointConfig,
    retry: RetryPolicy,
    bucket: Arc<TokenBucket>,
    agent: ureq::Agent,
    attempts: AtomicU32,
    id: String,
}

impl HttpChatClient {
    pub fn new(endpoint: EndpointConfig, retry: RetryPolicy, bucket: Arc<TokenBucket>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: format!("http:{}", endpoint.model),
            endpoint,
            retry,
            bucket,
            agent,
            attempts: AtomicU32::new(0),
        }
    }

    /// Total HTTP attempts issued so far.
    pub fn attempts(&self) -> u32 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn attempt(&self, body: &str) -> Result<String, GatewayError> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let resp = self
            .agent
            .post(&self.endpoint.url())
            .header("Authorization", &format!("Bearer {}", self.endpoint.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(GatewayError::Timeout),
            Err(
                e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound),
            ) => return Err(GatewayError::Transport(e.to_string())),
            Err(e) => return Err(GatewayError::Fatal(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        match status {
            200..=299 => extract_content(&text),
            401 | 403 => Err(GatewayError::Auth(format!("status {status}"))),
            429 => Err(GatewayError::RateLimited),
            408 | 500..=599 => Err(GatewayError::Transport(format!("status {status}"))),
            _ => Err(GatewayError::Fatal(format!("status {status}: {}", truncate(&text, 200)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Pulls `choices[0].message.content` out of a completion body.
pub fn extract_content(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("body is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))
}

impl ChatClient for HttpChatClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, messages: &[Message], decoding: &Decoding) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": self.endpoint.model,
            "messages": messages.iter().map(Message::to_json).collect::<Vec<_>>(),
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        })
        .to_string();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.bucket.acquire();
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) if attempt >= self.retry.max_attempts => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => {
                    let wait = self.retry.delay_after(attempt);
                    warn!("attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }
}

/// Test double returning canned responses.
///
/// In sequence mode responses are handed out in order. In keyed mode the
/// first key found in the concatenated prompt text selects the response.
pub struct ScriptedChatClient {
    queue: Mutex<VecDeque<Result<String, GatewayError>>>,
    keyed: Vec<(String, String)>,
    fallback: Option<String>,
    calls: Mutex<Vec<Vec<Message>>>,
}

impl ScriptedChatClient {
    pub fn sequence(responses: impl IntoIterator<Item = Result<String, GatewayError>>) -> Self {
        Self {
            queue: Mutex::new(responses.into_iter().collect()),
            keyed: Vec::new(),
            fallback: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self::keyed(Vec::new(), Some(text.into()))
    }

    pub fn keyed(pairs: Vec<(String, String)>, fallback: Option<String>) -> Self {
        Self {
            queue: Mutex::new(VecDeque::new()),
            keyed: pairs,
            fallback,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<Vec<Message>> {
        self.calls.lock().expect("calls lock").clone()
    }
}

impl ChatClient for ScriptedChatClient {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, messages: &[Message], _: &Decoding) -> Result<String, GatewayError> {
        self.calls.lock().expect("calls lock").push(messages.to_vec());
        if let Some(next) = self.queue.lock().expect("queue lock").pop_front() {
            return next;
        }
        let text: String = messages.iter().map(Message::text_content).collect::<Vec<_>>().join("\n");
        for (key, resp) in &self.keyed {
            if text.contains(key.as_str()) {
                debug!("scripted client matched key {key:?}");
                return Ok(resp.clone());
            }
        }
        self.fallback
            .clone()
            .ok_or_else(|| GatewayError::Fatal("scripted client has no response left".into()))
    }
}
