//! Blocking HTTP clients for the wire protocol.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::wire;
use super::{
    BackendError, BackendErrorKind, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, EmbedRequest,
    EmbedResponse, Endpoint, SegmentBackend, SegmentRequest, SegmentResponse,
};

#[derive(Debug, Clone)]
pub struct HttpOptions {
    pub timeout: Duration,
    /// Total attempts per call, at least 1.
    pub attempts: u32,
    pub retry_backoff: Duration,
    /// Static headers sent with every request (e.g. an API key).
    pub headers: Vec<(String, String)>,
    pub max_in_flight: usize,
}

impl Default for HttpOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            attempts: 3,
            retry_backoff: Duration::from_millis(250),
            headers: Vec::new(),
            max_in_flight: 8,
        }
    }
}

/// Counting semaphore bounding concurrent requests per endpoint.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

struct JsonClient {
    endpoint: Endpoint,
    url: String,
    opts: HttpOptions,
    client: reqwest::blocking::Client,
    limiter: Limiter,
}

impl JsonClient {
    fn new(endpoint: Endpoint, url: impl Into<String>, opts: HttpOptions) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(opts.timeout)
            .build()
            .map_err(|e| BackendError::transport(endpoint, e.to_string()))?;
        Ok(Self {
            endpoint,
            url: url.into(),
            limiter: Limiter::new(opts.max_in_flight),
            opts,
            client,
        })
    }

    fn post_once(&self, body: &[u8]) -> Result<Value, BackendError> {
        let _slot = self.limiter.acquire();
        let mut req = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body.to_vec());
        for (k, v) in &self.opts.headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req.send().map_err(|e| {
            let kind = if e.is_timeout() {
                BackendErrorKind::Timeout
            } else {
                BackendErrorKind::Transport
            };
            BackendError::new(self.endpoint, kind, e.to_string())
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::transport(self.endpoint, e.to_string()))?;
        if !status.is_success() {
            let mut snippet: String = text.chars().take(200).collect();
            if text.len() > snippet.len() {
                snippet.push('…');
            }
            return Err(BackendError::new(
                self.endpoint,
                BackendErrorKind::Status(status.as_u16()),
                snippet,
            ));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::schema(self.endpoint, format!("response is not JSON: {e}")))
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let bytes = wire::canonical_bytes(body);
        let attempts = self.opts.attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            match self.post_once(&bytes) {
                Ok(v) => return Ok(v),
                Err(mut e) => {
                    e.attempts = attempt;
                    let retry = match e.kind {
                        BackendErrorKind::Status(code) => code == 429 || code >= 500,
                        _ => e.is_retryable(),
                    };
                    if !retry {
                        return Err(e);
                    }
                    log::warn!("{} attempt {attempt}/{attempts} failed: {}", self.endpoint, e.message);
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(self.opts.retry_backoff * attempt);
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

pub struct HttpChat(JsonClient);

impl HttpChat {
    pub fn new(url: impl Into<String>, opts: HttpOptions) -> Result<Self, BackendError> {
        JsonClient::new(Endpoint::Chat, url, opts).map(Self)
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let v = self.0.post(&wire::encode_chat_request(req))?;
        wire::decode_chat_response(&v)
    }

    fn identity(&self) -> String {
        format!("http:{}", self.0.url)
    }
}

pub struct HttpSegment(JsonClient);

impl HttpSegment {
    pub fn new(url: impl Into<String>, opts: HttpOptions) -> Result<Self, BackendError> {
        JsonClient::new(Endpoint::Segment, url, opts).map(Self)
    }
}

impl SegmentBackend for HttpSegment {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError> {
        req.validate()?;
        let v = self.0.post(&wire::encode_segment_request(req))?;
        let resp = wire::decode_segment_response(&v)?;
        resp.validate(req.prompts.len())?;
        Ok(resp)
    }

    fn identity(&self) -> String {
        format!("http:{}", self.0.url)
    }
}

pub struct HttpEmbed(JsonClient);

impl HttpEmbed {
    pub fn new(url: impl Into<String>, opts: HttpOptions) -> Result<Self, BackendError> {
        JsonClient::new(Endpoint::Embed, url, opts).map(Self)
    }
}

impl EmbedBackend for HttpEmbed {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        let v = self.0.post(&wire::encode_embed_request(req))?;
        let resp = wire::decode_embed_response(&v)?;
        resp.validate(req.texts.len())?;
        Ok(resp)
    }

    fn identity(&self) -> String {
        format!("http:{}", self.0.url)
    }
}
