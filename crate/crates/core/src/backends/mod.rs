//! Access to the three model services: a chat multimodal model, a
//! text-conditioned segmentor and a text embedder.
//!
//! Every backend is a trait object so the pipeline runs unchanged against HTTP
//! services, deterministic mocks, or either of those behind the response
//! cache.

use std::fmt;

use thiserror::Error;

use crate::raster::LogitMap;

pub mod cache;
pub mod conformance;
pub mod http;
pub mod mock;
pub mod wire;

pub use cache::{CacheStats, CachedChat, CachedEmbed, CachedSegment, ResponseCache};
pub use http::{HttpChat, HttpEmbed, HttpOptions, HttpSegment};
pub use mock::{ChatRule, MockChat, MockEmbed, MockReply, MockSegment, SegmentImageFixture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Chat,
    Segment,
    Embed,
}

impl Endpoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Chat => "chat",
            Endpoint::Segment => "segment",
            Endpoint::Embed => "embed",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendErrorKind {
    Transport,
    Timeout,
    Status(u16),
    Schema,
    Cache,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{endpoint} backend: {kind:?} after {attempts} attempt(s): {message}")]
pub struct BackendError {
    pub endpoint: Endpoint,
    pub kind: BackendErrorKind,
    pub attempts: u32,
    pub message: String,
}

impl BackendError {
    pub fn new(endpoint: Endpoint, kind: BackendErrorKind, message: impl Into<String>) -> Self {
        Self {
            endpoint,
            kind,
            attempts: 1,
            message: message.into(),
        }
    }

    pub fn schema(endpoint: Endpoint, message: impl Into<String>) -> Self {
        Self::new(endpoint, BackendErrorKind::Schema, message)
    }

    pub fn transport(endpoint: Endpoint, message: impl Into<String>) -> Self {
        Self::new(endpoint, BackendErrorKind::Transport, message)
    }

    /// Schema violations are not retried; everything else may succeed later.
    pub fn is_retryable(&self) -> bool {
        !matches!(self.kind, BackendErrorKind::Schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Image { mime: String, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn user(parts: Vec<ContentPart>) -> Self {
        Self { role: Role::User, parts }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![ContentPart::Text(text.into())],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter(|p| matches!(p, ContentPart::Image { .. }))
            .count()
    }

    /// All text parts joined with newlines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn image_bytes(&self) -> Option<&[u8]> {
        self.messages.iter().flat_map(|m| &m.parts).find_map(|p| match p {
            ContentPart::Image { data, .. } => Some(data.as_slice()),
            ContentPart::Text(_) => None,
        })
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::schema(
                Endpoint::Chat,
                format!("temperature {} outside [0, 2]", self.temperature),
            ));
        }
        if self.image_count() > 1 {
            return Err(BackendError::schema(Endpoint::Chat, "at most one image part per request"));
        }
        if self.messages.is_empty() {
            return Err(BackendError::schema(Endpoint::Chat, "no messages"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRequest {
    pub image_mime: String,
    pub image: Vec<u8>,
    pub prompts: Vec<String>,
}

impl SegmentRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompts.is_empty() {
            return Err(BackendError::schema(Endpoint::Segment, "no prompts"));
        }
        if self.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(BackendError::schema(Endpoint::Segment, "empty prompt"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResponse {
    pub maps: Vec<LogitMap<f32>>,
}

impl SegmentResponse {
    /// One map per prompt, all sharing one geometry.
    pub fn validate(&self, prompts: usize) -> Result<(), BackendError> {
        if self.maps.len() != prompts {
            return Err(BackendError::schema(
                Endpoint::Segment,
                format!("{} maps for {prompts} prompts", self.maps.len()),
            ));
        }
        if let Some(first) = self.maps.first() {
            if self
                .maps
                .iter()
                .any(|m| m.width() != first.width() || m.height() != first.height())
            {
                return Err(BackendError::schema(Endpoint::Segment, "maps differ in geometry"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedRequest {
    pub model: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedResponse {
    pub dimension: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbedResponse {
    pub fn validate(&self, texts: usize) -> Result<(), BackendError> {
        if self.vectors.len() != texts {
            return Err(BackendError::schema(
                Endpoint::Embed,
                format!("{} vectors for {texts} texts", self.vectors.len()),
            ));
        }
        if self.dimension == 0 {
            return Err(BackendError::schema(Endpoint::Embed, "dimension 0"));
        }
        if let Some(i) = self.vectors.iter().position(|v| v.len() != self.dimension) {
            return Err(BackendError::schema(
                Endpoint::Embed,
                format!("vector {i} has length {}, declared {}", self.vectors[i].len(), self.dimension),
            ));
        }
        if self.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(BackendError::schema(Endpoint::Embed, "non-finite component"));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
    /// Stable description recorded in run metadata.
    fn identity(&self) -> String;
}

pub trait SegmentBackend: Send + Sync {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError>;
    fn identity(&self) -> String;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError>;
    fn identity(&self) -> String;
}
