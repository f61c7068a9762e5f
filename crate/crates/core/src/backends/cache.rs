//! Content-addressed response cache with single-flight dispatch.
//!
//! Keys are `(endpoint, sha256(canonical request JSON))`; values are the
//! canonical response JSON bytes. Concurrent callers for one key block on a
//! per-key slot so the upstream service sees at most one request per key.
//! With a directory configured, entries persist as
//! `<dir>/<endpoint>/<hex>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::wire::{self, canonical_bytes};
use super::{
    BackendError, BackendErrorKind, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, EmbedRequest,
    EmbedResponse, Endpoint, SegmentBackend, SegmentRequest, SegmentResponse,
};

type Slot = Arc<Mutex<Option<Arc<Vec<u8>>>>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub disk_hits: u64,
    pub misses: u64,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    slots: Mutex<HashMap<(Endpoint, String), Slot>>,
    hits: AtomicU64,
    disk_hits: AtomicU64,
    misses: AtomicU64,
}

pub fn request_key(request: &Value) -> String {
    hex::encode(Sha256::digest(canonical_bytes(request)))
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            disk_hits: self.disk_hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    fn entry_path(&self, endpoint: Endpoint, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(endpoint.as_str()).join(format!("{key}.json")))
    }

    /// Returns the cached bytes for `key`, calling `fetch` at most once per key
    /// across all threads. Failed fetches are not cached.
    pub fn get_or_fetch<F>(&self, endpoint: Endpoint, key: &str, fetch: F) -> Result<Arc<Vec<u8>>, BackendError>
    where
        F: FnOnce() -> Result<Vec<u8>, BackendError>,
    {
        let slot = {
            let mut slots = self.slots.lock().expect("cache index poisoned");
            slots.entry((endpoint, key.to_string())).or_default().clone()
        };
        let mut guard = slot.lock().expect("cache slot poisoned");
        if let Some(bytes) = guard.as_ref() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(bytes.clone());
        }
        if let Some(path) = self.entry_path(endpoint, key) {
            if let Ok(bytes) = fs::read(&path) {
                self.disk_hits.fetch_add(1, Ordering::Relaxed);
                let bytes = Arc::new(bytes);
                *guard = Some(bytes.clone());
                return Ok(bytes);
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let bytes = Arc::new(fetch()?);
        if let Some(path) = self.entry_path(endpoint, key) {
            let write = path
                .parent()
                .map_or(Ok(()), fs::create_dir_all)
                .and_then(|_| {
                    // write-then-rename keeps concurrent processes from reading halves
                    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                    fs::write(&tmp, bytes.as_slice())?;
                    fs::rename(&tmp, &path)
                });
            write.map_err(|e| {
                BackendError::new(endpoint, BackendErrorKind::Cache, format!("{}: {e}", path.display()))
            })?;
        }
        *guard = Some(bytes.clone());
        Ok(bytes)
    }

    fn through<Resp>(
        &self,
        endpoint: Endpoint,
        key: String,
        call: impl FnOnce() -> Result<Resp, BackendError>,
        encode: impl Fn(&Resp) -> Value,
        decode: impl Fn(&Value) -> Result<Resp, BackendError>,
    ) -> Result<Resp, BackendError> {
        let bytes = self.get_or_fetch(endpoint, &key, || call().map(|r| canonical_bytes(&encode(&r))))?;
        let value: Value = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::new(endpoint, BackendErrorKind::Cache, format!("corrupt entry {key}: {e}")))?;
        decode(&value)
    }
}

/// Chat replies are sampled, so a repeated request (a retry) must be allowed
/// to get a different answer. The n-th occurrence of a request within one
/// `CachedChat` gets its own key, which replays a recorded run faithfully,
/// retries included.
pub struct CachedChat {
    inner: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
    occurrences: Mutex<HashMap<String, u32>>,
}

impl CachedChat {
    pub fn new(inner: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>) -> Self {
        Self {
            inner,
            cache,
            occurrences: Mutex::new(HashMap::new()),
        }
    }
}

impl ChatBackend for CachedChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let base = request_key(&wire::encode_chat_request(req));
        let n = {
            let mut seen = self.occurrences.lock().expect("occurrence map poisoned");
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let key = if n == 0 { base } else { format!("{base}-{n}") };
        self.cache.through(
            Endpoint::Chat,
            key,
            || self.inner.chat(req),
            wire::encode_chat_response,
            wire::decode_chat_response,
        )
    }

    fn identity(&self) -> String {
        format!("cached({})", self.inner.identity())
    }
}

pub struct CachedSegment {
    inner: Arc<dyn SegmentBackend>,
    cache: Arc<ResponseCache>,
}

impl CachedSegment {
    pub fn new(inner: Arc<dyn SegmentBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }
}

impl SegmentBackend for CachedSegment {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError> {
        let resp = self.cache.through(
            Endpoint::Segment,
            request_key(&wire::encode_segment_request(req)),
            || self.inner.segment(req),
            wire::encode_segment_response,
            wire::decode_segment_response,
        )?;
        resp.validate(req.prompts.len())?;
        Ok(resp)
    }

    fn identity(&self) -> String {
        format!("cached({})", self.inner.identity())
    }
}

pub struct CachedEmbed {
    inner: Arc<dyn EmbedBackend>,
    cache: Arc<ResponseCache>,
}

impl CachedEmbed {
    pub fn new(inner: Arc<dyn EmbedBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }
}

impl EmbedBackend for CachedEmbed {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        let resp = self.cache.through(
            Endpoint::Embed,
            request_key(&wire::encode_embed_request(req)),
            || self.inner.embed(req),
            wire::encode_embed_response,
            wire::decode_embed_response,
        )?;
        resp.validate(req.texts.len())?;
        Ok(resp)
    }

    fn identity(&self) -> String {
        format!("cached({})", self.inner.identity())
    }
}
