//! Deterministic stand-ins for the model services.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, EmbedRequest, EmbedResponse, Endpoint,
    SegmentBackend, SegmentRequest, SegmentResponse,
};
use crate::raster::LogitMap;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    /// Simulated transport failure.
    Fail(String),
}

/// A chat rule matches when every condition holds. Its replies are consumed
/// in order; the last one repeats once the list is exhausted.
#[derive(Debug, Clone, Default)]
pub struct ChatRule {
    /// Required sha256 (hex) of the attached image bytes.
    pub image_sha256: Option<String>,
    /// Whether an image must (true) or must not (false) be attached.
    pub has_image: Option<bool>,
    /// Substrings the request text must contain.
    pub contains: Vec<String>,
    pub replies: Vec<MockReply>,
}

impl ChatRule {
    fn matches(&self, text: &str, image_sha: Option<&str>) -> bool {
        if let Some(want) = self.has_image {
            if want != image_sha.is_some() {
                return false;
            }
        }
        if let Some(sha) = &self.image_sha256 {
            if image_sha != Some(sha.as_str()) {
                return false;
            }
        }
        self.contains.iter().all(|c| text.contains(c.as_str()))
    }
}

/// Scripted chat model. Requests are logged for traffic assertions.
pub struct MockChat {
    name: String,
    rules: Vec<ChatRule>,
    cursors: Mutex<Vec<usize>>,
    /// When true, an exhausted rule fails instead of repeating its last reply.
    strict_sequence: bool,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockChat {
    pub fn with_rules(name: impl Into<String>, rules: Vec<ChatRule>) -> Self {
        let n = rules.len();
        Self {
            name: name.into(),
            rules,
            cursors: Mutex::new(vec![0; n]),
            strict_sequence: false,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Replies returned verbatim in order regardless of the request; fails
    /// once the script runs out.
    pub fn sequence(replies: Vec<MockReply>) -> Self {
        let mut m = Self::with_rules(
            "sequence",
            vec![ChatRule {
                replies,
                ..ChatRule::default()
            }],
        );
        m.strict_sequence = true;
        m
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("log poisoned").len()
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        self.log.lock().expect("log poisoned").push(req.clone());
        let text = req.text();
        let image_sha = req.image_bytes().map(sha256_hex);
        let idx = self
            .rules
            .iter()
            .position(|r| r.matches(&text, image_sha.as_deref()))
            .ok_or_else(|| BackendError::transport(Endpoint::Chat, "mock: no rule matches request"))?;
        let rule = &self.rules[idx];
        let reply = {
            let mut cursors = self.cursors.lock().expect("cursor poisoned");
            let at = cursors[idx];
            cursors[idx] += 1;
            match rule.replies.get(at) {
                Some(r) => r.clone(),
                None if self.strict_sequence => {
                    return Err(BackendError::transport(Endpoint::Chat, "mock: script exhausted"))
                }
                None => rule
                    .replies
                    .last()
                    .cloned()
                    .ok_or_else(|| BackendError::transport(Endpoint::Chat, "mock: rule has no replies"))?,
            }
        };
        match reply {
            MockReply::Text(text) => Ok(ChatResponse {
                text,
                finish_reason: "stop".into(),
            }),
            MockReply::Fail(msg) => Err(BackendError::transport(Endpoint::Chat, msg)),
        }
    }

    fn identity(&self) -> String {
        format!("mock-chat:{}", self.name)
    }
}

/// Labeled regions of one fixture image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentImageFixture {
    pub image_id: String,
    pub image_sha256: String,
    pub width: u32,
    pub height: u32,
    /// `(label, row-major membership)`; labels are normalized class names.
    pub regions: Vec<(String, Vec<bool>)>,
}

/// Procedural segmentor. For each prompt, the regions whose label appears in
/// the prompt as a whole word are candidates; a seeded hash of
/// `(image id, prompt)` picks one and the map is `high` inside it, `low`
/// elsewhere. Prompts naming no region get `low` everywhere.
pub struct MockSegment {
    images: Vec<SegmentImageFixture>,
    seed: u64,
    pub high: f32,
    pub low: f32,
    calls: AtomicU64,
}

impl MockSegment {
    pub fn new(images: Vec<SegmentImageFixture>, seed: u64) -> Self {
        Self {
            images,
            seed,
            high: 4.0,
            low: -4.0,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn pick(&self, image_id: &str, prompt: &str, n: usize) -> usize {
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(image_id.as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        let d = h.finalize();
        let v = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
        (v % n as u64) as usize
    }

    pub fn map_for(&self, fixture: &SegmentImageFixture, prompt: &str) -> LogitMap<f32> {
        let lowered = prompt.to_lowercase();
        let candidates: Vec<&(String, Vec<bool>)> = fixture
            .regions
            .iter()
            .filter(|(label, _)| contains_word(&lowered, label))
            .collect();
        let n = fixture.width as usize * fixture.height as usize;
        let values = match candidates.len() {
            0 => vec![self.low; n],
            k => {
                let (_, region) = candidates[self.pick(&fixture.image_id, prompt, k)];
                region.iter().map(|&b| if b { self.high } else { self.low }).collect()
            }
        };
        LogitMap::new(fixture.width, fixture.height, values).expect("fixture geometry is consistent")
    }
}

/// Whole-word containment: `word` occurs in `haystack` bounded by
/// non-alphanumeric characters or the string ends.
pub fn contains_word(haystack: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    let mut start = 0;
    while let Some(off) = haystack[start..].find(word) {
        let at = start + off;
        let end = at + word.len();
        let before_ok = haystack[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        start = at + haystack[at..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

impl SegmentBackend for MockSegment {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let sha = sha256_hex(&req.image);
        let fixture = self
            .images
            .iter()
            .find(|f| f.image_sha256 == sha)
            .ok_or_else(|| BackendError::schema(Endpoint::Segment, format!("mock: unknown image {sha}")))?;
        Ok(SegmentResponse {
            maps: req.prompts.iter().map(|p| self.map_for(fixture, p)).collect(),
        })
    }

    fn identity(&self) -> String {
        format!("mock-segment:seed={}", self.seed)
    }
}

/// Table-driven embedder. Unknown strings get a unit vector drawn from a
/// generator seeded by the string's hash.
pub struct MockEmbed {
    dimension: usize,
    table: BTreeMap<String, Vec<f64>>,
    calls: AtomicU64,
    texts_seen: Mutex<Vec<String>>,
}

impl MockEmbed {
    pub fn new(dimension: usize, table: BTreeMap<String, Vec<f64>>) -> Result<Self, BackendError> {
        if dimension == 0 {
            return Err(BackendError::schema(Endpoint::Embed, "dimension must be positive"));
        }
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dimension) {
            return Err(BackendError::schema(
                Endpoint::Embed,
                format!("table vector for {k:?} has length {}, expected {dimension}", v.len()),
            ));
        }
        Ok(Self {
            dimension,
            table,
            calls: AtomicU64::new(0),
            texts_seen: Mutex::new(Vec::new()),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every text received, in arrival order.
    pub fn texts_seen(&self) -> Vec<String> {
        self.texts_seen.lock().expect("poisoned").clone()
    }

    pub fn hashed_vector(&self, text: &str) -> Vec<f64> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            let v: Vec<f64> = (0..self.dimension).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        self.table
            .get(text)
            .cloned()
            .unwrap_or_else(|| self.hashed_vector(text))
    }
}

impl EmbedBackend for MockEmbed {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts_seen
            .lock()
            .expect("poisoned")
            .extend(req.texts.iter().cloned());
        Ok(EmbedResponse {
            dimension: self.dimension,
            vectors: req.texts.iter().map(|t| self.vector(t)).collect(),
        })
    }

    fn identity(&self) -> String {
        format!("mock-embed:dim={},entries={}", self.dimension, self.table.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatMessage, ContentPart};

    fn req(text: &str, image: Option<&[u8]>) -> ChatRequest {
        let mut parts = vec![ContentPart::Text(text.into())];
        if let Some(b) = image {
            parts.push(ContentPart::Image {
                mime: "image/png".into(),
                data: b.to_vec(),
            });
        }
        ChatRequest {
            model: "m".into(),
            temperature: 0.7,
            messages: vec![ChatMessage::user(parts)],
        }
    }

    #[test]
    fn sequence_replies_verbatim_in_order() {
        let m = MockChat::sequence(vec![MockReply::Text("one".into()), MockReply::Text("two".into())]);
        assert_eq!(m.chat(&req("a", None)).unwrap().text, "one");
        assert_eq!(m.chat(&req("b", None)).unwrap().text, "two");
        assert!(m.chat(&req("c", None)).is_err());
        assert_eq!(m.call_count(), 3);
    }

    #[test]
    fn rules_match_on_image_and_text() {
        let img = b"pixels";
        let m = MockChat::with_rules(
            "t",
            vec![
                ChatRule {
                    image_sha256: Some(sha256_hex(img)),
                    contains: vec!["describe".into()],
                    replies: vec![MockReply::Fail("flaky".into()), MockReply::Text("a room".into())],
                    ..ChatRule::default()
                },
                ChatRule {
                    has_image: Some(false),
                    replies: vec![MockReply::Text("generic".into())],
                    ..ChatRule::default()
                },
            ],
        );
        assert!(m.chat(&req("describe", Some(img))).is_err());
        assert_eq!(m.chat(&req("describe", Some(img))).unwrap().text, "a room");
        assert_eq!(m.chat(&req("describe", Some(img))).unwrap().text, "a room");
        assert_eq!(m.chat(&req("anything", None)).unwrap().text, "generic");
        assert!(m.chat(&req("anything", Some(b"other"))).is_err());
    }

    #[test]
    fn whole_word_matching() {
        assert!(contains_word("a photo of sofa that has cushions", "sofa"));
        assert!(!contains_word("a photo of sofabed", "sofa"));
        assert!(contains_word("potted plant.", "potted plant"));
        assert!(!contains_word("carpet", "car"));
        assert!(contains_word("carpet, car", "car"));
    }

    fn fixture() -> SegmentImageFixture {
        SegmentImageFixture {
            image_id: "img".into(),
            image_sha256: sha256_hex(b"img"),
            width: 2,
            height: 2,
            regions: vec![
                ("sofa".into(), vec![true, true, false, false]),
                ("sky".into(), vec![false, false, true, true]),
            ],
        }
    }

    #[test]
    fn segment_mock_is_deterministic_and_prompt_driven() {
        let m = MockSegment::new(vec![fixture()], 7);
        let r = SegmentRequest {
            image_mime: "image/png".into(),
            image: b"img".to_vec(),
            prompts: vec!["a photo of sofa".into(), "a photo of dog".into(), "a photo of sky".into()],
        };
        let a = m.segment(&r).unwrap();
        let b = m.segment(&r).unwrap();
        assert_eq!(a, b);
        a.validate(3).unwrap();
        assert_eq!(a.maps[0].values(), &[4.0, 4.0, -4.0, -4.0]);
        assert_eq!(a.maps[1].values(), &[-4.0; 4]);
        assert_eq!(a.maps[2].values(), &[-4.0, -4.0, 4.0, 4.0]);
        let unknown = SegmentRequest {
            image: b"nope".to_vec(),
            ..r
        };
        assert!(m.segment(&unknown).is_err());
    }

    #[test]
    fn embed_table_and_hashed_fallback() {
        let table = BTreeMap::from([("sofa".to_string(), vec![0.6, 0.8, 0.0])]);
        let m = MockEmbed::new(3, table).unwrap();
        let r = m
            .embed(&EmbedRequest {
                model: "m".into(),
                texts: vec!["sofa".into(), "blorb".into()],
            })
            .unwrap();
        assert_eq!(r.vectors[0], vec![0.6, 0.8, 0.0]);
        let norm = r.vectors[1].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(m.vector("blorb"), r.vectors[1]);
        assert!(MockEmbed::new(2, BTreeMap::from([("x".to_string(), vec![1.0])])).is_err());
    }
}
