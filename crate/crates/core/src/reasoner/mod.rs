//! Step-by-step visual reasoning through a chat multimodal model.
//!
//! Image-specific reasoning runs three dependent requests per image
//! (describe, select classes, explain each selected class). Classes the model
//! did not report get image-independent generic reasoning, and the two
//! are merged so every vocabulary class carries exactly one reason chain.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend};
use crate::raster::{ImageRef, RasterError};
use crate::vocab::{ClassId, ClassVocabulary};

mod generic;
mod parse;
mod prompts;
mod trace;

pub use generic::GenericReasoner;
pub use parse::{parse_observed_classes, parse_reason_chains};
pub use prompts::{
    build_class_filter_prompt, build_description_prompt, build_generic_reason_prompt, build_reason_prompt,
    generic_class_line, CLASS_FILTER_MARKER, DESCRIBE_MARKER, GENERIC_MARKER, REASON_MARKER,
};
pub use trace::{read_trace, trace_records, write_trace, TraceRecord};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_RETRIES: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonerError {
    #[error("image description is empty")]
    EmptyDescription,
    #[error("no observed classes to explain")]
    EmptyObserved,
    #[error("observed class {0:?} listed twice")]
    DuplicateObserved(String),
    #[error("unparseable reply: {0}")]
    Parse(String),
    #[error("reply explains {} class(es); missing {missing:?}", parsed.len())]
    PartialParse {
        parsed: BTreeMap<String, ReasonChain>,
        missing: Vec<String>,
    },
    #[error("invalid reason chain: {0}")]
    InvalidChain(String),
    #[error("cannot merge reasoning: {0}")]
    Merge(String),
    #[error("retries must be at least 1")]
    NoRetries,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub model: String,
    pub temperature: f64,
    /// Attempts per step (parse failures and transport failures both count).
    pub retries: u32,
    /// Issue one Step-3 request per observed class instead of one batched
    /// request.
    pub step3_per_class: bool,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            model: "Qwen2.5-VL-72B-Instruct-AWQ".into(),
            temperature: DEFAULT_TEMPERATURE,
            retries: DEFAULT_RETRIES,
            step3_per_class: false,
        }
    }
}

/// Image bytes as forwarded to the services.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub id: String,
    pub mime: String,
    pub bytes: Arc<Vec<u8>>,
}

impl ImageData {
    pub fn load(image: &ImageRef) -> Result<Self, RasterError> {
        Ok(Self {
            id: image.id.clone(),
            mime: image.mime().to_string(),
            bytes: Arc::new(image.read_bytes()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription(String);

impl ImageDescription {
    pub fn new(text: impl Into<String>) -> Result<Self, ReasonerError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ReasonerError::EmptyDescription);
        }
        Ok(Self(text.trim().to_string()))
    }

    /// Skips the non-empty check; for exercising precondition errors.
    pub fn unchecked(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

/// Class names as the model emitted them (normalized, possibly outside the
/// vocabulary).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RawObservedClasses {
    pub names: Vec<String>,
}

/// Coarse-to-fine explanation of one class: broad category, sub-category,
/// distinguishing attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonChain {
    broad: String,
    sub: String,
    attributes: Vec<String>,
}

impl ReasonChain {
    /// Trims every field and drops repeated attributes (first occurrence
    /// kept).
    pub fn new<S: AsRef<str>>(broad: &str, sub: &str, attributes: impl IntoIterator<Item = S>) -> Result<Self, ReasonerError> {
        let broad = broad.trim();
        let sub = sub.trim();
        if broad.is_empty() || sub.is_empty() {
            return Err(ReasonerError::InvalidChain("broad and sub categories must be non-empty".into()));
        }
        let mut attrs: Vec<String> = Vec::new();
        for a in attributes {
            let a = a.as_ref().trim();
            if a.is_empty() {
                return Err(ReasonerError::InvalidChain("empty attribute".into()));
            }
            if !attrs.iter().any(|x| x == a) {
                attrs.push(a.to_string());
            }
        }
        if attrs.is_empty() {
            return Err(ReasonerError::InvalidChain("no attributes".into()));
        }
        Ok(Self {
            broad: broad.to_string(),
            sub: sub.to_string(),
            attributes: attrs,
        })
    }

    pub fn broad(&self) -> &str {
        &self.broad
    }

    pub fn sub(&self) -> &str {
        &self.sub
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ImageSpecific,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonEntry {
    pub chain: ReasonChain,
    pub provenance: Provenance,
    /// Name the model used when it differs from the vocabulary name.
    pub raw_name: Option<String>,
    /// Cosine similarity of an embedding-aligned name.
    pub similarity: Option<f64>,
}

impl ReasonEntry {
    pub fn generic(chain: ReasonChain) -> Self {
        Self {
            chain,
            provenance: Provenance::Generic,
            raw_name: None,
            similarity: None,
        }
    }
}

/// Per-class reasoning for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningBundle {
    pub image_id: String,
    pub entries: BTreeMap<ClassId, ReasonEntry>,
    pub description: Option<ImageDescription>,
}

impl ReasoningBundle {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            entries: BTreeMap::new(),
            description: None,
        }
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn covers(&self, vocab: &ClassVocabulary) -> bool {
        self.entries.len() == vocab.len() && vocab.ids().all(|id| self.entries.contains_key(&id))
    }

    pub fn generic_from(image_id: impl Into<String>, chains: BTreeMap<ClassId, ReasonChain>) -> Self {
        Self {
            image_id: image_id.into(),
            entries: chains.into_iter().map(|(id, c)| (id, ReasonEntry::generic(c))).collect(),
            description: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningStage {
    Description,
    ClassFilter,
    Reasons,
}

/// Result of image-specific reasoning.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageReasoning {
    Complete {
        description: ImageDescription,
        observed: RawObservedClasses,
        chains: BTreeMap<String, ReasonChain>,
        /// Observed names the model never explained; they are left to generic
        /// reasoning.
        unexplained: Vec<String>,
    },
    /// The model could not be brought to produce a usable answer; the image is
    /// handled with generic reasoning only.
    Fallback {
        stage: ReasoningStage,
        reason: String,
        description: Option<ImageDescription>,
    },
}

enum StepFailure<T> {
    /// Parse failed on the last attempt; carries the best partial result seen.
    Parse(String, Option<T>),
    Backend(BackendError),
}

/// Runs `step` up to `attempts` times. `parse` may return a partial result
/// alongside an error; the largest partial (by `score`) is kept.
fn with_retries<T>(
    attempts: u32,
    mut step: impl FnMut() -> Result<String, BackendError>,
    parse: impl Fn(&str) -> Result<T, (ReasonerError, Option<T>)>,
    score: impl Fn(&T) -> usize,
) -> Result<T, StepFailure<T>> {
    let mut best: Option<T> = None;
    let mut last: Option<StepFailure<T>> = None;
    for attempt in 1..=attempts {
        match step() {
            Err(mut e) => {
                e.attempts = attempt;
                log::debug!("reasoning request failed (attempt {attempt}/{attempts}): {e}");
                last = Some(StepFailure::Backend(e));
            }
            Ok(text) => match parse(&text) {
                Ok(v) => return Ok(v),
                Err((e, partial)) => {
                    log::debug!("reply rejected (attempt {attempt}/{attempts}): {e}");
                    if let Some(p) = partial {
                        if best.as_ref().is_none_or(|b| score(&p) > score(b)) {
                            best = Some(p);
                        }
                    }
                    last = Some(StepFailure::Parse(e.to_string(), None));
                }
            },
        }
    }
    match last.expect("attempts >= 1") {
        StepFailure::Parse(msg, _) => Err(StepFailure::Parse(msg, best)),
        StepFailure::Backend(e) => match best {
            Some(b) => Err(StepFailure::Parse(e.to_string(), Some(b))),
            None => Err(StepFailure::Backend(e)),
        },
    }
}

/// Describe → select classes → explain, each step conditioned on the previous
/// one. Unusable replies are re-requested up to `config.retries` times; if the
/// model still fails at any step the result is [`ImageReasoning::Fallback`].
/// Transport failures that persist through every attempt are errors.
pub fn run_image_specific_reasoning(
    chat: &dyn ChatBackend,
    image: &ImageData,
    vocab: &ClassVocabulary,
    config: &ReasonerConfig,
) -> Result<ImageReasoning, ReasonerError> {
    if config.retries == 0 {
        return Err(ReasonerError::NoRetries);
    }
    let fallback = |stage, reason: String, description: Option<ImageDescription>| {
        log::info!("image {}: falling back to generic reasoning ({stage:?}: {reason})", image.id);
        Ok(ImageReasoning::Fallback {
            stage,
            reason,
            description,
        })
    };

    // Step 1
    let req = build_description_prompt(image, config);
    let description = match with_retries(
        config.retries,
        || chat.chat(&req).map(|r| r.text),
        |t| ImageDescription::new(t).map_err(|e| (e, None)),
        |_| 0,
    ) {
        Ok(d) => d,
        Err(StepFailure::Backend(e)) => return Err(e.into()),
        Err(StepFailure::Parse(msg, _)) => return fallback(ReasoningStage::Description, msg, None),
    };

    // Step 2
    let req = build_class_filter_prompt(image, &description, vocab, config)?;
    let observed = match with_retries(
        config.retries,
        || chat.chat(&req).map(|r| r.text),
        |t| parse_observed_classes(t).map_err(|e| (e, None)),
        |_| 0,
    ) {
        Ok(o) => o,
        Err(StepFailure::Backend(e)) => return Err(e.into()),
        Err(StepFailure::Parse(msg, _)) => {
            return fallback(ReasoningStage::ClassFilter, msg, Some(description))
        }
    };

    // Step 3
    let groups: Vec<Vec<String>> = if config.step3_per_class {
        observed.names.iter().map(|n| vec![n.clone()]).collect()
    } else {
        vec![observed.names.clone()]
    };
    let mut chains = BTreeMap::new();
    for group in &groups {
        let req = build_reason_prompt(image, group, config)?;
        let outcome = with_retries(
            config.retries,
            || chat.chat(&req).map(|r| r.text),
            |t| match parse_reason_chains(t, group) {
                Ok(m) => Ok(m),
                Err(ReasonerError::PartialParse { parsed, missing }) => Err((
                    ReasonerError::PartialParse {
                        parsed: parsed.clone(),
                        missing,
                    },
                    Some(parsed),
                )),
                Err(e) => Err((e, None)),
            },
            BTreeMap::len,
        );
        match outcome {
            Ok(m) => chains.extend(m),
            Err(StepFailure::Parse(_, Some(partial))) => chains.extend(partial),
            Err(StepFailure::Parse(msg, None)) if config.step3_per_class => {
                log::debug!("image {}: no reasons for {group:?}: {msg}", image.id);
            }
            Err(StepFailure::Parse(msg, None)) => {
                return fallback(ReasoningStage::Reasons, msg, Some(description))
            }
            Err(StepFailure::Backend(e)) => return Err(e.into()),
        }
    }
    if chains.is_empty() {
        return fallback(
            ReasoningStage::Reasons,
            "no observed class was explained".into(),
            Some(description),
        );
    }
    let unexplained = observed
        .names
        .iter()
        .filter(|n| !chains.contains_key(*n))
        .cloned()
        .collect();
    Ok(ImageReasoning::Complete {
        description,
        observed,
        chains,
        unexplained,
    })
}

/// Union of aligned image-specific and generic reasoning. The two must be
/// disjoint and together cover the vocabulary exactly.
pub fn merge_reasoning(
    aligned: &ReasoningBundle,
    generic: &ReasoningBundle,
    vocab: &ClassVocabulary,
) -> Result<ReasoningBundle, ReasonerError> {
    if aligned.image_id != generic.image_id {
        return Err(ReasonerError::Merge(format!(
            "bundles belong to different images ({} vs {})",
            aligned.image_id, generic.image_id
        )));
    }
    let mut entries = BTreeMap::new();
    for (&id, e) in aligned.entries.iter().chain(&generic.entries) {
        if !vocab.contains_id(id.0) {
            return Err(ReasonerError::Merge(format!("class id {id} is not in the vocabulary")));
        }
        if entries.insert(id, e.clone()).is_some() {
            return Err(ReasonerError::Merge(format!(
                "class {:?} has both image-specific and generic reasoning",
                vocab.name(id).unwrap_or("?")
            )));
        }
    }
    let missing: Vec<&str> = vocab
        .iter()
        .filter(|(id, _)| !entries.contains_key(id))
        .map(|(_, n)| n)
        .collect();
    if !missing.is_empty() {
        return Err(ReasonerError::Merge(format!("no reasoning for {missing:?}")));
    }
    Ok(ReasoningBundle {
        image_id: aligned.image_id.clone(),
        entries,
        description: aligned.description.clone(),
    })
}
