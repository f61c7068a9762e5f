//! Maps model-emitted class names onto the vocabulary.
//!
//! Names already in the vocabulary match exactly. Any other name is embedded
//! together with every vocabulary name; the most cosine-similar class is
//! accepted only if its similarity is strictly above `sigma_align`, otherwise
//! the name is discarded.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use thiserror::Error;

use crate::backends::{BackendError, EmbedBackend, EmbedRequest};
use crate::reasoner::{RawObservedClasses, ReasonChain, ReasonEntry, ReasoningBundle, Provenance};
use crate::scalar::Scalar;
use crate::vocab::{normalize_class_name, ClassId, ClassVocabulary};

pub const DEFAULT_SIGMA_ALIGN: f64 = 0.5;
pub const DEFAULT_EMBED_MODEL: &str = "all-MiniLM-L6-v2";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("embedding is zero, empty or non-finite")]
    Degenerate,
    #[error("sigma_align {0} outside [-1, 1]")]
    Sigma(f64),
    #[error("observed name {0:?} has no reason chain")]
    MissingChain(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<T>) -> Result<Self, AlignError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::Degenerate);
        }
        let norm = values.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(AlignError::Degenerate);
        }
        let values = values.into_iter().map(|v| T::of(v.wide() / norm)).collect();
        Ok(Self { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self, AlignError> {
        Self::normalized(values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T, AlignError> {
    if a.dim() != b.dim() {
        return Err(AlignError::Dim(a.dim(), b.dim()));
    }
    let dot = a
        .values
        .iter()
        .zip(&b.values)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    Ok(dot.max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision<T> {
    ExactMatch { class_id: ClassId },
    Matched { class_id: ClassId, similarity: T },
    Discarded { best_similarity: T },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentOutcome<T> {
    pub raw_name: String,
    #[serde(flatten)]
    pub decision: Decision<T>,
}

impl<T: Scalar> AlignmentOutcome<T> {
    pub fn class_id(&self) -> Option<ClassId> {
        match self.decision {
            Decision::ExactMatch { class_id } | Decision::Matched { class_id, .. } => Some(class_id),
            Decision::Discarded { .. } => None,
        }
    }
}

/// Index and similarity of the most similar candidate; ties go to the lowest
/// index.
pub fn best_match<T: Scalar>(
    query: &EmbeddingVector<T>,
    candidates: &[Arc<EmbeddingVector<T>>],
) -> Result<Option<(usize, T)>, AlignError> {
    let mut best: Option<(usize, T)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(query, c)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best)
}

fn check_sigma(sigma: f64) -> Result<(), AlignError> {
    if (-1.0..=1.0).contains(&sigma) {
        Ok(())
    } else {
        Err(AlignError::Sigma(sigma))
    }
}

/// Embedding provider with a per-text cache: each distinct string is sent to
/// the backend at most once per `Embedder`.
pub struct Embedder<T> {
    backend: Arc<dyn EmbedBackend>,
    model: String,
    cache: RwLock<HashMap<String, Arc<EmbeddingVector<T>>>>,
    fetch: Mutex<()>,
}

impl<T: Scalar> Embedder<T> {
    pub fn new(backend: Arc<dyn EmbedBackend>, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            cache: RwLock::new(HashMap::new()),
            fetch: Mutex::new(()),
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn identity(&self) -> String {
        format!("{} via {}", self.model, self.backend.identity())
    }

    fn cached(&self, texts: &[&str]) -> Vec<Option<Arc<EmbeddingVector<T>>>> {
        let cache = self.cache.read().expect("embed cache poisoned");
        texts.iter().map(|t| cache.get(*t).cloned()).collect()
    }

    /// Embeddings for `texts`, in order. Missing entries are fetched in one
    /// batch request.
    pub fn embed_all(&self, texts: &[&str]) -> Result<Vec<Arc<EmbeddingVector<T>>>, AlignError> {
        let found = self.cached(texts);
        if found.iter().all(Option::is_some) {
            return Ok(found.into_iter().map(Option::unwrap).collect());
        }
        let _fetching = self.fetch.lock().expect("embed fetch lock poisoned");
        let found = self.cached(texts);
        let mut missing: Vec<String> = Vec::new();
        for (t, f) in texts.iter().zip(&found) {
            if f.is_none() && !missing.iter().any(|m| m == t) {
                missing.push(t.to_string());
            }
        }
        if !missing.is_empty() {
            let req = EmbedRequest {
                model: self.model.clone(),
                texts: missing.clone(),
            };
            let resp = self.backend.embed(&req)?;
            resp.validate(missing.len())?;
            let dim = self
                .cache
                .read()
                .expect("embed cache poisoned")
                .values()
                .next()
                .map(|v| v.dim());
            if let Some(d) = dim {
                if d != resp.dimension {
                    return Err(AlignError::Dim(d, resp.dimension));
                }
            }
            let mut fresh = Vec::with_capacity(missing.len());
            for (t, v) in missing.into_iter().zip(&resp.vectors) {
                fresh.push((t, Arc::new(EmbeddingVector::from_f64(v)?)));
            }
            self.cache.write().expect("embed cache poisoned").extend(fresh);
        }
        let cache = self.cache.read().expect("embed cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

/// Aligns one model-emitted name.
pub fn align_class<T: Scalar>(
    raw: &str,
    vocab: &ClassVocabulary,
    embedder: &Embedder<T>,
    sigma_align: f64,
) -> Result<AlignmentOutcome<T>, AlignError> {
    check_sigma(sigma_align)?;
    let name = normalize_class_name(raw).unwrap_or_else(|_| raw.trim().to_string());
    if let Some(class_id) = vocab.id_of(&name) {
        return Ok(AlignmentOutcome {
            raw_name: name,
            decision: Decision::ExactMatch { class_id },
        });
    }
    let mut texts: Vec<&str> = Vec::with_capacity(vocab.len() + 1);
    texts.push(&name);
    texts.extend(vocab.names().iter().map(String::as_str));
    let vectors = embedder.embed_all(&texts)?;
    let (best, sim) = best_match(&vectors[0], &vectors[1..])?.expect("vocabulary is non-empty");
    let decision = if sim.wide() > sigma_align {
        Decision::Matched {
            class_id: ClassId(best as u32),
            similarity: sim,
        }
    } else {
        Decision::Discarded { best_similarity: sim }
    };
    Ok(AlignmentOutcome { raw_name: name, decision })
}

fn rank<T: Scalar>(d: &Decision<T>) -> f64 {
    match d {
        Decision::ExactMatch { .. } => f64::INFINITY,
        Decision::Matched { similarity, .. } => similarity.wide(),
        Decision::Discarded { .. } => f64::NEG_INFINITY,
    }
}

/// Aligns every observed name and re-keys its chain by class id. Discarded
/// names are dropped; when several names land on one class the most similar
/// wins (exact matches outrank all, earlier names win ties).
pub fn align_bundle<T: Scalar>(
    image_id: &str,
    raw: &RawObservedClasses,
    chains: &BTreeMap<String, ReasonChain>,
    vocab: &ClassVocabulary,
    embedder: &Embedder<T>,
    sigma_align: f64,
) -> Result<(ReasoningBundle, Vec<AlignmentOutcome<T>>), AlignError> {
    check_sigma(sigma_align)?;
    let mut outcomes: Vec<AlignmentOutcome<T>> = Vec::with_capacity(raw.names.len());
    let mut winners: BTreeMap<ClassId, usize> = BTreeMap::new();
    for name in &raw.names {
        if !chains.contains_key(name) {
            return Err(AlignError::MissingChain(name.clone()));
        }
        let outcome = align_class(name, vocab, embedder, sigma_align)?;
        if let Some(id) = outcome.class_id() {
            let idx = outcomes.len();
            match winners.get(&id) {
                Some(&prev) if rank(&outcomes[prev].decision) >= rank(&outcome.decision) => {}
                _ => {
                    winners.insert(id, idx);
                }
            }
        }
        outcomes.push(outcome);
    }
    let mut bundle = ReasoningBundle::empty(image_id);
    for (id, idx) in winners {
        let o: &AlignmentOutcome<T> = &outcomes[idx];
        let similarity = match o.decision {
            Decision::Matched { similarity, .. } => Some(similarity.wide()),
            _ => None,
        };
        bundle.entries.insert(
            id,
            ReasonEntry {
                chain: chains[&o.raw_name].clone(),
                provenance: Provenance::ImageSpecific,
                raw_name: similarity.map(|_| o.raw_name.clone()),
                similarity,
            },
        );
    }
    Ok((bundle, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockEmbed;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::from_f64(x).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -0.2, 0.9]);
        assert_abs_diff_eq!(cosine(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let neg = v(&[-0.3, 0.2, -0.9]);
        assert_abs_diff_eq!(cosine(&a, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])), Err(AlignError::Dim(2, 3)));
        assert!(cosine(&a, &a).unwrap() <= 1.0);
    }

    #[test]
    fn normalization_rejects_degenerate_vectors() {
        assert_eq!(EmbeddingVector::<f32>::normalized(vec![0.0, 0.0]), Err(AlignError::Degenerate));
        assert_eq!(EmbeddingVector::<f32>::normalized(vec![]), Err(AlignError::Degenerate));
        let u = EmbeddingVector::<f32>::normalized(vec![3.0, 4.0]).unwrap();
        assert!((u.norm() - 1.0).abs() < 1e-6);
    }

    fn table() -> BTreeMap<String, Vec<f64>> {
        // couch·sofa = 0.83; blorb is at most 0.31 from anything
        let s = (1.0f64 - 0.83 * 0.83).sqrt();
        BTreeMap::from([
            ("sofa".to_string(), vec![1.0, 0.0, 0.0, 0.0]),
            ("dog".to_string(), vec![0.0, 1.0, 0.0, 0.0]),
            ("tree".to_string(), vec![0.0, 0.0, 1.0, 0.0]),
            ("couch".to_string(), vec![0.83, 0.0, 0.0, s]),
            ("blorb".to_string(), vec![0.31, 0.31, 0.31, (1.0f64 - 3.0 * 0.31 * 0.31).sqrt()]),
            // normalizes exactly to 0.5 everywhere: exact boundary and a three-way tie
            ("half".to_string(), vec![1.0, 1.0, 1.0, 1.0]),
        ])
    }

    fn setup() -> (ClassVocabulary, Arc<MockEmbed>, Embedder<f64>) {
        let vocab = ClassVocabulary::new("v", &["sofa", "dog", "tree"]).unwrap();
        let mock = Arc::new(MockEmbed::new(4, table()).unwrap());
        let e = Embedder::new(mock.clone(), DEFAULT_EMBED_MODEL);
        (vocab, mock, e)
    }

    #[test]
    fn exact_match_short_circuits() {
        let (vocab, mock, e) = setup();
        let o = align_class("Dog", &vocab, &e, 0.5).unwrap();
        assert_eq!(o.decision, Decision::ExactMatch { class_id: ClassId(1) });
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn couch_aligns_to_sofa() {
        let (vocab, _, e) = setup();
        let o = align_class("couch", &vocab, &e, 0.5).unwrap();
        match o.decision {
            Decision::Matched { class_id, similarity } => {
                assert_eq!(class_id, ClassId(0));
                assert_abs_diff_eq!(similarity, 0.83, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn similarity_equal_to_sigma_is_discarded() {
        let (vocab, _, e) = setup();
        let o = align_class("half", &vocab, &e, 0.5).unwrap();
        match o.decision {
            Decision::Discarded { best_similarity } => assert_eq!(best_similarity, 0.5),
            other => panic!("{other:?}"),
        }
        // tie between all three classes resolves to the lowest id
        assert_eq!(
            align_class("half", &vocab, &e, 0.4999).unwrap().decision,
            Decision::Matched { class_id: ClassId(0), similarity: 0.5 }
        );
        assert_eq!(align_class("half", &vocab, &e, 1.5), Err(AlignError::Sigma(1.5)));
    }

    #[test]
    fn each_text_is_embedded_once() {
        let (vocab, mock, e) = setup();
        for _ in 0..3 {
            align_class("couch", &vocab, &e, 0.5).unwrap();
            align_class("blorb", &vocab, &e, 0.5).unwrap();
        }
        let mut seen = mock.texts_seen();
        let total = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(total, seen.len());
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn bundle_alignment_and_collisions() {
        let (vocab, _, e) = setup();
        let chain = |a: &str| ReasonChain::new("b", "s", [a]).unwrap();
        let chains = BTreeMap::from([
            ("dog".to_string(), chain("four legs")),
            ("couch".to_string(), chain("cushions")),
            ("blorb".to_string(), chain("???")),
        ]);
        let raw = RawObservedClasses {
            names: vec!["dog".into(), "couch".into(), "blorb".into()],
        };
        let (b, outcomes) = align_bundle("img", &raw, &chains, &vocab, &e, 0.5).unwrap();
        assert_eq!(b.class_ids().collect::<Vec<_>>(), [ClassId(0), ClassId(1)]);
        assert_eq!(b.entries[&ClassId(0)].chain.attributes(), ["cushions"]);
        assert_eq!(b.entries[&ClassId(0)].raw_name.as_deref(), Some("couch"));
        assert!(matches!(outcomes[2].decision, Decision::Discarded { best_similarity } if best_similarity <= 0.5));

        // exact "sofa" outranks aligned "couch"
        let chains2 = BTreeMap::from([
            ("couch".to_string(), chain("cushions")),
            ("sofa".to_string(), chain("armrests")),
        ]);
        let raw2 = RawObservedClasses {
            names: vec!["couch".into(), "sofa".into()],
        };
        let (b2, _) = align_bundle("img", &raw2, &chains2, &vocab, &e, 0.5).unwrap();
        assert_eq!(b2.entries[&ClassId(0)].chain.attributes(), ["armrests"]);
        assert_eq!(b2.entries[&ClassId(0)].raw_name, None);

        let (empty, o) = align_bundle("img", &RawObservedClasses::default(), &chains, &vocab, &e, 0.5).unwrap();
        assert!(empty.entries.is_empty() && o.is_empty());

        let missing = RawObservedClasses { names: vec!["cat".into()] };
        assert!(matches!(
            align_bundle("img", &missing, &chains, &vocab, &e, 0.5),
            Err(AlignError::MissingChain(_))
        ));
    }

    #[test]
    fn identity_bundle_when_all_names_exact() {
        let (vocab, mock, e) = setup();
        let chain = ReasonChain::new("b", "s", ["x"]).unwrap();
        let chains = BTreeMap::from([("tree".to_string(), chain.clone()), ("dog".to_string(), chain)]);
        let raw = RawObservedClasses {
            names: vec!["tree".into(), "dog".into()],
        };
        let (b, _) = align_bundle("img", &raw, &chains, &vocab, &e, 0.5).unwrap();
        assert_eq!(b.class_ids().collect::<Vec<_>>(), [ClassId(1), ClassId(2)]);
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn works_in_single_precision() {
        let vocab = ClassVocabulary::new("v", &["sofa", "dog", "tree"]).unwrap();
        let e: Embedder<f32> = Embedder::new(Arc::new(MockEmbed::new(4, table()).unwrap()), DEFAULT_EMBED_MODEL);
        let o = align_class("couch", &vocab, &e, 0.5).unwrap();
        assert_eq!(o.class_id(), Some(ClassId(0)));
    }
}
