//! Class names and the candidate class set.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reserved label id for unlabeled / unevaluated pixels. Never a class id.
pub const IGNORE_ID: u32 = 65535;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("class name is empty after normalization (raw: {raw:?})")]
    NameEmpty { raw: String },
    #[error("duplicate class name {name:?} (entries {first} and {second})")]
    Duplicate {
        name: String,
        first: usize,
        second: usize,
    },
    #[error("vocabulary is empty")]
    Empty,
    #[error("vocabulary has {0} entries; at most {max} fit below the ignore id", max = IGNORE_ID)]
    TooLarge(usize),
}

/// Canonical form of a class name: lowercase, `_`/`-` read as spaces,
/// whitespace runs collapsed, ends trimmed.
pub fn normalize_class_name(raw: &str) -> Result<String, VocabError> {
    let mapped: String = raw
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c })
        .flat_map(char::to_lowercase)
        .collect();
    let out = mapped.split_whitespace().collect::<Vec<_>>().join(" ");
    if out.is_empty() {
        return Err(VocabError::NameEmpty { raw: raw.to_string() });
    }
    Ok(out)
}

/// Dense class index into a [`ClassVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered, normalized, duplicate-free class names. Order is significant:
/// class ids follow it and downstream tie-breaks prefer lower ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    source_name: String,
    names: Vec<String>,
    index: HashMap<String, ClassId>,
}

impl ClassVocabulary {
    pub fn new<S: AsRef<str>>(source_name: impl Into<String>, raw_names: &[S]) -> Result<Self, VocabError> {
        if raw_names.is_empty() {
            return Err(VocabError::Empty);
        }
        if raw_names.len() >= IGNORE_ID as usize {
            return Err(VocabError::TooLarge(raw_names.len()));
        }
        let mut names = Vec::with_capacity(raw_names.len());
        let mut index = HashMap::with_capacity(raw_names.len());
        for (i, raw) in raw_names.iter().enumerate() {
            let name = normalize_class_name(raw.as_ref())?;
            if let Some(prev) = index.insert(name.clone(), ClassId(i as u32)) {
                return Err(VocabError::Duplicate {
                    name,
                    first: prev.index(),
                    second: i,
                });
            }
            names.push(name);
        }
        Ok(Self {
            source_name: source_name.into(),
            names,
            index,
        })
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id.index()).map(String::as_str)
    }

    /// Exact lookup of an already-normalized name.
    pub fn id_of(&self, normalized: &str) -> Option<ClassId> {
        self.index.get(normalized).copied()
    }

    /// Lookup after normalizing `raw`.
    pub fn lookup(&self, raw: &str) -> Option<ClassId> {
        normalize_class_name(raw).ok().and_then(|n| self.id_of(&n))
    }

    pub fn contains_id(&self, id: u32) -> bool {
        (id as usize) < self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.names.len() as u32).map(ClassId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &str)> + '_ {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (ClassId(i as u32), n.as_str()))
    }

    /// SHA-256 over the ordered names; identifies the vocabulary in cache keys.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_class_name("Sofa ").unwrap(), "sofa");
        assert_eq!(normalize_class_name("dining_table").unwrap(), "dining table");
        assert_eq!(normalize_class_name("  Potted\tPlant ").unwrap(), "potted plant");
        assert_eq!(normalize_class_name("T-Shirt").unwrap(), "t shirt");
    }

    #[test]
    fn empty_names_are_rejected() {
        for raw in ["", "   ", "_-_", "\t\n"] {
            assert!(matches!(normalize_class_name(raw), Err(VocabError::NameEmpty { .. })));
        }
    }

    #[test]
    fn duplicate_after_normalization_names_the_duplicate() {
        let err = ClassVocabulary::new("t", &["Dining Table", "sky", "dining_table"]).unwrap_err();
        assert_eq!(
            err,
            VocabError::Duplicate {
                name: "dining table".into(),
                first: 0,
                second: 2
            }
        );
    }

    #[test]
    fn ids_follow_file_order() {
        let v = ClassVocabulary::new("t", &["sky", "Tree", "road"]).unwrap();
        let got: Vec<_> = v.iter().map(|(id, n)| (id.0, n.to_string())).collect();
        assert_eq!(got, vec![(0, "sky".into()), (1, "tree".into()), (2, "road".into())]);
        assert_eq!(v.lookup(" TREE"), Some(ClassId(1)));
        assert_eq!(v.lookup("car"), None);
    }

    #[test]
    fn hash_depends_on_order() {
        let a = ClassVocabulary::new("t", &["sky", "tree"]).unwrap();
        let b = ClassVocabulary::new("t", &["tree", "sky"]).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in "\\PC{0,24}") {
            if let Ok(once) = normalize_class_name(&raw) {
                prop_assert_eq!(normalize_class_name(&once).unwrap(), once);
            }
        }
    }
}
