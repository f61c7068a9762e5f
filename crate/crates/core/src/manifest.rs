//! Dataset manifests.
//!
//! ```json
//! {"vocabulary": ["sky", "tree"],
//!  "images": [{"id": "a", "image": "images/a.png", "gt_semantic": "gt/a.pgm",
//!              "gt_panoptic": "gt/a.panoptic.json"}]}
//! ```
//!
//! Paths are relative to the manifest's directory. Optional top-level keys:
//! `name` (defaults to the file stem) and `thing_classes` (classes scored as
//! countable instances in panoptic output).

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::panoptic::load_panoptic;
use crate::raster::{load_label_map, load_sidecar, ImageRef, RasterError};
use crate::vocab::{normalize_class_name, ClassId, ClassVocabulary, VocabError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest {path} is not valid: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("record {record:?}: missing or unreadable file {path}: {reason}")]
    Io {
        record: String,
        path: PathBuf,
        reason: String,
    },
    #[error("vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("record {record:?}: {reason}")]
    VocabMismatch { record: String, reason: String },
    #[error("record {record:?}: {source}")]
    Raster {
        record: String,
        #[source]
        source: RasterError,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    #[serde(default)]
    name: Option<String>,
    vocabulary: Vec<String>,
    #[serde(default)]
    thing_classes: Vec<String>,
    images: Vec<RecordDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    id: String,
    image: PathBuf,
    gt_semantic: PathBuf,
    #[serde(default)]
    gt_panoptic: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image: ImageRef,
    pub gt_semantic: PathBuf,
    pub gt_panoptic: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub vocabulary: ClassVocabulary,
    pub thing_classes: BTreeSet<ClassId>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn has_panoptic(&self) -> bool {
        self.records.iter().any(|r| r.gt_panoptic.is_some())
    }
}

fn require_file(record: &str, path: &Path) -> Result<(), ManifestError> {
    match fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(ManifestError::Io {
            record: record.to_string(),
            path: path.to_path_buf(),
            reason: "not a regular file".into(),
        }),
        Err(e) => Err(ManifestError::Io {
            record: record.to_string(),
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

/// Loads and fully validates a manifest: every referenced file exists and all
/// ground truth agrees with the vocabulary.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| ManifestError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let name = doc.name.unwrap_or_else(|| {
        path.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string()
    });
    let vocabulary = ClassVocabulary::new(name, &doc.vocabulary)?;

    let mut thing_classes = BTreeSet::new();
    for raw in &doc.thing_classes {
        let id = vocabulary.lookup(raw).ok_or_else(|| ManifestError::VocabMismatch {
            record: "thing_classes".into(),
            reason: format!("{raw:?} is not in the vocabulary"),
        })?;
        thing_classes.insert(id);
    }

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(doc.images.len());
    for rec in doc.images {
        if !seen.insert(rec.id.clone()) {
            return Err(ManifestError::Format {
                path: path.to_path_buf(),
                reason: format!("duplicate image id {:?}", rec.id),
            });
        }
        let image_path = base.join(&rec.image);
        let gt_path = base.join(&rec.gt_semantic);
        require_file(&rec.id, &image_path)?;
        require_file(&rec.id, &gt_path)?;
        let raster = |source| ManifestError::Raster {
            record: rec.id.clone(),
            source,
        };
        let gt = load_label_map(&gt_path).map_err(raster)?;
        gt.validate(&vocabulary).map_err(|e| ManifestError::VocabMismatch {
            record: rec.id.clone(),
            reason: e.to_string(),
        })?;
        if let Some(side) = load_sidecar(&gt_path).map_err(raster)? {
            for (&id, label) in &side.labels {
                let ok = vocabulary.name(ClassId(id)).is_some_and(|n| {
                    normalize_class_name(label).is_ok_and(|l| l == n)
                });
                if !ok {
                    return Err(ManifestError::VocabMismatch {
                        record: rec.id.clone(),
                        reason: format!("sidecar maps id {id} to {label:?}, vocabulary disagrees"),
                    });
                }
            }
        }
        let gt_panoptic = match rec.gt_panoptic {
            Some(p) => {
                let p = base.join(p);
                require_file(&rec.id, &p)?;
                let pan = load_panoptic(&p).map_err(raster)?;
                pan.validate(&vocabulary).map_err(|e| ManifestError::VocabMismatch {
                    record: rec.id.clone(),
                    reason: e.to_string(),
                })?;
                if (pan.width(), pan.height()) != (gt.width(), gt.height()) {
                    return Err(raster(RasterError::Geometry(
                        "panoptic raster differs in size from the semantic raster".into(),
                    )));
                }
                Some(p)
            }
            None => None,
        };
        let image = ImageRef::new(rec.id.clone(), image_path, gt.width(), gt.height()).map_err(raster)?;
        records.push(ImageRecord {
            image,
            gt_semantic: gt_path,
            gt_panoptic,
        });
    }
    Ok(DatasetManifest {
        path: path.to_path_buf(),
        vocabulary,
        thing_classes,
        records,
    })
}
