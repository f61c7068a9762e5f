//! Panoptic segment sets and their file format: a JSON document listing
//! `{"segment_id","class_id"}` entries plus a 16-bit PGM raster of segment ids
//! (0 = void).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::raster::{decode_pgm16, encode_pgm16, BinaryMask, RasterError};
use crate::vocab::{ClassId, ClassVocabulary};

pub const VOID_SEGMENT: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub segment_id: u32,
    pub class_id: ClassId,
}

/// One instance with an explicit pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInstance {
    pub segment_id: u32,
    pub class_id: ClassId,
    pub mask: BinaryMask,
}

/// Non-overlapping segments over one image, stored as a segment-id raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticPrediction {
    width: u32,
    height: u32,
    segment_ids: Vec<u32>,
    segments: Vec<SegmentInfo>,
}

impl PanopticPrediction {
    /// `segments` are sorted by id; every nonzero raster id must be declared
    /// exactly once.
    pub fn new(width: u32, height: u32, segment_ids: Vec<u32>, mut segments: Vec<SegmentInfo>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || segment_ids.len() != width as usize * height as usize {
            return Err(RasterError::Geometry(format!(
                "{} segment ids for {width}x{height}",
                segment_ids.len()
            )));
        }
        segments.sort();
        for pair in segments.windows(2) {
            if pair[0].segment_id == pair[1].segment_id {
                return Err(RasterError::Range {
                    id: pair[0].segment_id,
                    reason: "segment declared twice".into(),
                });
            }
        }
        if let Some(s) = segments.iter().find(|s| s.segment_id == VOID_SEGMENT) {
            return Err(RasterError::Range {
                id: s.segment_id,
                reason: "segment id 0 is reserved for void".into(),
            });
        }
        if let Some(&id) = segment_ids
            .iter()
            .find(|&&id| id != VOID_SEGMENT && segments.binary_search_by_key(&id, |s| s.segment_id).is_err())
        {
            return Err(RasterError::Range {
                id,
                reason: "raster references an undeclared segment".into(),
            });
        }
        Ok(Self {
            width,
            height,
            segment_ids,
            segments,
        })
    }

    /// Builds a prediction from instance masks; overlapping instances are
    /// rejected.
    pub fn from_instances(width: u32, height: u32, instances: &[SegmentInstance]) -> Result<Self, RasterError> {
        let mut raster = vec![VOID_SEGMENT; width as usize * height as usize];
        let mut infos = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.mask.width() != width || inst.mask.height() != height {
                return Err(RasterError::Geometry(format!("instance {} has wrong geometry", inst.segment_id)));
            }
            for (i, &bit) in inst.mask.bits().iter().enumerate() {
                if bit {
                    if raster[i] != VOID_SEGMENT {
                        return Err(RasterError::Geometry(format!(
                            "instances {} and {} overlap at pixel {i}",
                            raster[i], inst.segment_id
                        )));
                    }
                    raster[i] = inst.segment_id;
                }
            }
            infos.push(SegmentInfo {
                segment_id: inst.segment_id,
                class_id: inst.class_id,
            });
        }
        Self::new(width, height, raster, infos)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn segment_ids(&self) -> &[u32] {
        &self.segment_ids
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn class_of(&self, segment_id: u32) -> Option<ClassId> {
        self.segments
            .binary_search_by_key(&segment_id, |s| s.segment_id)
            .ok()
            .map(|i| self.segments[i].class_id)
    }

    /// Pixel areas keyed by segment id (void excluded).
    pub fn areas(&self) -> BTreeMap<u32, u64> {
        let mut out: BTreeMap<u32, u64> = self.segments.iter().map(|s| (s.segment_id, 0)).collect();
        for &id in &self.segment_ids {
            if id != VOID_SEGMENT {
                *out.get_mut(&id).expect("validated") += 1;
            }
        }
        out
    }

    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<(), RasterError> {
        match self.segments.iter().find(|s| !vocab.contains_id(s.class_id.0)) {
            Some(s) => Err(RasterError::Range {
                id: s.class_id.0,
                reason: format!("segment {} has a class outside the vocabulary", s.segment_id),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PanopticDoc {
    raster: String,
    segments: Vec<SegmentInfo>,
}

/// Writes `path` (JSON) and `<stem>.pgm` next to it.
pub fn save_panoptic(pred: &PanopticPrediction, path: &Path) -> Result<(), RasterError> {
    let raster_path = path.with_extension("pgm");
    let bytes = encode_pgm16(pred.width, pred.height, &pred.segment_ids)?;
    fs::write(&raster_path, bytes).map_err(|source| RasterError::Io {
        path: raster_path.clone(),
        source,
    })?;
    let doc = PanopticDoc {
        raster: raster_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        segments: pred.segments.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("json");
    text.push('\n');
    fs::write(path, text).map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_panoptic(path: &Path) -> Result<PanopticPrediction, RasterError> {
    let text = fs::read_to_string(path).map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: PanopticDoc = serde_json::from_str(&text).map_err(|e| RasterError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let raster_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&doc.raster);
    let bytes = fs::read(&raster_path).map_err(|source| RasterError::Io {
        path: raster_path.clone(),
        source,
    })?;
    let (w, h, ids) = decode_pgm16(&raster_path, &bytes)?;
    PanopticPrediction::new(w, h, ids, doc.segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(2, 2, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn overlapping_instances_are_rejected() {
        let a = SegmentInstance {
            segment_id: 1,
            class_id: ClassId(0),
            mask: mask(&[1, 1, 0, 0]),
        };
        let b = SegmentInstance {
            segment_id: 2,
            class_id: ClassId(1),
            mask: mask(&[0, 1, 1, 0]),
        };
        assert!(PanopticPrediction::from_instances(2, 2, &[a.clone(), b]).is_err());
        let c = SegmentInstance {
            segment_id: 2,
            class_id: ClassId(1),
            mask: mask(&[0, 0, 1, 0]),
        };
        let p = PanopticPrediction::from_instances(2, 2, &[a, c]).unwrap();
        assert_eq!(p.segment_ids(), &[1, 1, 2, 0]);
        assert_eq!(p.areas(), BTreeMap::from([(1, 2), (2, 1)]));
    }

    #[test]
    fn undeclared_and_duplicate_segments() {
        let s = |id| SegmentInfo {
            segment_id: id,
            class_id: ClassId(0),
        };
        assert!(PanopticPrediction::new(2, 1, vec![1, 3], vec![s(1)]).is_err());
        assert!(PanopticPrediction::new(2, 1, vec![1, 1], vec![s(1), s(1)]).is_err());
        assert!(PanopticPrediction::new(2, 1, vec![0, 0], vec![s(0)]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PanopticPrediction::new(
            3,
            1,
            vec![2, 0, 1],
            vec![
                SegmentInfo { segment_id: 2, class_id: ClassId(4) },
                SegmentInfo { segment_id: 1, class_id: ClassId(0) },
            ],
        )
        .unwrap();
        let path = dir.path().join("img.json");
        save_panoptic(&p, &path).unwrap();
        assert!(dir.path().join("img.pgm").exists());
        assert_eq!(load_panoptic(&path).unwrap(), p);
    }
}
