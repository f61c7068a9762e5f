use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::composer::PromptStyle;
use crate::manifest::DatasetManifest;
use crate::metrics::{ConfusionMatrix, PanopticReport, PqStats, SemanticReport};
use crate::raster::LabelMap;
use crate::reasoner::ReasoningStage;
use crate::vocab::{ClassId, ClassVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackRecord {
    pub image_id: String,
    pub stage: ReasoningStage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub image_id: String,
    pub raw_name: String,
    /// `exact_match`, `matched` or `discarded`.
    pub decision: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_id: Option<ClassId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    /// Classes explained by generic reasoning.
    pub generic_classes: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub prompt_style: PromptStyle,
    pub sigma_align: f64,
    pub tau: f64,
    pub temperature: f64,
    pub retries: u32,
    pub skip_generic: bool,
    pub strict_eq10: bool,
}

/// Contents of `report.json`. Holds nothing run-specific (no timings), so
/// identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub vocabulary_size: usize,
    pub images: usize,
    pub succeeded: usize,
    pub settings: Settings,
    pub semantic: Option<SemanticReport>,
    pub panoptic: Option<PanopticReport>,
    pub per_image: Vec<ImageScore>,
    pub fallbacks: Vec<FallbackRecord>,
    pub alignments: Vec<AlignmentRecord>,
    pub failures: Vec<FailureRecord>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(manifest: &DatasetManifest, config: &RunConfig) -> Self {
        Self {
            dataset: manifest.vocabulary.source_name().to_string(),
            vocabulary_size: manifest.vocabulary.len(),
            images: manifest.records.len(),
            succeeded: 0,
            settings: Settings {
                prompt_style: config.prompt_style,
                sigma_align: config.sigma_align,
                tau: config.tau,
                temperature: config.temperature,
                retries: config.retries,
                skip_generic: config.skip_generic,
                strict_eq10: config.strict_eq10,
            },
            semantic: None,
            panoptic: None,
            per_image: Vec::new(),
            fallbacks: Vec::new(),
            alignments: Vec::new(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub(super) fn add_image(
        &mut self,
        image_id: String,
        confusion: &ConfusionMatrix,
        vocab: &ClassVocabulary,
        fallback: Option<(ReasoningStage, String)>,
        alignments: Vec<AlignmentRecord>,
        generic_classes: usize,
    ) {
        self.succeeded += 1;
        let sem = confusion.report(vocab).ok();
        self.per_image.push(ImageScore {
            image_id: image_id.clone(),
            miou: sem.as_ref().map(|s| s.miou),
            pixel_accuracy: sem.as_ref().map(|s| s.pixel_accuracy),
            generic_classes,
            fallback: fallback.is_some(),
        });
        if let Some((stage, reason)) = fallback {
            self.fallbacks.push(FallbackRecord { image_id, stage, reason });
        }
        self.alignments.extend(alignments);
    }

    pub(super) fn finish(
        &mut self,
        confusion: &ConfusionMatrix,
        pq: &BTreeMap<ClassId, PqStats>,
        manifest: &DatasetManifest,
    ) {
        if self.images == 0 {
            self.notes.push("manifest has no images".into());
        }
        match confusion.report(&manifest.vocabulary) {
            Ok(r) => self.semantic = Some(r),
            Err(e) if self.succeeded > 0 => self.notes.push(format!("semantic metrics: {e}")),
            Err(_) => {}
        }
        if manifest.records.iter().any(|r| r.gt_panoptic.is_some()) {
            match PanopticReport::from_stats(pq, &manifest.vocabulary, &manifest.thing_classes) {
                Ok(r) => self.panoptic = Some(r),
                Err(e) => self.notes.push(format!("panoptic metrics: {e}")),
            }
        }
    }

    /// Per-class rows: IoU columns always, PQ columns when available.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![[
            "class_id", "name", "iou", "gt_pixels", "pred_pixels", "pq", "sq", "rq", "tp", "fp", "fn",
        ]
        .map(String::from)
        .to_vec()];
        let Some(sem) = &self.semantic else { return rows };
        let pq: BTreeMap<ClassId, _> = self
            .panoptic
            .iter()
            .flat_map(|p| p.per_class.iter().map(|c| (c.class_id, c)))
            .collect();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &sem.per_class {
            let p = pq.get(&c.class_id);
            rows.push(vec![
                c.class_id.0.to_string(),
                c.name.clone(),
                opt(c.iou),
                c.gt_pixels.to_string(),
                c.pred_pixels.to_string(),
                opt(p.map(|p| p.pq)),
                opt(p.map(|p| p.sq)),
                opt(p.map(|p| p.rq)),
                opt(p.map(|p| p.stats.tp as f64)),
                opt(p.map(|p| p.stats.fp as f64)),
                opt(p.map(|p| p.stats.fn_ as f64)),
            ]);
        }
        rows
    }

    pub fn write(&self, out: &Path, csv: bool) -> Result<(), (PathBuf, io::Error)> {
        let path = out.join("report.json");
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| (path, e))?;
        if csv {
            let path = out.join("report.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| (path.clone(), io::Error::other(e)))?;
            for row in self.csv_rows() {
                w.write_record(&row).map_err(|e| (path.clone(), io::Error::other(e)))?;
            }
            w.flush().map_err(|e| (path, e))?;
        }
        Ok(())
    }
}

/// Distinct, stable color per class id (golden-angle hue walk).
pub fn palette(class: u32) -> [u8; 3] {
    let h = (class as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.65, if class.is_multiple_of(2) { 0.95 } else { 0.75 });
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

/// Color-coded label map as binary PPM; unlabeled pixels are black.
pub fn overlay_ppm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for &id in labels.ids() {
        if id == labels.ignore_id() {
            out.extend_from_slice(&[0, 0, 0]);
        } else {
            out.extend_from_slice(&palette(id));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct_for_small_vocabularies() {
        let colors: std::collections::BTreeSet<[u8; 3]> = (0..32).map(palette).collect();
        assert_eq!(colors.len(), 32);
    }

    #[test]
    fn overlay_header_and_size() {
        let lm = LabelMap::new(3, 2, vec![0, 1, 2, 0, crate::IGNORE_ID, 1]).unwrap();
        let ppm = overlay_ppm(&lm);
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
        assert_eq!(&ppm[ppm.len() - 6..ppm.len() - 3], &[0, 0, 0]);
    }
}
