//! Per-class mask ensembling and resolution into label maps and panoptic
//! segments.
//!
//! Each class's N logit maps are averaged per pixel, squashed with the
//! logistic function and thresholded. Semantic resolution takes the per-pixel
//! argmax over class scores; the strict mode only lets classes whose binary
//! mask fires compete and leaves the rest unlabeled.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panoptic::{PanopticPrediction, SegmentInfo, VOID_SEGMENT};
use crate::raster::{BinaryMask, LabelMap, MaskStack, RasterError};
use crate::scalar::{compensated_sum, sigmoid, Scalar};
use crate::vocab::{ClassId, ClassVocabulary, IGNORE_ID};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("class {0:?}: empty mask stack")]
    EmptyStack(ClassId),
    #[error("class {class:?}: non-finite logit at pixel {pixel}")]
    Numeric { class: ClassId, pixel: usize },
    #[error("geometry mismatch: {0}")]
    Geom(String),
    #[error("coverage: {0}")]
    Coverage(String),
    #[error("tau {0} outside (0, 1)")]
    Tau(f64),
}

impl From<RasterError> for EnsembleError {
    fn from(e: RasterError) -> Self {
        EnsembleError::Geom(e.to_string())
    }
}

/// Per-pixel ensemble scores in [0, 1] for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScoreMap<T> {
    pub class_id: ClassId,
    width: u32,
    height: u32,
    scores: Vec<T>,
}

impl<T: Scalar> ClassScoreMap<T> {
    pub fn new(class_id: ClassId, width: u32, height: u32, scores: Vec<T>) -> Result<Self, EnsembleError> {
        if scores.len() != width as usize * height as usize {
            return Err(EnsembleError::Geom(format!("{} scores for {width}x{height}", scores.len())));
        }
        if let Some(pixel) = scores.iter().position(|s| !(s.wide() >= 0.0 && s.wide() <= 1.0)) {
            return Err(EnsembleError::Numeric { class: class_id, pixel });
        }
        Ok(Self {
            class_id,
            width,
            height,
            scores,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn threshold(&self, tau: f64) -> BinaryMask {
        let t = T::of(tau);
        let bits = self.scores.iter().map(|&s| s > t).collect();
        BinaryMask::new(self.width, self.height, bits).expect("geometry checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEnsemble<T> {
    pub scores: ClassScoreMap<T>,
    pub mask: BinaryMask,
}

pub fn check_tau(tau: f64) -> Result<(), EnsembleError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(EnsembleError::Tau(tau))
    }
}

/// Mean in compensated f64 summation, then the logistic function, then a
/// strict threshold at `tau`.
pub fn ensemble<T: Scalar>(stack: &MaskStack<T>, tau: f64) -> Result<ClassEnsemble<T>, EnsembleError> {
    check_tau(tau)?;
    let class = stack.class_id();
    let maps = stack.maps();
    if maps.is_empty() {
        return Err(EnsembleError::EmptyStack(class));
    }
    let n = maps.len() as f64;
    let pixels = stack.width() as usize * stack.height() as usize;
    let mut scores = Vec::with_capacity(pixels);
    let mut column = Vec::with_capacity(maps.len());
    for p in 0..pixels {
        column.clear();
        column.extend(maps.iter().map(|m| m.values()[p].wide()));
        if column.iter().any(|v| !v.is_finite()) {
            return Err(EnsembleError::Numeric { class, pixel: p });
        }
        // a fixed summation order makes the result independent of map order
        column.sort_by(f64::total_cmp);
        scores.push(T::of(sigmoid(compensated_sum(column.iter().copied()) / n)));
    }
    let scores = ClassScoreMap::new(class, stack.width(), stack.height(), scores)?;
    let mask = scores.threshold(tau);
    Ok(ClassEnsemble { scores, mask })
}

/// Ensembles every class in parallel; output is ordered by class id.
pub fn ensemble_all<T: Scalar>(stacks: &[MaskStack<T>], tau: f64) -> Result<Vec<ClassEnsemble<T>>, EnsembleError> {
    check_tau(tau)?;
    let mut out: Vec<ClassEnsemble<T>> = stacks
        .par_iter()
        .map(|s| ensemble(s, tau))
        .collect::<Result<_, _>>()?;
    out.sort_by_key(|e| e.scores.class_id);
    Ok(out)
}

/// Checks that `maps` holds exactly one entry per vocabulary class with shared
/// geometry and returns them ordered by class id.
fn by_class<'a, T: Scalar>(
    maps: &'a [ClassScoreMap<T>],
    vocab: &ClassVocabulary,
) -> Result<(u32, u32, Vec<&'a ClassScoreMap<T>>), EnsembleError> {
    let first = maps
        .first()
        .ok_or_else(|| EnsembleError::Coverage("no score maps".into()))?;
    let (w, h) = (first.width, first.height);
    let mut slots: Vec<Option<&ClassScoreMap<T>>> = vec![None; vocab.len()];
    for m in maps {
        if (m.width, m.height) != (w, h) {
            return Err(EnsembleError::Geom(format!(
                "class {} is {}x{}, expected {w}x{h}",
                m.class_id.0, m.width, m.height
            )));
        }
        let slot = slots
            .get_mut(m.class_id.0 as usize)
            .ok_or_else(|| EnsembleError::Coverage(format!("class id {} not in vocabulary", m.class_id.0)))?;
        if slot.replace(m).is_some() {
            return Err(EnsembleError::Coverage(format!("class id {} given twice", m.class_id.0)));
        }
    }
    let ordered = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| EnsembleError::Coverage(format!("no scores for class {:?}", vocab.name(ClassId(i as u32))))))
        .collect::<Result<_, _>>()?;
    Ok((w, h, ordered))
}

fn argmax_labels<T: Scalar>(
    w: u32,
    h: u32,
    ordered: &[&ClassScoreMap<T>],
    eligible: impl Fn(usize, usize) -> bool,
) -> Result<LabelMap, EnsembleError> {
    let pixels = w as usize * h as usize;
    let ids = (0..pixels)
        .map(|p| {
            let mut best: Option<(usize, T)> = None;
            for (c, m) in ordered.iter().enumerate() {
                if !eligible(c, p) {
                    continue;
                }
                let s = m.scores[p];
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            best.map_or(IGNORE_ID, |(c, _)| c as u32)
        })
        .collect();
    Ok(LabelMap::new(w, h, ids)?)
}

/// Per-pixel argmax over class scores, ties to the lowest class id. Every pixel
/// gets a class.
pub fn resolve_label_map<T: Scalar>(scores: &[ClassScoreMap<T>], vocab: &ClassVocabulary) -> Result<LabelMap, EnsembleError> {
    let (w, h, ordered) = by_class(scores, vocab)?;
    argmax_labels(w, h, &ordered, |_, _| true)
}

/// Argmax restricted to classes whose thresholded mask fires at the pixel;
/// pixels where no mask fires get [`IGNORE_ID`].
pub fn resolve_label_map_strict<T: Scalar>(
    scores: &[ClassScoreMap<T>],
    tau: f64,
    vocab: &ClassVocabulary,
) -> Result<LabelMap, EnsembleError> {
    check_tau(tau)?;
    let (w, h, ordered) = by_class(scores, vocab)?;
    let t = T::of(tau);
    argmax_labels(w, h, &ordered, |c, p| ordered[c].scores[p] > t)
}

/// Builds panoptic segments from a resolved label map.
///
/// Stuff classes get one segment per 4-connected region of their label. Thing
/// classes get one segment per 4-connected component of their binary mask
/// restricted to pixels they win; pixels a thing wins without its mask firing
/// stay void. Ids are dense from 1 in raster order of each segment's first
/// pixel.
pub fn resolve_panoptic(
    labels: &LabelMap,
    masks: &BTreeMap<ClassId, BinaryMask>,
    vocab: &ClassVocabulary,
    things: &BTreeSet<ClassId>,
) -> Result<PanopticPrediction, EnsembleError> {
    let (w, h) = (labels.width() as usize, labels.height() as usize);
    if let Some(t) = things.iter().find(|t| !vocab.contains_id(t.0)) {
        return Err(EnsembleError::Coverage(format!("thing class id {} not in vocabulary", t.0)));
    }
    for t in things {
        match masks.get(t) {
            None => return Err(EnsembleError::Coverage(format!("no mask for thing class {}", t.0))),
            Some(m) if (m.width() as usize, m.height() as usize) != (w, h) => {
                return Err(EnsembleError::Geom(format!("mask for class {} has wrong geometry", t.0)))
            }
            Some(_) => {}
        }
    }
    let ids = labels.ids();
    let member = |p: usize| -> Option<u32> {
        let l = ids[p];
        if l == labels.ignore_id() || !vocab.contains_id(l) {
            return None;
        }
        if things.contains(&ClassId(l)) && !masks[&ClassId(l)].bits()[p] {
            return None;
        }
        Some(l)
    };
    let mut seg = vec![VOID_SEGMENT; w * h];
    let mut segments = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..w * h {
        if seg[seed] != VOID_SEGMENT {
            continue;
        }
        let Some(class) = member(seed) else { continue };
        let id = segments.len() as u32 + 1;
        segments.push(SegmentInfo {
            segment_id: id,
            class_id: ClassId(class),
        });
        seg[seed] = id;
        stack.push(seed);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if seg[q] == VOID_SEGMENT && member(q) == Some(class) {
                    seg[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }
    Ok(PanopticPrediction::new(labels.width(), labels.height(), seg, segments)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::LogitMap;
    use approx::assert_abs_diff_eq;

    fn stack(class: u32, w: u32, h: u32, maps: &[&[f64]]) -> MaskStack<f64> {
        MaskStack::new(
            ClassId(class),
            maps.iter().map(|m| LogitMap::new(w, h, m.to_vec()).unwrap()).collect(),
        )
        .unwrap()
    }

    fn score_map(class: u32, w: u32, h: u32, s: &[f64]) -> ClassScoreMap<f64> {
        ClassScoreMap::new(ClassId(class), w, h, s.to_vec()).unwrap()
    }

    #[test]
    fn zero_logit_sits_on_the_threshold() {
        let e = ensemble(&stack(0, 1, 1, &[&[0.0]]), 0.5).unwrap();
        assert_eq!(e.scores.scores(), [0.5]);
        assert!(!e.mask.bits()[0]);
    }

    #[test]
    fn two_map_mean() {
        let e = ensemble(&stack(0, 1, 1, &[&[2.0], &[-1.0]]), 0.5).unwrap();
        // 1 / (1 + e^-0.5)
        assert_abs_diff_eq!(e.scores.scores()[0], 0.6224593312018546, epsilon = 1e-6);
        assert!(e.mask.bits()[0]);
    }

    #[test]
    fn saturation() {
        let e = ensemble(&stack(0, 1, 1, &[&[50.0]]), 0.5).unwrap();
        assert_abs_diff_eq!(e.scores.scores()[0], 1.0, epsilon = 1e-9);
        let e = ensemble(&stack(0, 1, 1, &[&[-800.0]]), 0.5).unwrap();
        assert_eq!(e.scores.scores()[0], 0.0);
        assert!(!e.mask.bits()[0]);
    }

    #[test]
    fn tau_must_be_open_unit_interval() {
        let s = stack(0, 1, 1, &[&[0.0]]);
        assert_eq!(ensemble(&s, 0.0), Err(EnsembleError::Tau(0.0)));
        assert_eq!(ensemble(&s, 1.0), Err(EnsembleError::Tau(1.0)));
    }

    #[test]
    fn single_precision_matches() {
        let s32 = MaskStack::new(
            ClassId(0),
            vec![LogitMap::new(1, 1, vec![2.0f32]).unwrap(), LogitMap::new(1, 1, vec![-1.0f32]).unwrap()],
        )
        .unwrap();
        let e = ensemble(&s32, 0.5).unwrap();
        assert!((e.scores.scores()[0] - 0.622_459_3).abs() < 1e-6);
    }

    #[test]
    fn argmax_and_ties() {
        let vocab = ClassVocabulary::new("v", &["a", "b"]).unwrap();
        let maps = [score_map(0, 2, 1, &[0.9, 0.7]), score_map(1, 2, 1, &[0.3, 0.7])];
        assert_eq!(resolve_label_map(&maps, &vocab).unwrap().ids(), [0, 0]);
        let rev = [maps[1].clone(), maps[0].clone()];
        assert_eq!(resolve_label_map(&rev, &vocab).unwrap().ids(), [0, 0]);
    }

    #[test]
    fn three_class_fixture() {
        // pixel:   0    1    2    3
        // a      0.2  0.8  0.5  0.1
        // b      0.6  0.8  0.4  0.1
        // c      0.1  0.3  0.9  0.2
        let vocab = ClassVocabulary::new("v", &["a", "b", "c"]).unwrap();
        let maps = [
            score_map(0, 2, 2, &[0.2, 0.8, 0.5, 0.1]),
            score_map(1, 2, 2, &[0.6, 0.8, 0.4, 0.1]),
            score_map(2, 2, 2, &[0.1, 0.3, 0.9, 0.2]),
        ];
        assert_eq!(resolve_label_map(&maps, &vocab).unwrap().ids(), [1, 0, 2, 2]);
        assert_eq!(
            resolve_label_map_strict(&maps, 0.5, &vocab).unwrap().ids(),
            [1, 0, 2, IGNORE_ID]
        );
    }

    #[test]
    fn coverage_and_geometry_errors() {
        let vocab = ClassVocabulary::new("v", &["a", "b"]).unwrap();
        let one = [score_map(0, 1, 1, &[0.5])];
        assert!(matches!(resolve_label_map(&one, &vocab), Err(EnsembleError::Coverage(_))));
        let dup = [score_map(0, 1, 1, &[0.5]), score_map(0, 1, 1, &[0.5])];
        assert!(matches!(resolve_label_map(&dup, &vocab), Err(EnsembleError::Coverage(_))));
        let geo = [score_map(0, 1, 1, &[0.5]), score_map(1, 2, 1, &[0.5, 0.5])];
        assert!(matches!(resolve_label_map(&geo, &vocab), Err(EnsembleError::Geom(_))));
        assert!(ClassScoreMap::new(ClassId(0), 1, 1, vec![1.5f64]).is_err());
    }

    fn all_set(w: u32, h: u32) -> BinaryMask {
        BinaryMask::new(w, h, vec![true; (w * h) as usize]).unwrap()
    }

    #[test]
    fn panoptic_single_class_is_one_segment() {
        let vocab = ClassVocabulary::new("v", &["sky"]).unwrap();
        let labels = LabelMap::new(3, 2, vec![0; 6]).unwrap();
        let masks = BTreeMap::from([(ClassId(0), all_set(3, 2))]);
        let p = resolve_panoptic(&labels, &masks, &vocab, &BTreeSet::new()).unwrap();
        assert_eq!(p.segments().len(), 1);
        assert!(p.segment_ids().iter().all(|&s| s == 1));
    }

    #[test]
    fn panoptic_diagonal_blobs_split() {
        // thing "dog"=1 on an L and a diagonal neighbour; stuff "grass"=0
        // 1 1 0
        // 1 0 1
        // 0 0 1
        let vocab = ClassVocabulary::new("v", &["grass", "dog"]).unwrap();
        let labels = LabelMap::new(3, 3, vec![1, 1, 0, 1, 0, 1, 0, 0, 1]).unwrap();
        let masks = BTreeMap::from([(ClassId(0), all_set(3, 3)), (ClassId(1), all_set(3, 3))]);
        let things = BTreeSet::from([ClassId(1)]);
        let p = resolve_panoptic(&labels, &masks, &vocab, &things).unwrap();
        assert_eq!(p.segment_ids(), [1, 1, 2, 1, 3, 4, 3, 3, 4]);
        let classes: Vec<u32> = p.segments().iter().map(|s| s.class_id.0).collect();
        assert_eq!(classes, [1, 0, 0, 1]);
    }

    #[test]
    fn thing_pixels_outside_mask_are_void() {
        let vocab = ClassVocabulary::new("v", &["dog"]).unwrap();
        let labels = LabelMap::new(3, 1, vec![0, 0, 0]).unwrap();
        let masks = BTreeMap::from([(ClassId(0), BinaryMask::new(3, 1, vec![true, false, true]).unwrap())]);
        let p = resolve_panoptic(&labels, &masks, &vocab, &BTreeSet::from([ClassId(0)])).unwrap();
        assert_eq!(p.segment_ids(), [1, 0, 2]);
        let missing = resolve_panoptic(&labels, &BTreeMap::new(), &vocab, &BTreeSet::from([ClassId(0)]));
        assert!(matches!(missing, Err(EnsembleError::Coverage(_))));
    }

    #[test]
    fn ignore_pixels_are_void() {
        let vocab = ClassVocabulary::new("v", &["sky"]).unwrap();
        let labels = LabelMap::new(3, 1, vec![0, IGNORE_ID, 0]).unwrap();
        let p = resolve_panoptic(&labels, &BTreeMap::new(), &vocab, &BTreeSet::new()).unwrap();
        assert_eq!(p.segment_ids(), [1, 0, 2]);
    }
}
