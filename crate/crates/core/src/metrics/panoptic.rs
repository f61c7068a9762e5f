use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::panoptic::{PanopticPrediction, VOID_SEGMENT};
use crate::vocab::{ClassId, ClassVocabulary};

/// Matching counts for one class; sums over images are plain additions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn add(&mut self, o: &PqStats) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.tp as f64 / self.denom()
        }
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }
}

/// Per-class matching of one prediction against its ground truth.
///
/// Segments of the same class match when IoU > 0.5. Ground-truth void pixels
/// (segment 0) are removed from the union, and an unmatched prediction that is
/// mostly void is not counted as a false positive.
pub fn panoptic_stats(
    pred: &PanopticPrediction,
    gt: &PanopticPrediction,
    vocab: &ClassVocabulary,
) -> Result<BTreeMap<ClassId, PqStats>, MetricsError> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(MetricsError::Geom {
            pred: (pred.width(), pred.height()),
            gt: (gt.width(), gt.height()),
        });
    }
    for (which, p) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(s) = p.segments().iter().find(|s| !vocab.contains_id(s.class_id.0)) {
            return Err(MetricsError::Range { which, id: s.class_id.0 });
        }
    }
    let gt_area = gt.areas();
    let pred_area = pred.areas();
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.segment_ids().iter().zip(pred.segment_ids()) {
        if p != VOID_SEGMENT {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let void_overlap = |p: u32| inter.get(&(VOID_SEGMENT, p)).copied().unwrap_or(0);

    let mut stats: BTreeMap<ClassId, PqStats> = BTreeMap::new();
    let mut matched_gt = BTreeSet::new();
    let mut matched_pred = BTreeSet::new();
    let mut pairs: Vec<_> = inter.iter().filter(|((g, _), _)| *g != VOID_SEGMENT).collect();
    pairs.sort_by_key(|(k, _)| **k);
    for (&(g, p), &i) in pairs {
        let class = gt.class_of(g).expect("declared segment");
        if pred.class_of(p) != Some(class) {
            continue;
        }
        let union = pred_area[&p] + gt_area[&g] - i - void_overlap(p);
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            matched_gt.insert(g);
            matched_pred.insert(p);
            let s = stats.entry(class).or_default();
            s.tp += 1;
            s.iou_sum += iou;
        }
    }
    for seg in gt.segments() {
        if !matched_gt.contains(&seg.segment_id) && gt_area.contains_key(&seg.segment_id) {
            stats.entry(seg.class_id).or_default().fn_ += 1;
        }
    }
    for seg in pred.segments() {
        let Some(&area) = pred_area.get(&seg.segment_id) else { continue };
        if matched_pred.contains(&seg.segment_id) {
            continue;
        }
        if void_overlap(seg.segment_id) as f64 / area as f64 > 0.5 {
            continue;
        }
        stats.entry(seg.class_id).or_default().fp += 1;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub classes: usize,
}

impl PqSummary {
    /// Unweighted mean of per-class values over classes with any segment.
    fn macro_avg<'a>(stats: impl Iterator<Item = &'a PqStats>) -> Self {
        let present: Vec<&PqStats> = stats.filter(|s| !s.is_empty()).collect();
        let n = present.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: fn(&PqStats) -> f64| present.iter().map(|s| f(s)).sum::<f64>() / n as f64;
        Self {
            pq: mean(PqStats::pq),
            sq: mean(PqStats::sq),
            rq: mean(PqStats::rq),
            classes: n,
        }
    }

    /// Counts pooled over classes before forming the ratios.
    fn pooled<'a>(stats: impl Iterator<Item = &'a PqStats>) -> Self {
        let mut total = PqStats::default();
        let mut classes = 0;
        for s in stats.filter(|s| !s.is_empty()) {
            total.add(s);
            classes += 1;
        }
        Self {
            pq: total.pq(),
            sq: total.sq(),
            rq: total.rq(),
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub class_id: ClassId,
    pub name: String,
    pub is_thing: bool,
    #[serde(flatten)]
    pub stats: PqStats,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    /// Class-averaged, the usual headline figure.
    #[serde(flatten)]
    pub overall: PqSummary,
    pub things: PqSummary,
    pub stuff: PqSummary,
    /// Pooled counts; unlike the class average this satisfies PQ = SQ × RQ.
    pub pooled: PqSummary,
    pub per_class: Vec<ClassPq>,
}

impl PanopticReport {
    pub fn from_stats(
        stats: &BTreeMap<ClassId, PqStats>,
        vocab: &ClassVocabulary,
        things: &BTreeSet<ClassId>,
    ) -> Result<Self, MetricsError> {
        if stats.values().all(PqStats::is_empty) {
            return Err(MetricsError::EmptyEval("no segments in ground truth or prediction".into()));
        }
        let per_class = stats
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(&id, s)| ClassPq {
                class_id: id,
                name: vocab.name(id).unwrap_or_default().to_string(),
                is_thing: things.contains(&id),
                stats: *s,
                pq: s.pq(),
                sq: s.sq(),
                rq: s.rq(),
            })
            .collect();
        let pick = |thing: bool| stats.iter().filter(move |(id, _)| things.contains(id) == thing).map(|(_, s)| s);
        Ok(Self {
            overall: PqSummary::macro_avg(stats.values()),
            things: PqSummary::macro_avg(pick(true)),
            stuff: PqSummary::macro_avg(pick(false)),
            pooled: PqSummary::pooled(stats.values()),
            per_class,
        })
    }

    pub fn evaluate(
        pred: &PanopticPrediction,
        gt: &PanopticPrediction,
        vocab: &ClassVocabulary,
        things: &BTreeSet<ClassId>,
    ) -> Result<Self, MetricsError> {
        Self::from_stats(&panoptic_stats(pred, gt, vocab)?, vocab, things)
    }
}
