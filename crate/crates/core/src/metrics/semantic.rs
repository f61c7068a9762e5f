use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::raster::LabelMap;
use crate::vocab::{ClassId, ClassVocabulary};

/// K×K pixel counts; entry (g, p) counts pixels with ground truth g predicted
/// as p. Ground-truth ignore pixels are skipped. Pixels the prediction leaves
/// unlabeled are tallied per ground-truth class in `unlabeled` and count as
/// misses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    unlabeled: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            unlabeled: vec![0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn unlabeled(&self, gt: usize) -> u64 {
        self.unlabeled[gt]
    }

    /// Pixels of ground-truth class `gt`.
    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.k..(gt + 1) * self.k].iter().sum::<u64>() + self.unlabeled[gt]
    }

    /// Pixels predicted as `pred`.
    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unlabeled.iter().sum::<u64>()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), MetricsError> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(MetricsError::Geom {
                pred: (pred.width(), pred.height()),
                gt: (gt.width(), gt.height()),
            });
        }
        let k = self.k as u32;
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if g == gt.ignore_id() {
                continue;
            }
            if g >= k {
                return Err(MetricsError::Range { which: "ground truth", id: g });
            }
            if p == pred.ignore_id() {
                self.unlabeled[g as usize] += 1;
            } else if p >= k {
                return Err(MetricsError::Range { which: "prediction", id: p });
            } else {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.k != other.k {
            return Err(MetricsError::Shape(self.k, other.k));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.unlabeled.iter_mut().zip(&other.unlabeled).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IoU of class `c`, or `None` when it appears in neither ground truth nor
    /// prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let union = self.row_sum(c) + self.col_sum(c) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Per-class IoU and their mean over classes present in either map.
    pub fn report(&self, vocab: &ClassVocabulary) -> Result<SemanticReport, MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::EmptyEval("no labeled ground-truth pixels".into()));
        }
        let per_class: Vec<ClassIou> = (0..self.k)
            .map(|c| {
                let id = ClassId(c as u32);
                ClassIou {
                    class_id: id,
                    name: vocab.name(id).unwrap_or_default().to_string(),
                    iou: self.iou(c),
                    gt_pixels: self.row_sum(c),
                    pred_pixels: self.col_sum(c),
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let correct: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(SemanticReport {
            miou,
            pixel_accuracy: correct as f64 / self.total() as f64,
            evaluated_classes: present.len(),
            per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: ClassId,
    pub name: String,
    /// `None` when the class is in neither ground truth nor prediction.
    pub iou: Option<f64>,
    pub gt_pixels: u64,
    pub pred_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub evaluated_classes: usize,
    pub per_class: Vec<ClassIou>,
}

impl SemanticReport {
    /// Single-image convenience wrapper.
    pub fn evaluate(pred: &LabelMap, gt: &LabelMap, vocab: &ClassVocabulary) -> Result<Self, MetricsError> {
        let mut cm = ConfusionMatrix::new(vocab.len());
        cm.accumulate(pred, gt)?;
        cm.report(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::IGNORE_ID;
    use approx::assert_abs_diff_eq;

    fn vocab(k: usize) -> ClassVocabulary {
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        ClassVocabulary::new("v", &names).unwrap()
    }

    fn lm(w: u32, h: u32, ids: &[u32]) -> LabelMap {
        LabelMap::new(w, h, ids.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let r = SemanticReport::evaluate(&lm(2, 2, &[0, 1, 1, 1]), &lm(2, 2, &[0, 0, 1, 1]), &vocab(2)).unwrap();
        assert_abs_diff_eq!(r.per_class[0].iou.unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_class[1].iou.unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.miou, 0.58333, epsilon = 1e-5);
    }

    #[test]
    fn identity_scores_one_and_absent_classes_are_excluded() {
        let m = lm(2, 2, &[0, 0, 2, 2]);
        let r = SemanticReport::evaluate(&m, &m, &vocab(4)).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.evaluated_classes, 2);
        assert_eq!(r.per_class[1].iou, None);
    }

    #[test]
    fn ignore_handling() {
        let gt = lm(2, 2, &[IGNORE_ID; 4]);
        let pred = lm(2, 2, &[0; 4]);
        assert!(matches!(SemanticReport::evaluate(&pred, &gt, &vocab(1)), Err(MetricsError::EmptyEval(_))));
        // unlabeled predictions are misses
        let gt = lm(2, 1, &[0, 0]);
        let pred = lm(2, 1, &[0, IGNORE_ID]);
        let r = SemanticReport::evaluate(&pred, &gt, &vocab(1)).unwrap();
        assert_eq!(r.miou, 0.5);
    }

    #[test]
    fn errors() {
        let v = vocab(2);
        assert!(matches!(
            SemanticReport::evaluate(&lm(1, 2, &[0, 0]), &lm(2, 1, &[0, 0]), &v),
            Err(MetricsError::Geom { .. })
        ));
        assert!(matches!(
            SemanticReport::evaluate(&lm(1, 1, &[5]), &lm(1, 1, &[0]), &v),
            Err(MetricsError::Range { which: "prediction", id: 5 })
        ));
        assert_eq!(ConfusionMatrix::new(2).merge(&ConfusionMatrix::new(3)), Err(MetricsError::Shape(2, 3)));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let (a_p, a_g) = (lm(2, 1, &[0, 1]), lm(2, 1, &[0, 0]));
        let (b_p, b_g) = (lm(2, 1, &[1, 1]), lm(2, 1, &[1, 0]));
        let mut joint = ConfusionMatrix::new(2);
        joint.accumulate(&a_p, &a_g).unwrap();
        joint.accumulate(&b_p, &b_g).unwrap();
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&a_p, &a_g).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&b_p, &b_g).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, joint);
        assert_eq!(joint.row_sum(0), 3);
    }
}
