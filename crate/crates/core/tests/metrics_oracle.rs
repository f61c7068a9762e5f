use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use reasonseg::metrics::{panoptic_stats, ConfusionMatrix, PanopticReport, SemanticReport};
use reasonseg::panoptic::{PanopticPrediction, SegmentInfo};
use reasonseg::raster::LabelMap;
use reasonseg::{ClassId, ClassVocabulary, IGNORE_ID};

const W: u32 = 8;
const H: u32 = 8;
const PX: usize = (W * H) as usize;

fn vocab(k: usize) -> ClassVocabulary {
    let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
    ClassVocabulary::new("oracle", &names).unwrap()
}

fn pixels_where(ids: &[u32], v: u32) -> BTreeSet<usize> {
    ids.iter().enumerate().filter(|(_, &x)| x == v).map(|(i, _)| i).collect()
}

/// mIoU by set arithmetic on pixel index sets.
fn miou_oracle(pred: &[u32], gt: &[u32], k: usize) -> Option<(Vec<Option<f64>>, f64)> {
    let valid: BTreeSet<usize> = (0..pred.len()).filter(|&i| gt[i] != IGNORE_ID).collect();
    if valid.is_empty() {
        return None;
    }
    let per: Vec<Option<f64>> = (0..k as u32)
        .map(|c| {
            let g: BTreeSet<usize> = pixels_where(gt, c);
            let p: BTreeSet<usize> = pixels_where(pred, c).intersection(&valid).copied().collect();
            let union = g.union(&p).count();
            (union > 0).then(|| g.intersection(&p).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    Some((per, present.iter().sum::<f64>() / present.len() as f64))
}

fn semantic_case() -> impl Strategy<Value = (usize, Vec<u32>, Vec<u32>)> {
    (1usize..=5).prop_flat_map(|k| {
        let label = prop_oneof![8 => 0..k as u32, 1 => Just(IGNORE_ID)];
        (Just(k), prop::collection::vec(label.clone(), PX), prop::collection::vec(label, PX))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn miou_agrees_with_set_oracle((k, pred, gt) in semantic_case()) {
        let v = vocab(k);
        let got = SemanticReport::evaluate(
            &LabelMap::new(W, H, pred.clone()).unwrap(),
            &LabelMap::new(W, H, gt.clone()).unwrap(),
            &v,
        );
        match miou_oracle(&pred, &gt, k) {
            None => prop_assert!(got.is_err()),
            Some((per, mean)) => {
                let got = got.unwrap();
                prop_assert!((got.miou - mean).abs() < 1e-12);
                for (c, want) in per.iter().enumerate() {
                    match (got.per_class[c].iou, want) {
                        (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                        (a, b) => prop_assert_eq!(a, *b),
                    }
                }
            }
        }
    }

    #[test]
    fn row_sums_are_gt_counts((k, pred, gt) in semantic_case()) {
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&LabelMap::new(W, H, pred).unwrap(), &LabelMap::new(W, H, gt.clone()).unwrap()).unwrap();
        for c in 0..k {
            prop_assert_eq!(cm.row_sum(c), pixels_where(&gt, c as u32).len() as u64);
        }
        prop_assert_eq!(cm.total(), gt.iter().filter(|&&g| g != IGNORE_ID).count() as u64);
    }

    #[test]
    fn miou_is_invariant_to_relabeling((k, pred, gt) in semantic_case(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<u32> = (0..k as u32).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let map = |ids: &[u32]| ids.iter().map(|&i| if i == IGNORE_ID { i } else { perm[i as usize] }).collect::<Vec<_>>();
        let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        let mut permuted_names = names.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted_names[new as usize] = names[old].clone();
        }
        let a = SemanticReport::evaluate(
            &LabelMap::new(W, H, pred.clone()).unwrap(),
            &LabelMap::new(W, H, gt.clone()).unwrap(),
            &vocab(k),
        );
        let b = SemanticReport::evaluate(
            &LabelMap::new(W, H, map(&pred)).unwrap(),
            &LabelMap::new(W, H, map(&gt)).unwrap(),
            &ClassVocabulary::new("oracle", &permuted_names).unwrap(),
        );
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.miou - b.miou).abs() < 1e-12);
                for (old, &new) in perm.iter().enumerate() {
                    prop_assert_eq!(a.per_class[old].iou, b.per_class[new as usize].iou);
                }
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }
}

/// Panoptic raster with segments = (class, instance) pairs; 0 stays void.
fn panoptic_from(cells: &[(u32, u32)]) -> PanopticPrediction {
    let mut ids = BTreeMap::new();
    let mut raster = Vec::with_capacity(cells.len());
    for &(c, inst) in cells {
        if c == u32::MAX {
            raster.push(0);
            continue;
        }
        let next = ids.len() as u32 + 1;
        raster.push(*ids.entry((c, inst)).or_insert(next));
    }
    let segs = ids
        .iter()
        .map(|(&(c, _), &s)| SegmentInfo {
            segment_id: s,
            class_id: ClassId(c),
        })
        .collect();
    PanopticPrediction::new(W, H, raster, segs).unwrap()
}

/// PQ counts by set arithmetic, straight from the matching rules.
fn pq_oracle(pred: &PanopticPrediction, gt: &PanopticPrediction) -> BTreeMap<u32, (u64, u64, u64, f64)> {
    let set = |p: &PanopticPrediction, s: u32| pixels_where(p.segment_ids(), s);
    let void = set(gt, 0);
    let mut out: BTreeMap<u32, (u64, u64, u64, f64)> = BTreeMap::new();
    let mut matched_p = BTreeSet::new();
    let mut matched_g = BTreeSet::new();
    for g in gt.segments() {
        let gs = set(gt, g.segment_id);
        for p in pred.segments() {
            if p.class_id != g.class_id {
                continue;
            }
            let ps = set(pred, p.segment_id);
            let inter = gs.intersection(&ps).count();
            let union: BTreeSet<usize> = gs.union(&ps).filter(|i| !(ps.contains(i) && void.contains(i))).copied().collect();
            if union.is_empty() {
                continue;
            }
            let iou = inter as f64 / union.len() as f64;
            if iou > 0.5 {
                matched_g.insert(g.segment_id);
                matched_p.insert(p.segment_id);
                let e = out.entry(g.class_id.0).or_default();
                e.0 += 1;
                e.3 += iou;
            }
        }
    }
    for g in gt.segments() {
        if !matched_g.contains(&g.segment_id) {
            out.entry(g.class_id.0).or_default().2 += 1;
        }
    }
    for p in pred.segments() {
        let ps = set(pred, p.segment_id);
        if matched_p.contains(&p.segment_id) || ps.intersection(&void).count() * 2 > ps.len() {
            continue;
        }
        out.entry(p.class_id.0).or_default().1 += 1;
    }
    out
}

/// (class, instance) per pixel; `u32::MAX` class means void.
type Cells = Vec<(u32, u32)>;

fn panoptic_case() -> impl Strategy<Value = (usize, Cells, Cells)> {
    (1usize..=5).prop_flat_map(|k| {
        let cell = prop_oneof![
            6 => (0..k as u32, 0u32..2),
            1 => Just((u32::MAX, 0)),
        ];
        (Just(k), prop::collection::vec(cell.clone(), PX), prop::collection::vec(cell, PX))
    })
}

/// Blocky maps give segments large enough to actually match.
fn blocky(cells: Vec<(u32, u32)>) -> Vec<(u32, u32)> {
    (0..PX).map(|i| cells[(i / 16) * 16 + (i % 4)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn pq_agrees_with_set_oracle((k, p, g) in panoptic_case(), blocks in any::<bool>()) {
        let (p, g) = if blocks { (blocky(p), blocky(g)) } else { (p, g) };
        let pred = panoptic_from(&p);
        let gt = panoptic_from(&g);
        let v = vocab(k);
        let got = panoptic_stats(&pred, &gt, &v).unwrap();
        let want = pq_oracle(&pred, &gt);
        let got_keys: Vec<u32> = got.keys().map(|c| c.0).collect();
        let want_keys: Vec<u32> = want.keys().copied().collect();
        prop_assert_eq!(got_keys, want_keys);
        for (c, s) in &got {
            let w = want[&c.0];
            prop_assert_eq!((s.tp, s.fp, s.fn_), (w.0, w.1, w.2));
            prop_assert!((s.iou_sum - w.3).abs() < 1e-12);
            prop_assert!((s.pq() - s.sq() * s.rq()).abs() < 1e-12);
        }
        if let Ok(r) = PanopticReport::from_stats(&got, &v, &BTreeSet::new()) {
            prop_assert!((r.pooled.pq - r.pooled.sq * r.pooled.rq).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_panoptic_scores_one((_k, p, _g) in panoptic_case()) {
        let pred = panoptic_from(&p);
        prop_assume!(!pred.segments().is_empty());
        let r = PanopticReport::evaluate(&pred, &pred, &vocab(5), &BTreeSet::new()).unwrap();
        prop_assert_eq!((r.overall.pq, r.overall.sq, r.overall.rq), (1.0, 1.0, 1.0));
    }
}
