use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use reasonseg::aligner::{align_class, Decision, Embedder};
use reasonseg::backends::MockEmbed;
use reasonseg::{ClassId, ClassVocabulary};

/// Exact ordering of cos(q, a) against cos(q, b) for integer vectors, using
/// only integer arithmetic: compare dot_a/sqrt(n_a) with dot_b/sqrt(n_b).
fn cmp_exact(q: &[i32], a: &[i32], b: &[i32]) -> std::cmp::Ordering {
    let dot = |c: &[i32]| c.iter().zip(q).map(|(&x, &y)| x as i128 * y as i128).sum::<i128>();
    let n = |c: &[i32]| c.iter().map(|&x| (x as i128).pow(2)).sum::<i128>();
    let (da, db) = (dot(a), dot(b));
    match (da.signum(), db.signum()) {
        (x, y) if x != y => x.cmp(&y),
        (0, _) => std::cmp::Ordering::Equal,
        (s, _) => {
            let o = (da * da * n(b)).cmp(&(db * db * n(a)));
            if s < 0 { o.reverse() } else { o }
        }
    }
}

/// Brute force from the definitions: the set of exact argmax classes and the
/// float similarity of the best one.
fn oracle(query: &[i32], classes: &[Vec<i32>]) -> (Vec<usize>, f64) {
    let mut best = vec![0];
    for i in 1..classes.len() {
        match cmp_exact(query, &classes[i], &classes[best[0]]) {
            std::cmp::Ordering::Greater => best = vec![i],
            std::cmp::Ordering::Equal => best.push(i),
            std::cmp::Ordering::Less => {}
        }
    }
    let norm = |v: &[i32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let c = &classes[best[0]];
    let dot: i64 = c.iter().zip(query).map(|(&a, &b)| a as i64 * b as i64).sum();
    (best, (dot as f64 / (norm(c) * norm(query))).clamp(-1.0, 1.0))
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(-5i32..=5, dim).prop_filter("non-zero", |v| v.iter().any(|&x| x != 0))
}

fn case() -> impl Strategy<Value = (Vec<i32>, Vec<Vec<i32>>, f64)> {
    (2usize..6, 1usize..8).prop_flat_map(|(dim, k)| {
        (
            nonzero_vec(dim),
            prop::collection::vec(nonzero_vec(dim), k),
            -1.0f64..=1.0,
        )
    })
}

fn setup(query: &[i32], classes: &[Vec<i32>]) -> (ClassVocabulary, Embedder<f64>) {
    let names: Vec<String> = (0..classes.len()).map(|i| format!("class {i}")).collect();
    let vocab = ClassVocabulary::new("oracle", &names).unwrap();
    let mut table: BTreeMap<String, Vec<f64>> = names
        .iter()
        .zip(classes)
        .map(|(n, v)| (n.clone(), v.iter().map(|&x| x as f64).collect()))
        .collect();
    table.insert("query".into(), query.iter().map(|&x| x as f64).collect());
    let mock = Arc::new(MockEmbed::new(query.len(), table).unwrap());
    (vocab, Embedder::new(mock, "oracle-model"))
}

const NEAR: f64 = 1e-9;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aligner_agrees_with_brute_force((query, classes, sigma) in case()) {
        let (vocab, embedder) = setup(&query, &classes);
        let got = align_class("query", &vocab, &embedder, sigma).unwrap();
        let (argmax, best_sim) = oracle(&query, &classes);
        // rounding may flip a decision only right at the threshold
        prop_assume!((best_sim - sigma).abs() > NEAR);
        let lowest = argmax[0];
        // identical vectors must produce bitwise-equal scores, so the lowest id wins
        let identical_tie = argmax.iter().all(|&i| classes[i] == classes[lowest]);
        match got.decision {
            Decision::Matched { class_id, similarity } => {
                prop_assert!(best_sim > sigma);
                prop_assert!(argmax.contains(&(class_id.0 as usize)), "{:?} not in {:?}", class_id, argmax);
                if identical_tie {
                    prop_assert_eq!(class_id, ClassId(lowest as u32));
                }
                prop_assert!((similarity - best_sim).abs() < 1e-12);
            }
            Decision::Discarded { best_similarity } => {
                prop_assert!(best_sim < sigma);
                prop_assert!((best_similarity - best_sim).abs() < 1e-12);
            }
            Decision::ExactMatch { .. } => prop_assert!(false, "query is not a vocabulary name"),
        }
    }

    #[test]
    fn raising_sigma_never_adds_matches((query, classes, s1) in case(), s2 in -1.0f64..=1.0) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let (vocab, embedder) = setup(&query, &classes);
        let at_lo = align_class("query", &vocab, &embedder, lo).unwrap().class_id();
        let at_hi = align_class("query", &vocab, &embedder, hi).unwrap().class_id();
        if at_hi.is_some() {
            prop_assert_eq!(at_hi, at_lo);
        }
    }
}
