use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;
use reasonseg::ensemble::{ensemble, resolve_label_map, ClassScoreMap};
use reasonseg::raster::{LogitMap, MaskStack};
use reasonseg::{ClassId, ClassVocabulary};

/// Exact rational mean, rounded once to f64, then the logistic function.
fn oracle_score(logits: &[f64]) -> f64 {
    let sum = logits
        .iter()
        .map(|&v| BigRational::from_float(v).expect("finite"))
        .fold(BigRational::zero(), |a, b| a + b);
    let mean = (sum / BigRational::from_integer(BigInt::from(logits.len()))).to_f64().unwrap();
    1.0 / (1.0 + (-mean).exp())
}

fn stack_of(maps: &[Vec<f64>], w: u32, h: u32) -> MaskStack<f64> {
    MaskStack::new(
        ClassId(0),
        maps.iter().map(|m| LogitMap::new(w, h, m.clone()).unwrap()).collect(),
    )
    .unwrap()
}

fn arb_stack() -> impl Strategy<Value = (u32, u32, Vec<Vec<f64>>)> {
    (1u32..=32, 1u32..=32, 1usize..=16).prop_flat_map(|(w, h, n)| {
        let px = (w * h) as usize;
        (
            Just(w),
            Just(h),
            prop::collection::vec(prop::collection::vec(-30.0f64..30.0, px), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_match_exact_oracle((w, h, maps) in arb_stack()) {
        let e = ensemble(&stack_of(&maps, w, h), 0.5).unwrap();
        for (p, &got) in e.scores.scores().iter().enumerate() {
            let column: Vec<f64> = maps.iter().map(|m| m[p]).collect();
            let want = oracle_score(&column);
            prop_assert!((got - want).abs() <= 1e-6, "pixel {}: {} vs {}", p, got, want);
            prop_assert_eq!(e.mask.bits()[p], got > 0.5);
        }
    }

    #[test]
    fn shuffling_maps_is_bit_identical((w, h, maps) in arb_stack(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = ensemble(&stack_of(&maps, w, h), 0.5).unwrap();
        let b = ensemble(&stack_of(&shuffled, w, h), 0.5).unwrap();
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.scores.scores()), bits(b.scores.scores()));
        prop_assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn adding_a_higher_map_never_lowers_scores((w, h, maps) in arb_stack(), delta in 0.01f64..5.0) {
        let px = (w * h) as usize;
        let higher: Vec<f64> = (0..px)
            .map(|p| maps.iter().map(|m| m[p]).fold(f64::MIN, f64::max) + delta)
            .collect();
        let before = ensemble(&stack_of(&maps, w, h), 0.5).unwrap();
        let mut more = maps.clone();
        more.push(higher);
        let after = ensemble(&stack_of(&more, w, h), 0.5).unwrap();
        for (a, b) in after.scores.scores().iter().zip(before.scores.scores()) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn argmax_survives_increasing_transforms(
        k in 1usize..6,
        grid in prop::collection::vec(0u32..=1000, 1..=64),
    ) {
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let vocab = ClassVocabulary::new("v", &names).unwrap();
        let px = grid.len() / k.max(1);
        prop_assume!(px > 0);
        let maps = |f: &dyn Fn(f64) -> f64| -> Vec<ClassScoreMap<f64>> {
            (0..k)
                .map(|c| {
                    let s = grid[c * px..(c + 1) * px].iter().map(|&g| f(g as f64 / 1000.0)).collect();
                    ClassScoreMap::new(ClassId(c as u32), px as u32, 1, s).unwrap()
                })
                .collect()
        };
        let base = resolve_label_map(&maps(&|x| x), &vocab).unwrap();
        let squared = resolve_label_map(&maps(&|x| x * x), &vocab).unwrap();
        let rooted = resolve_label_map(&maps(&|x| x.sqrt()), &vocab).unwrap();
        prop_assert_eq!(&base, &squared);
        prop_assert_eq!(&base, &rooted);
    }
}

mod connectivity {
    use std::collections::{BTreeMap, BTreeSet};

    use proptest::prelude::*;
    use reasonseg::ensemble::resolve_panoptic;
    use reasonseg::raster::{BinaryMask, LabelMap};
    use reasonseg::{ClassId, ClassVocabulary};

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    /// Union-find over 4-neighbours with equal membership.
    fn components(w: usize, h: usize, member: &[Option<u32>]) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..w * h).collect();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if member[p].is_none() {
                    continue;
                }
                for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
                    if member[q] == member[p] {
                        let (a, b) = (find(&mut parent, p), find(&mut parent, q));
                        parent[a] = b;
                    }
                }
            }
        }
        (0..w * h).map(|p| find(&mut parent, p)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn segments_are_four_connected_components(
            (w, h, labels, bits) in (1usize..=8, 1usize..=8).prop_flat_map(|(w, h)| (
                Just(w), Just(h),
                prop::collection::vec(0u32..3, w * h),
                prop::collection::vec(any::<bool>(), w * h),
            )),
            thing_flags in prop::collection::vec(any::<bool>(), 3),
        ) {
            let vocab = ClassVocabulary::new("v", &["a", "b", "c"]).unwrap();
            let things: BTreeSet<ClassId> = (0..3).filter(|&c| thing_flags[c as usize]).map(ClassId).collect();
            let mask = BinaryMask::new(w as u32, h as u32, bits.clone()).unwrap();
            let masks: BTreeMap<ClassId, BinaryMask> = (0..3).map(|c| (ClassId(c), mask.clone())).collect();
            let lm = LabelMap::new(w as u32, h as u32, labels.clone()).unwrap();
            let pan = resolve_panoptic(&lm, &masks, &vocab, &things).unwrap();

            let member: Vec<Option<u32>> = (0..w * h)
                .map(|p| (!things.contains(&ClassId(labels[p])) || bits[p]).then_some(labels[p]))
                .collect();
            let roots = components(w, h, &member);
            let seg = pan.segment_ids();
            let mut next = 1;
            let mut seen = BTreeMap::new();
            for p in 0..w * h {
                match member[p] {
                    None => prop_assert_eq!(seg[p], 0),
                    Some(c) => {
                        let want = *seen.entry(roots[p]).or_insert_with(|| { next += 1; next - 1 });
                        prop_assert_eq!(seg[p], want);
                        prop_assert_eq!(pan.class_of(seg[p]), Some(ClassId(c)));
                    }
                }
            }
            prop_assert_eq!(pan.segments().len() as u32, next - 1);
        }
    }
}
