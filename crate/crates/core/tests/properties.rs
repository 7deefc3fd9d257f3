use std::collections::BTreeSet;

use foresee::cart::{GroupStats, LeafStats};
use foresee::dataset::{split, Dataset, FeatureSpec, FeatureVector, SplitPair};
use foresee::foresee::{build_forest, leaf_risk, score_dataset, AbsentGroupRule, ForestParams};
use foresee::mitigation::{preprocess_filter, FilterMode};
use proptest::prelude::*;

fn leaf(count: [u32; 2], positives: [u32; 2], class: u8) -> LeafStats {
    let stats = LeafStats {
        groups: [0, 1].map(|g| GroupStats {
            count: count[g],
            positives: positives[g],
            misclassified: 0,
        }),
        tie: false,
    };
    stats.with_class(class)
}

fn arb_leaf() -> impl Strategy<Value = ([u32; 2], [u32; 2])> {
    (1u32..200, 1u32..200)
        .prop_flat_map(|(a, b)| ((Just([a, b])), (0..=a, 0..=b).prop_map(|(p, q)| [p, q])))
}

fn dataset(xs: &[f64], groups: &[u8], labels: &[u8]) -> Dataset {
    let rows = xs.iter().map(|&x| FeatureVector::numeric(&[x])).collect();
    Dataset::new(
        "prop",
        vec![FeatureSpec::numeric("x")],
        rows,
        groups.to_vec(),
        labels.to_vec(),
        "s".to_string(),
    )
    .unwrap()
}

fn arb_dataset(max: usize) -> impl Strategy<Value = Dataset> {
    (8..max)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..10.0, n),
                prop::collection::vec(0u8..2, n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_map(|(xs, mut g, y)| {
            g[0] = 0;
            g[1] = 1;
            dataset(&xs, &g, &y)
        })
}

proptest! {
    #[test]
    fn leaf_risk_ignores_the_leaf_class((count, pos) in arb_leaf()) {
        let zero = leaf_risk(&leaf(count, pos, 0), AbsentGroupRule::Pessimistic);
        let one = leaf_risk(&leaf(count, pos, 1), AbsentGroupRule::Pessimistic);
        // |p_s/n_s - p_u/n_u| as one rational, rounded once.
        let exact = (u64::from(pos[1]) * u64::from(count[0])).abs_diff(u64::from(pos[0]) * u64::from(count[1])) as f64
            / (u64::from(count[0]) * u64::from(count[1])) as f64;
        prop_assert_eq!(zero.to_bits(), one.to_bits());
        prop_assert_eq!(zero, exact);
        let naive = (pos[1] as f64 / count[1] as f64 - pos[0] as f64 / count[0] as f64).abs();
        prop_assert!((zero - naive).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn split_is_a_stratified_partition(data in arb_dataset(80), seed in any::<u64>()) {
        let sp = split(&data, 0.7, seed).unwrap();
        let train: BTreeSet<usize> = sp.train.iter().copied().collect();
        let test: BTreeSet<usize> = sp.test.iter().copied().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), data.len());
        let target = 0.7 * data.len() as f64;
        prop_assert!((sp.train.len() as f64 - target).abs() <= 1.0 + 1e-9 || data.len() < 10);
        for (y, g) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let cell = |rows: &[usize]| rows.iter().filter(|&&r| data.labels[r] == y && data.sensitive[r] == g).count();
            let total = cell(&sp.train) + cell(&sp.test);
            if total >= 2 {
                prop_assert!((cell(&sp.train) as f64 - 0.7 * total as f64).abs() <= 1.0);
            }
        }
        prop_assert_eq!(sp, split(&data, 0.7, seed).unwrap());
    }

    #[test]
    fn filter_output_is_a_subset(
        risks in prop::collection::vec(0.0f64..1.0, 16),
        lambda in 0.0f64..1.0,
    ) {
        let xs: Vec<f64> = (0..16).map(f64::from).collect();
        let g: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let data = dataset(&xs, &g, &g);
        let sp = SplitPair { train: (0..8).collect(), test: (8..16).collect(), seed: 0 };
        for mode in [FilterMode::TrainAndTest, FilterMode::TestOnly] {
            match preprocess_filter(&data, &sp, &risks[..8], &risks[8..], lambda, mode) {
                Ok(out) => {
                    prop_assert!(out.train.iter().all(|r| sp.train.contains(r)));
                    prop_assert!(out.test.iter().all(|r| sp.test.contains(r)));
                    prop_assert!(out.test.iter().all(|&r| risks[r] <= lambda));
                    if mode == FilterMode::TestOnly {
                        prop_assert_eq!(&out.train, &sp.train);
                    }
                }
                Err(e) => prop_assert!(e.to_string().contains("filtering")),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forest_risk_lies_in_unit_interval(data in arb_dataset(60), seed in any::<u64>()) {
        let params = ForestParams { trees: 5, beta: 0.01, seed, max_attempts: 25, ..ForestParams::default() };
        let all = data.all_indices();
        let forest = build_forest(&data, &all, &params).unwrap();
        for e in score_dataset(&forest, &data, &all, 0.5).unwrap().entries {
            prop_assert!((0.0..=1.0).contains(&e.risk));
        }
    }

    #[test]
    fn mirrored_groups_give_zero_risk(
        xs in prop::collection::vec(0.0f64..10.0, 10..40),
        ys in prop::collection::vec(0u8..2, 40),
        seed in any::<u64>(),
    ) {
        // Every instance appears once per group with the same label, so
        // every leaf holds identical group label rates.
        let n = xs.len();
        let x2: Vec<f64> = xs.iter().chain(&xs).copied().collect();
        let g: Vec<u8> = (0..2 * n).map(|i| u8::from(i >= n)).collect();
        let y: Vec<u8> = (0..2 * n).map(|i| ys[i % n]).collect();
        let data = dataset(&x2, &g, &y);
        let params = ForestParams { trees: 5, beta: 0.01, seed, instance_fraction: 1.0, max_attempts: 25, ..ForestParams::default() };
        let all = data.all_indices();
        let forest = build_forest(&data, &all, &params).unwrap();
        for e in score_dataset(&forest, &data, &all, 0.5).unwrap().entries {
            prop_assert_eq!(e.risk, 0.0);
        }
    }
}
