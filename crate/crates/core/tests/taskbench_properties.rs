use std::collections::BTreeSet;

use dragevo::genome::{SplitPolicy, SplitSpec};
use dragevo::metrics::pearson;
use dragevo::taskbench::{evaluation_split, generate, split, PairSet, TaskSpec};
use proptest::prelude::*;

fn small_spec(seed: u64, families: usize, leaky: bool) -> TaskSpec {
    TaskSpec {
        samples: 20 * families,
        families,
        leaky_feature: leaky,
        seed,
        ..TaskSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generation_is_a_pure_function_of_spec(seed in any::<u64>(), families in 4usize..9, leaky in any::<bool>()) {
        let spec = small_spec(seed, families, leaky);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(a.content_hash(), b.content_hash());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.labels.iter().all(|y| y.is_finite()));
        for f in 0..families {
            prop_assert!(a.family.iter().filter(|&&x| x == f).count() >= 5);
        }
        prop_assert_eq!(a.n_columns(), spec.features + leaky as usize);
    }

    #[test]
    fn family_folds_never_straddle_a_family(seed in any::<u64>(), split_seed in any::<u64>(), k in 2usize..4) {
        let ds = generate(&small_spec(seed, 6, true)).unwrap();
        let policy = SplitSpec { policy: SplitPolicy::ByFamily, folds: k as u32, ..SplitSpec::default() };
        for s in [split(&ds, &policy, split_seed).unwrap(), evaluation_split(&ds, SplitPolicy::ByFamily, k, split_seed).unwrap()] {
            let fams = |idx: &[usize]| idx.iter().map(|&i| ds.family[i]).collect::<BTreeSet<_>>();
            let hold = fams(&s.holdout);
            let mut validated = BTreeSet::new();
            for fold in &s.folds {
                let (t, v) = (fams(&fold.train), fams(&fold.validation));
                prop_assert!(t.is_disjoint(&v));
                prop_assert!(hold.is_disjoint(&t) && hold.is_disjoint(&v));
                prop_assert!(validated.is_disjoint(&v));
                validated.extend(v);
            }
            prop_assert_eq!(validated.len() + hold.len(), 6);
        }
    }

    #[test]
    fn distinct_labels_give_all_pairs(labels in prop::collection::btree_set(0u32..10_000, 0..20)) {
        let y: Vec<f64> = labels.iter().map(|&v| v as f64 * 1e-3).collect();
        let n = y.len();
        let pairs = PairSet::from_labels(&y, 1e-6);
        prop_assert_eq!(pairs.len(), n * n.saturating_sub(1) / 2);
        prop_assert!(pairs.pairs.iter().all(|&(i, j)| i < j && j < n));
    }
}

#[test]
fn noiseless_leaky_column_tracks_labels() {
    let ds = generate(&TaskSpec { noise: 0.0, ..TaskSpec::default() }).unwrap();
    let leak = ds.card.leaky_columns[0];
    let r = pearson(&ds.features.column(leak), &ds.labels).unwrap();
    assert!(r > 0.999, "r = {r}");
}

#[test]
fn family_means_are_separated_beyond_noise() {
    let spec = TaskSpec::default();
    let ds = generate(&spec).unwrap();
    let means: Vec<f64> = (0..spec.families)
        .map(|f| {
            let v: Vec<f64> = (0..ds.len()).filter(|&i| ds.family[i] == f).map(|i| ds.labels[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    for a in 0..means.len() {
        for b in (a + 1)..means.len() {
            assert!((means[a] - means[b]).abs() > 2.0 * spec.noise, "families {a},{b}: {means:?}");
        }
    }
}

#[test]
fn random_split_of_hundred_holds_out_twenty() {
    let ds = generate(&TaskSpec { samples: 100, families: 5, ..TaskSpec::default() }).unwrap();
    let policy = SplitSpec { policy: SplitPolicy::Random, holdout_fraction: 0.2, folds: 3 };
    let s = split(&ds, &policy, 1).unwrap();
    assert_eq!(s.holdout.len(), 20);
    let covered: usize = s.folds.iter().map(|f| f.validation.len()).sum();
    assert_eq!(covered, 80);
}
