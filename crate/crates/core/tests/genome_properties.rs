use dragevo::genome::{
    crossover, mutate, random_genome, sample_operator, validate, Genome, ModelFamily, OperatorKind, Origin,
};
use dragevo::rng::DeterministicStream;
use proptest::prelude::*;

const N_FEATURES: usize = 9;

fn start(seed: u64) -> (Genome, DeterministicStream) {
    let mut rng = DeterministicStream::new(seed);
    let family = ModelFamily::ALL[rng.index(3)];
    (random_genome(family, N_FEATURES, &mut rng, Origin::Initial), rng)
}

fn roundtrip_is_fixed_point(g: &Genome) -> Result<(), TestCaseError> {
    let text = g.to_canonical_json();
    let back = Genome::from_json(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&back, g);
    prop_assert_eq!(back.to_canonical_json(), text);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    // 500 cases x 20 steps = 10,000 operator applications.
    #[test]
    fn operator_sequences_stay_valid_and_canonical(seed in any::<u64>()) {
        let (mut g, mut rng) = start(seed);
        let mut other = random_genome(ModelFamily::ALL[rng.index(3)], N_FEATURES, &mut rng, Origin::Initial);
        for step in 0..20u64 {
            let child = if rng.bernoulli(0.2) {
                crossover(&g, &other, &mut rng, step, 0)
            } else {
                let kind = OperatorKind::ALL[rng.index(4)];
                mutate(&g, kind, &mut rng, step, 0)
            };
            let report = validate(&child);
            prop_assert!(report.is_valid(), "{:?}", report.violations);
            roundtrip_is_fixed_point(&child)?;
            prop_assert_eq!(child.provenance.iteration, step);
            other = std::mem::replace(&mut g, child);
        }
    }

    #[test]
    fn mutation_touches_only_owned_block(seed in any::<u64>(), k in 0usize..4) {
        let (g, mut rng) = start(seed);
        let kind = OperatorKind::ALL[k];
        let child = mutate(&g, kind, &mut rng, 1, 0);
        let (a, b) = (g.content(), child.content());
        if kind != OperatorKind::DataEdit { prop_assert_eq!(&a.data_ops, &b.data_ops); }
        if kind != OperatorKind::ModelSwap { prop_assert_eq!(&a.model, &b.model); }
        if kind != OperatorKind::LossEvolve { prop_assert_eq!(&a.loss, &b.loss); }
        if kind != OperatorKind::SplitGuard { prop_assert_eq!(&a.split, &b.split); }
        prop_assert_eq!(child.provenance.parent.as_ref(), Some(g.id()));
        prop_assert_eq!(child.version, g.version + 1);
    }

    #[test]
    fn mutation_is_deterministic_in_rng_state(seed in any::<u64>(), k in 0usize..4) {
        let (g, rng) = start(seed);
        let a = mutate(&g, OperatorKind::ALL[k], &mut rng.clone(), 3, 1);
        let b = mutate(&g, OperatorKind::ALL[k], &mut rng.clone(), 3, 1);
        prop_assert_eq!(a.to_canonical_json(), b.to_canonical_json());
    }

    #[test]
    fn content_equal_genomes_share_id(seed in any::<u64>()) {
        let (g, mut rng) = start(seed);
        let other_path = mutate(&g, OperatorKind::SplitGuard, &mut rng, 5, 2).with_content(g.content().clone());
        prop_assert_eq!(other_path.id(), g.id());
        let via_crossover = crossover(&g, &g, &mut rng, 6, 2);
        prop_assert_eq!(via_crossover.id(), g.id());
        prop_assert!(via_crossover.provenance != g.provenance);
    }
}

#[test]
fn operator_selection_is_uniform_under_equal_weights() {
    let mut rng = DeterministicStream::new(42);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[sample_operator(&[0.25; 4], &mut rng).index()] += 1;
    }
    for c in counts {
        assert!((2350..=2650).contains(&c), "{counts:?}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
    // 99.9th percentile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 16.27, "chi2 {chi2}");
}

#[test]
fn crossover_block_frequencies_are_even() {
    let mut rng = DeterministicStream::new(9);
    let a = random_genome(ModelFamily::RidgeLinear, N_FEATURES, &mut rng, Origin::Initial);
    let mut b = random_genome(ModelFamily::Mlp1Hidden, N_FEATURES, &mut rng, Origin::Initial);
    while b.data_ops() == a.data_ops() || b.loss() == a.loss() || b.split() == a.split() {
        b = random_genome(ModelFamily::Mlp1Hidden, N_FEATURES, &mut rng, Origin::Initial);
    }
    let mut from_a = [0usize; 4];
    for i in 0..1000 {
        let c = crossover(&a, &b, &mut rng, i, 0);
        from_a[0] += (c.data_ops() == a.data_ops()) as usize;
        from_a[1] += (c.model() == a.model()) as usize;
        from_a[2] += (c.loss() == a.loss()) as usize;
        from_a[3] += (c.split() == a.split()) as usize;
    }
    for f in from_a {
        assert!((450..=550).contains(&f), "{from_a:?}");
    }
}
