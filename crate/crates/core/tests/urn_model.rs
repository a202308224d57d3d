use num_rational::Ratio;
use pbnas::efficiency::{
    expected_trials, expected_trials_exact, gain_curve, gain_db, pmf_first_moment, trial_distribution, trial_pmf,
    trial_pmf_exact, ErrorSample,
};
use pbnas::seeding::rng_from_seed;
use proptest::prelude::*;
use rand::seq::{index, SliceRandom};

/// First-success counts over every ordering of `k` items of which `m` are
/// successes, by visiting all `k!` permutations (Heap's algorithm).
fn first_hit_counts(k: usize, m: usize) -> (Vec<u64>, u64) {
    let mut items: Vec<bool> = (0..k).map(|i| i < m).collect();
    let mut counts = vec![0u64; k + 2];
    let mut total = 0u64;
    let mut record = |items: &[bool]| {
        let t = items.iter().position(|&s| s).map_or(k + 1, |p| p + 1);
        counts[t] += 1;
        total += 1;
    };
    let mut c = vec![0usize; k];
    record(&items);
    let mut i = 1;
    while i < k {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            items.swap(j, i);
            record(&items);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (counts, total)
}

#[test]
fn six_items_two_successes_matches_enumeration() {
    let (counts, total) = first_hit_counts(6, 2);
    assert_eq!(total, 720);
    for t in 1..=5u64 {
        let expected = Ratio::new(counts[t as usize] as u128, total as u128);
        assert_eq!(trial_pmf_exact(6, 2, t).unwrap(), expected, "trial {t}");
        let f = trial_pmf(6, 2, t).unwrap();
        assert!((f - counts[t as usize] as f64 / total as f64).abs() <= 1e-15);
    }
    assert_eq!(trial_pmf(6, 2, 6).unwrap(), 0.0);
}

#[test]
fn monte_carlo_first_hit_mean() {
    let (k, m, draws) = (1000usize, 10usize, 100_000usize);
    let mut rng = rng_from_seed(2024);
    let hits: Vec<f64> = (0..draws)
        .map(|_| {
            // success positions in a uniformly random ordering
            index::sample(&mut rng, k, m).into_iter().min().unwrap() as f64 + 1.0
        })
        .collect();
    let mean = hits.iter().sum::<f64>() / draws as f64;
    let var = hits.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    let e = expected_trials(k as u64, m as u64).unwrap();
    assert!((e - 91.0).abs() < 1e-12);
    assert!((mean - e).abs() <= 3.0 * se, "mean {mean} vs {e}, se {se}");
}

#[test]
fn paper_reference_gains() {
    assert_eq!(gain_db(7.5, 7.5), 0.0);
    assert!((gain_db(1e5, 1.0) - 50.0).abs() < 1e-12);
    assert!((gain_db(300.0, 1.0) - 24.771212547).abs() < 1e-8);
}

#[test]
fn exact_moment_for_small_sets() {
    for k in 1..=8u64 {
        for m in 0..=k {
            let moment: Ratio<u128> = (1..=k - m + 1)
                .map(|t| trial_pmf_exact(k, m, t).unwrap() * Ratio::from_integer(t as u128))
                .sum();
            if m > 0 {
                assert_eq!(moment, expected_trials_exact(k, m).unwrap());
            }
            assert_eq!(expected_trials_exact(k, m).unwrap(), Ratio::new(k as u128 + 1, m as u128 + 1));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pmf_is_a_distribution(k in 1u64..=200, frac in 0.0f64..=1.0) {
        let m = ((k as f64 * frac).round() as u64).clamp(1, k);
        let dist = trial_distribution(k, m).unwrap();
        prop_assert_eq!(dist.len() as u64, k - m + 1);
        let total: f64 = dist.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-10);
        prop_assert!(dist.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn first_moment_matches_formula(k in 1u64..=200, frac in 0.0f64..=1.0) {
        let m = ((k as f64 * frac).round() as u64).clamp(1, k);
        let e = expected_trials(k, m).unwrap();
        prop_assert!((pmf_first_moment(k, m).unwrap() - e).abs() <= 1e-12 * e);
    }

    #[test]
    fn expectation_monotone(k in 1u64..=10_000, m in 0u64..=10_000) {
        let m = m.min(k);
        let e = expected_trials(k, m).unwrap();
        prop_assert!(e >= 1.0);
        if m < k {
            prop_assert!(expected_trials(k, m + 1).unwrap() <= e);
        }
        prop_assert!(expected_trials(k + 1, m).unwrap() >= e);
    }

    #[test]
    fn gain_curve_ignores_sample_order(
        s in prop::collection::vec(0.0f64..=1.0, 1..60),
        c in prop::collection::vec(0.0f64..=1.0, 1..30),
        seed in any::<u64>(),
    ) {
        let grid = [0.1, 0.25, 0.5, 0.75];
        let base = gain_curve(
            &ErrorSample::new(s.clone()).unwrap(),
            &ErrorSample::new(c.clone()).unwrap(),
            &grid,
            None,
        ).unwrap();
        let mut rng = rng_from_seed(seed);
        let (mut s2, mut c2) = (s, c);
        s2.shuffle(&mut rng);
        c2.shuffle(&mut rng);
        let shuffled = gain_curve(&ErrorSample::new(s2).unwrap(), &ErrorSample::new(c2).unwrap(), &grid, None).unwrap();
        prop_assert_eq!(base, shuffled);
    }

    #[test]
    fn decomposition_is_additive(
        s in prop::collection::vec(0.0f64..=1.0, 1..60),
        sp in prop::collection::vec(0.0f64..=1.0, 1..40),
        c in prop::collection::vec(0.0f64..=1.0, 1..30),
    ) {
        let grid = [0.05, 0.2, 0.4, 0.6, 0.95];
        let curve = gain_curve(
            &ErrorSample::new(s).unwrap(),
            &ErrorSample::new(c).unwrap(),
            &grid,
            Some(&ErrorSample::new(sp).unwrap()),
        ).unwrap();
        for p in &curve.points {
            let sum = p.gain_e_db.unwrap() + p.gain_p_db.unwrap();
            prop_assert!((sum - p.gain_db).abs() <= 1e-12);
        }
    }
}
