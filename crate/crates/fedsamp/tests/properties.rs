//! Property-based invariants for the sampling core.

use fedsamp::sampling::{
    aocs_probabilities, estimator_variance, improvement_factors, ocs_probabilities,
    oracle_objective_of, uniform_probabilities, ProbabilityVector, WeightedNormVector,
};
use proptest::prelude::*;

fn norms_strategy(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 2..=max_n).prop_map(|zs| {
        zs.into_iter().map(|z| z.exp()).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn budget_is_exhausted_or_everyone_sampled(values in norms_strategy(24), m in 1usize..12) {
        let norms = WeightedNormVector::new(values).unwrap();
        let n = norms.len();
        let p = ocs_probabilities(&norms, m).unwrap();
        let total = p.expected_participants();
        if m >= n {
            prop_assert!(p.probs().iter().all(|&x| x == 1.0));
        } else {
            prop_assert!((total - m as f64).abs() <= 1e-9, "total {total} m {m}");
        }
    }

    #[test]
    fn closed_form_beats_random_feasible_vectors(
        values in norms_strategy(10),
        m in 1usize..6,
        raw in prop::collection::vec(0.05..1.0f64, 10),
    ) {
        let norms = WeightedNormVector::new(values).unwrap();
        let n = norms.len();
        prop_assume!(m < n);
        let p = ocs_probabilities(&norms, m).unwrap();
        // Scale an arbitrary positive vector onto the budget.
        let mut q: Vec<f64> = raw[..n].to_vec();
        let s: f64 = q.iter().sum();
        for v in &mut q {
            *v = (*v * m as f64 / s).min(1.0);
        }
        let q = ProbabilityVector::new(q, m).unwrap();
        let obj_p = oracle_objective_of(&norms, &p).unwrap();
        let obj_q = oracle_objective_of(&norms, &q).unwrap();
        prop_assert!(obj_p <= obj_q * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn scale_invariance(values in norms_strategy(16), m in 1usize..8, c in 0.01..100.0f64) {
        let base = WeightedNormVector::new(values.clone()).unwrap();
        let scaled = WeightedNormVector::new(values.iter().map(|v| v * c).collect()).unwrap();
        let p1 = ocs_probabilities(&base, m).unwrap();
        let p2 = ocs_probabilities(&scaled, m).unwrap();
        for (a, b) in p1.probs().iter().zip(p2.probs()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn iteration_with_full_budget_matches_closed_form(values in norms_strategy(32), m in 1usize..16) {
        let norms = WeightedNormVector::new(values).unwrap();
        let exact = ocs_probabilities(&norms, m).unwrap();
        let (approx, _) = aocs_probabilities(&norms, m, norms.len()).unwrap();
        for (a, b) in approx.probs().iter().zip(exact.probs()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn probabilities_are_monotone_in_norms(values in norms_strategy(16), m in 1usize..8) {
        let norms = WeightedNormVector::new(values.clone()).unwrap();
        let p = ocs_probabilities(&norms, m).unwrap();
        let mut idx: Vec<usize> = (0..norms.len()).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        for w in idx.windows(2) {
            prop_assert!(p.probs()[w[0]] <= p.probs()[w[1]] + 1e-12);
        }
    }

    #[test]
    fn never_worse_than_uniform(values in norms_strategy(16), m in 1usize..8) {
        let norms = WeightedNormVector::new(values).unwrap();
        let n = norms.len();
        prop_assume!(m <= n);
        let opt = ocs_probabilities(&norms, m).unwrap();
        let unif = uniform_probabilities(n, m).unwrap();
        let v_opt = estimator_variance(&norms, &opt).unwrap();
        let v_unif = estimator_variance(&norms, &unif).unwrap();
        prop_assert!(v_opt <= v_unif * (1.0 + 1e-12) + 1e-12);

        let (alpha, gamma) = improvement_factors(&norms, m).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&alpha));
        prop_assert!(gamma >= m as f64 / n as f64 - 1e-12 && gamma <= 1.0 + 1e-12);
    }

    #[test]
    fn variance_decreases_with_budget(values in norms_strategy(12)) {
        let norms = WeightedNormVector::new(values).unwrap();
        let n = norms.len();
        let mut prev = f64::INFINITY;
        for m in 1..=n {
            let p = ocs_probabilities(&norms, m).unwrap();
            let v = estimator_variance(&norms, &p).unwrap();
            prop_assert!(v <= prev * (1.0 + 1e-12) + 1e-12);
            prev = v;
        }
    }
}
