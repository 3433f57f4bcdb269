mod common;

use pilot_whittle::channel::{
    belief_propagate, check_a1, generate_doubly_stochastic, BeliefLabel, BeliefState, BeliefTable, ChannelModel,
};
use pilot_whittle::fluid::FluidSystem;
use pilot_whittle::index::{occupancy, whittle_closed_form, whittle_envelope_oracle, ThresholdPolicy};
use pilot_whittle::sim::top_m;
use proptest::prelude::*;

use common::random_arm;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn propagation_keeps_beliefs_normalised(k in 2usize..6, seed in any::<u64>(), age in 1usize..30) {
        let m = ChannelModel::new(generate_doubly_stochastic(k, seed), (1..=k).map(|r| r as f64).collect()).unwrap();
        let mut b = BeliefState::fresh(&m, (seed % k as u64) as usize);
        for _ in 0..age {
            b = belief_propagate(&b, &m, 64);
            let total: f64 = b.vector.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(b.vector.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn doubly_stochastic_means_uniform_steady_state(k in 2usize..7, seed in any::<u64>()) {
        let m = ChannelModel::new(generate_doubly_stochastic(k, seed), vec![1.0; k]).unwrap();
        prop_assert!(m.is_doubly_stochastic(1e-12));
        for &p in m.steady() {
            prop_assert!((p - 1.0 / k as f64).abs() < 1e-10);
        }
        prop_assert!(check_a1(&m, 16).passed);
    }

    #[test]
    fn table_rows_are_powers(k in 2usize..5, seed in any::<u64>(), tau_bar in 1usize..12) {
        let m = ChannelModel::new(generate_doubly_stochastic(k, seed), vec![1.0; k]).unwrap();
        let t = BeliefTable::build(&m, tau_bar);
        for j in 0..k {
            let mut v = vec![0.0; k];
            v[j] = 1.0;
            for age in 1..=tau_bar {
                v = m.step(&v);
                let e = t.entry(j, age);
                prop_assert!(v.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        prop_assert_eq!(t.index(BeliefLabel::Steady), t.len() - 1);
    }

    #[test]
    fn index_is_monotone_in_age(k in 2usize..5, tau_bar in 2usize..16, seed in any::<u64>()) {
        let arm = random_arm(k, tau_bar, seed);
        for j in 0..k {
            for age in 1..=tau_bar {
                prop_assert!(arm.index.index(j, age) <= arm.index.index(j, age + 1));
            }
        }
    }

    #[test]
    fn index_scales_with_rewards(k in 2usize..4, tau_bar in 2usize..10, seed in any::<u64>(), c in 0.01f64..100.0) {
        let arm = random_arm(k, tau_bar, seed);
        let scaled = whittle_closed_form(&arm.rewards.scaled(c), &arm.omega);
        let a = arm.index.flat();
        let b = scaled.flat();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((c * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn closed_form_matches_envelope(k in 2usize..4, tau_bar in 2usize..6, seed in any::<u64>()) {
        let arm = random_arm(k, tau_bar, seed);
        let env = whittle_envelope_oracle(&arm.rewards, &arm.omega, tau_bar, 2_000_000).unwrap();
        prop_assert!(arm.index.max_abs_diff(&env) <= 1e-9);
    }

    #[test]
    fn occupancy_sums_to_one(gamma in proptest::collection::vec(0usize..40, 2..6), seed in any::<u64>()) {
        let k = gamma.len();
        let m = ChannelModel::new(generate_doubly_stochastic(k, seed), vec![1.0; k]).unwrap();
        let om = pilot_whittle::index::omega(&m);
        let occ = occupancy(&ThresholdPolicy::new(gamma), &om);
        prop_assert!((occ.total() - 1.0).abs() < 1e-12);
        prop_assert!(occ.passive_mass() >= 0.0 && occ.passive_mass() < 1.0);
    }

    #[test]
    fn fluid_drift_conserves_class_mass(seed in any::<u64>(), lambda in 0.05f64..0.95, delta in 0.1f64..0.9) {
        let sys = FluidSystem::new(random_arm(3, 5, seed), random_arm(3, 5, seed ^ 1), [delta, 1.0 - delta], lambda)
            .unwrap();
        let pc = sys.per_class();
        let mut y: Vec<f64> = (0..sys.dim()).map(|g| (((g as u64 * 2654435761) ^ seed) % 97) as f64 + 1.0).collect();
        for c in 0..2 {
            let s: f64 = y[c * pc..(c + 1) * pc].iter().sum();
            let d = [delta, 1.0 - delta][c];
            y[c * pc..(c + 1) * pc].iter_mut().for_each(|v| *v *= d / s);
        }
        let d = sys.drift(&y);
        prop_assert!(d[..pc].iter().sum::<f64>().abs() < 1e-12);
        prop_assert!(d[pc..].iter().sum::<f64>().abs() < 1e-12);
        let next: Vec<f64> = y.iter().zip(&d).map(|(a, b)| a + b).collect();
        prop_assert!(next.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn selection_never_exceeds_budget(scores in proptest::collection::vec(-5.0f64..5.0, 1..40), m in 0usize..40) {
        let m = m.min(scores.len());
        let chosen = top_m(&scores, m);
        prop_assert_eq!(chosen.len(), m);
        let worst_in = chosen.iter().map(|&u| scores[u]).fold(f64::INFINITY, f64::min);
        for u in (0..scores.len()).filter(|u| !chosen.contains(u)) {
            prop_assert!(scores[u] <= worst_in);
        }
    }
}
