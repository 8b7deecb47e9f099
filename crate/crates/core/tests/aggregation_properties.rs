mod common;

use common::{max_abs_diff, random_snapshot, reference_average, rng, simplex, tiny_arch};
use proptest::prelude::*;
use rand::Rng;
use splitfed::aggregation::{
    aggregate, federated_average, naive_average, quality_scores, smart_weights, weighted_average, Strategy as Method,
};

#[test]
fn averages_match_elementwise_reference() {
    let arch = tiny_arch();
    for case in 0..100u64 {
        let mut r = rng(case);
        let n = r.gen_range(1..=8);
        let snaps: Vec<_> = (0..n).map(|_| random_snapshot(&arch, &mut r)).collect();
        let m: Vec<usize> = (0..n).map(|_| r.gen_range(1..300)).collect();
        let total: usize = m.iter().sum();
        let w = simplex(&mut r, n);

        let naive = reference_average(&snaps, &vec![1.0 / n as f64; n]);
        let fed = reference_average(&snaps, &m.iter().map(|&x| x as f64 / total as f64).collect::<Vec<_>>());
        let weighted = reference_average(&snaps, &w);
        assert!(max_abs_diff(naive_average(&snaps).unwrap().values(), &naive) <= 1e-15);
        assert!(max_abs_diff(federated_average(&snaps, &m).unwrap().values(), &fed) <= 1e-15);
        assert!(max_abs_diff(weighted_average(&snaps, &w).unwrap().values(), &weighted) <= 1e-15);
    }
}

#[test]
fn weighted_average_with_data_shares_is_federated_average() {
    let arch = tiny_arch();
    let mut r = rng(9);
    let snaps: Vec<_> = (0..5).map(|_| random_snapshot(&arch, &mut r)).collect();
    let m = [210, 120, 85, 180, 120];
    let d: Vec<f64> = m.iter().map(|&x| x as f64 / 715.0).collect();
    let a: Vec<f64> = weighted_average(&snaps, &d).unwrap().values().collect();
    assert!(max_abs_diff(federated_average(&snaps, &m).unwrap().values(), &a) <= 1e-15);
    let uniform: Vec<f64> = naive_average(&snaps).unwrap().values().collect();
    assert!(max_abs_diff(federated_average(&snaps, &[3; 5]).unwrap().values(), &uniform) <= 1e-15);
}

#[test]
fn two_client_smart_weights() {
    // softmax([9, 1]) in closed form
    let hi = 1.0 / (1.0 + (-8.0f64).exp());
    let w = smart_weights(&[0.1, 0.9], &[1, 1], 10.0).unwrap();
    assert!((w.r[0] - hi).abs() <= 1e-12 && (w.r[1] - (1.0 - hi)).abs() <= 1e-12);
    assert!((w.r[0] - 0.999665).abs() < 1e-6);
}

fn indicators_and_counts() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1usize..8).prop_flat_map(|n| (prop::collection::vec(-1.0f64..3.0, n), prop::collection::vec(1usize..400, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn smart_weights_lie_on_the_simplex((b, m) in indicators_and_counts(), alpha in 0.0f64..50.0) {
        let w = smart_weights(&b, &m, alpha).unwrap();
        for v in [&w.d, &w.q, &w.r] {
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(w.q.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn raising_an_indicator_lowers_that_clients_weight(
        (b, m) in indicators_and_counts().prop_filter("two or more clients", |(b, _)| b.len() >= 2),
        k in any::<prop::sample::Index>(),
        delta in 0.01f64..1.0,
    ) {
        let k = k.index(b.len());
        let before = smart_weights(&b, &m, 10.0).unwrap().r[k];
        let mut raised = b.clone();
        raised[k] += delta;
        let after = smart_weights(&raised, &m, 10.0).unwrap().r[k];
        prop_assert!(after < before, "{} !< {}", after, before);
    }

    #[test]
    fn shifting_all_indicators_changes_nothing((b, m) in indicators_and_counts(), c in -5.0f64..5.0) {
        let q = quality_scores(&b, 10.0).unwrap();
        let shifted: Vec<f64> = b.iter().map(|x| x + c).collect();
        let q2 = quality_scores(&shifted, 10.0).unwrap();
        for (x, y) in q.iter().zip(&q2) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let r = smart_weights(&b, &m, 10.0).unwrap().r;
        let r2 = smart_weights(&shifted, &m, 10.0).unwrap().r;
        for (x, y) in r.iter().zip(&r2) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_indicators_reduce_smart_to_federated(n in 1usize..7, level in 0.0f64..2.0, seed in any::<u64>()) {
        let arch = tiny_arch();
        let mut r = rng(seed);
        let snaps: Vec<_> = (0..n).map(|_| random_snapshot(&arch, &mut r)).collect();
        let m: Vec<usize> = (0..n).map(|_| r.gen_range(1..100)).collect();
        let b = vec![level; n];
        let smart: Vec<f64> = aggregate(Method::Smart, &snaps, &m, &b, 10.0).unwrap().model.values().collect();
        let fed: Vec<f64> = federated_average(&snaps, &m).unwrap().values().collect();
        prop_assert!(max_abs_diff(smart.iter().copied(), &fed) <= 1e-12);
        let equal = vec![m[0]; n];
        let smart_eq: Vec<f64> = aggregate(Method::Smart, &snaps, &equal, &b, 10.0).unwrap().model.values().collect();
        let naive: Vec<f64> = naive_average(&snaps).unwrap().values().collect();
        prop_assert!(max_abs_diff(smart_eq.iter().copied(), &naive) <= 1e-12);
    }

    #[test]
    fn every_strategy_stays_inside_the_client_envelope(n in 1usize..7, seed in any::<u64>()) {
        let arch = tiny_arch();
        let mut r = rng(seed);
        let snaps: Vec<_> = (0..n).map(|_| random_snapshot(&arch, &mut r)).collect();
        let m: Vec<usize> = (0..n).map(|_| r.gen_range(1..100)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.5)).collect();
        let cols: Vec<Vec<f64>> = snaps.iter().map(|s| s.values().collect()).collect();
        for strategy in Method::ALL {
            let agg = aggregate(strategy, &snaps, &m, &b, 10.0).unwrap();
            prop_assert!((agg.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(agg.weights.iter().all(|&w| w >= 0.0));
            for (j, v) in agg.model.values().enumerate() {
                let lo = cols.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
                let hi = cols.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= v && v <= hi);
            }
        }
    }
}

#[test]
fn single_client_gets_everything() {
    let arch = tiny_arch();
    let s = random_snapshot(&arch, &mut rng(2));
    for strategy in Method::ALL {
        let agg = aggregate(strategy, std::slice::from_ref(&s), &[17], &[0.8], 10.0).unwrap();
        assert_eq!(agg.model, s);
        assert_eq!(agg.weights, vec![1.0]);
    }
}
