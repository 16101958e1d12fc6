mod common;

use common::dynamic_update_oracle;
use moemix::scheduler::{
    dynamic_update, inverse_update, path_total_variation, random_policy, sequential_policy,
    SamplingWeights,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex_and_delta() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(0.001f64..1.0, n),
            prop::collection::vec(-2.0f64..2.0, n),
        )
            .prop_map(|(raw, d)| {
                let s: f64 = raw.iter().sum();
                (raw.iter().map(|x| x / s).collect(), d)
            })
    })
}

fn weights(w: &[f64]) -> SamplingWeights {
    SamplingWeights::from_simplex(w.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_double_double_oracle((w, d) in simplex_and_delta(), eta in 0.0f64..30.0, c in 0.0f64..0.9) {
        let got = dynamic_update(&weights(&w), &d, eta, c).unwrap();
        let want = dynamic_update_oracle(&w, &d, eta, c);
        for (a, b) in got.w.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_on_the_simplex((w, d) in simplex_and_delta(), eta in 0.0f64..50.0, c in 0.0f64..0.99) {
        let out = dynamic_update(&weights(&w), &d, eta, c).unwrap();
        prop_assert!((out.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.w.iter().all(|&x| x >= c / w.len() as f64 * (1.0 - 1e-12)));
    }

    #[test]
    fn shift_invariant((w, d) in simplex_and_delta(), a in -100.0f64..100.0, eta in 0.0f64..10.0) {
        let shifted: Vec<f64> = d.iter().map(|x| x + a).collect();
        let x = dynamic_update(&weights(&w), &d, eta, 0.1).unwrap();
        let y = dynamic_update(&weights(&w), &shifted, eta, 0.1).unwrap();
        for (p, q) in x.w.iter().zip(&y.w) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_follows_delta((w, d) in simplex_and_delta(), eta in 0.01f64..10.0) {
        let alpha = dynamic_update(&weights(&w), &d, eta, 0.0).unwrap();
        for i in 0..w.len() {
            for j in 0..w.len() {
                if d[i] > d[j] + 1e-9 {
                    prop_assert!(alpha.w[i] / w[i] > alpha.w[j] / w[j]);
                }
            }
        }
    }

    #[test]
    fn inverse_is_negated_dynamic((w, d) in simplex_and_delta(), eta in 0.0f64..10.0, c in 0.0f64..0.5) {
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        prop_assert_eq!(
            inverse_update(&weights(&w), &d, eta, c).unwrap(),
            dynamic_update(&weights(&w), &neg, eta, c).unwrap()
        );
    }

    #[test]
    fn constant_delta_only_smooths((w, _) in simplex_and_delta(), k in -3.0f64..3.0, c in 0.0f64..0.5) {
        let d = vec![k; w.len()];
        let out = dynamic_update(&weights(&w), &d, 10.0, c).unwrap();
        let n = w.len() as f64;
        for (o, x) in out.w.iter().zip(&w) {
            prop_assert!((o - ((1.0 - c) * x + c / n)).abs() < 1e-12);
        }
    }

    #[test]
    fn baselines_stay_on_the_simplex(n in 1usize..12, round in 0usize..50, seed in any::<u64>(), rho in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in [random_policy(n, rho, &mut rng), sequential_policy(round, n)] {
            prop_assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn repeated_updates_never_leave_the_simplex((w, d) in simplex_and_delta(), rounds in 1usize..40) {
        let mut cur = weights(&w);
        let mut path = Vec::new();
        for t in 0..rounds {
            let dt: Vec<f64> = d.iter().map(|x| x * (1.0 + t as f64 * 0.1)).collect();
            cur = dynamic_update(&cur, &dt, 10.0, 0.05).unwrap();
            path.push(moemix::scheduler::RoundWeights {
                round: t + 1,
                step: (t + 1) * 100,
                weights: cur.w.clone(),
                signal: dt,
            });
        }
        prop_assert_eq!(cur.round, rounds);
        prop_assert!((cur.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let tv = path_total_variation(&w, &path);
        prop_assert!(tv.iter().all(|&x| (0.0..=2.0 * rounds as f64).contains(&x)));
    }
}

#[test]
fn double_double_exp_and_ln_are_accurate() {
    use common::{dd_exp, dd_ln};
    use twofloat::TwoFloat;
    let ln2 = dd_ln(TwoFloat::from(2.0));
    assert_eq!(ln2.hi(), std::f64::consts::LN_2);
    assert!((ln2.lo() - 2.319046813846299558e-17).abs() < 1e-30);
    let e = dd_exp(TwoFloat::from(1.0));
    assert_eq!(e.hi(), std::f64::consts::E);
    for x in [-30.0f64, -1.5, -1e-3, 0.0, 0.7, 12.0] {
        let t = TwoFloat::from(x);
        let back = dd_ln(dd_exp(t));
        assert!(f64::from(back - t).abs() < 1e-28 + 1e-30 * x.abs(), "{x}");
    }
}
