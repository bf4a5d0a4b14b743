use cap_core::conformal::{calibration_scores, lac_set, test_score, ScoreList, Threshold};
use cap_core::dataset::{generate_synthetic, split, ProbRecord, RecordSet, SyntheticSpec};
use cap_core::policy::{
    action_probabilities, compute_thresholds, decide_deterministic, decide_stochastic, predict,
    ActionDistribution, Decision, DecisionMode, PolicyConfig, Regime, ThresholdPair,
};
use cap_core::rng::seeded;
use proptest::prelude::*;

fn pair(q_predict: f64, q_abstain: f64) -> ThresholdPair {
    ThresholdPair {
        q_predict: Threshold::at(q_predict),
        q_abstain: Threshold::at(q_abstain),
        alpha: 0.1,
        beta: 0.05,
    }
}

#[test]
fn order_statistic_thresholds() {
    let scores = ScoreList::new((1..=10).map(|i| i as f64 / 10.0).collect()).unwrap();
    let t = compute_thresholds(&scores, 0.2, 0.1).unwrap();
    // Ranks ceil(11 * 0.8) = 9 and ceil(11 * 0.9) = 10.
    assert_eq!(t.q_predict, Threshold::at(0.9));
    assert_eq!(t.q_abstain, Threshold::at(1.0));
}

#[test]
fn sigmoid_evaluation() {
    let config = PolicyConfig {
        c: 10.0,
        ..PolicyConfig::default()
    };
    let t = pair(0.5, 5.0);
    let d = action_probabilities(0.3, &t, &config);
    let expected = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((d.p_single - expected).abs() < 1e-12);
    assert!((d.p_single - 0.8808).abs() < 1e-4);
}

#[test]
fn stochastic_draw_frequencies() {
    let dist = ActionDistribution {
        p_single: 0.5,
        p_set: 0.3,
        p_abstain: 0.2,
    };
    let mut rng = seeded(9);
    let mut counts = [0usize; 3];
    let draws = 100_000;
    for _ in 0..draws {
        counts[decide_stochastic(&dist, &mut rng).index()] += 1;
    }
    for (c, p) in counts.iter().zip(dist.as_array()) {
        assert!((*c as f64 / draws as f64 - p).abs() <= 0.01, "{counts:?}");
    }
}

#[test]
fn deterministic_counts_match_repartition() {
    let parts = split(&argmax_labelled(4, 2000), 0.5, 4).unwrap();
    let t =
        compute_thresholds(&calibration_scores(&parts.calibration).unwrap(), 0.2, 0.05).unwrap();
    let config = PolicyConfig::default();

    let mut counts = [0usize; 3];
    let mut oracle = [0usize; 3];
    for r in parts.test.iter() {
        let d = predict(r, &t, &config, DecisionMode::Deterministic, &mut seeded(0));
        counts[d.regime().index()] += 1;

        let s = 1.0 - r.probs().iter().cloned().fold(0.0, f64::max);
        let bucket = if s < t.q_predict.value {
            0
        } else if s < t.q_abstain.value {
            1
        } else {
            2
        };
        oracle[bucket] += 1;
        match (bucket, &d) {
            (0, Decision::Single(y)) => assert_eq!(*y, r.argmax()),
            (1, Decision::Set(labels)) => assert_eq!(labels, &lac_set(r.probs(), t.q_abstain)),
            (2, Decision::Abstain) => {}
            other => panic!("mismatch {other:?}"),
        }
    }
    assert_eq!(counts, oracle);
    assert_eq!(counts.iter().sum::<usize>(), parts.test.len());
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}

/// Relabels every record with its own argmax so calibration scores
/// `1 - p_y` and test scores `1 - max p` share one distribution.
fn argmax_labelled(seed: u64, n: usize) -> RecordSet {
    let set = generate_synthetic(&SyntheticSpec::new(n, 6, 1.5, 0.0, seed)).unwrap();
    RecordSet::new(
        set.iter()
            .map(|r| ProbRecord::new(r.id(), r.probs().to_vec(), r.argmax()).unwrap())
            .collect(),
    )
    .unwrap()
}

#[test]
fn abstention_rate_tracks_beta() {
    for seed in 0..10 {
        let parts = split(&argmax_labelled(seed, 10_000), 0.5, seed).unwrap();
        let scores = calibration_scores(&parts.calibration).unwrap();
        for beta in [0.05, 0.1, 0.2] {
            let t = compute_thresholds(&scores, 0.25, beta).unwrap();
            let abstained = parts
                .test
                .iter()
                .filter(|r| decide_deterministic(test_score(r.probs()), &t) == Regime::Abstain)
                .count();
            let rate = abstained as f64 / parts.test.len() as f64;
            assert!(
                (rate - beta).abs() <= 0.02,
                "seed {seed} beta {beta}: rate {rate}"
            );
        }
    }
}

fn pair_strategy() -> impl Strategy<Value = ThresholdPair> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| pair(a.min(b), a.max(b)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn distribution_is_valid(s in 0.0f64..=1.0, a in -0.5f64..1.5, b in -0.5f64..1.5, c in 1e-3f64..1e4) {
        let config = PolicyConfig { c, ..PolicyConfig::default() };
        let d = action_probabilities(s, &pair(a, b), &config);
        let p = d.as_array();
        prop_assert!(p.iter().all(|x| *x >= 0.0 && x.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn probabilities_are_monotone(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0, t in pair_strategy(), c in 1.0f64..200.0) {
        let config = PolicyConfig { c, ..PolicyConfig::default() };
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let (dl, dh) = (action_probabilities(lo, &t, &config), action_probabilities(hi, &t, &config));
        let raw_single = |s: f64| 1.0 / (1.0 + (c * (s - t.q_predict.value)).exp());
        let raw_abstain = |s: f64| 1.0 / (1.0 + (-c * (s - t.q_abstain.value)).exp());
        prop_assert!(raw_single(hi) <= raw_single(lo) + 1e-15);
        prop_assert!(raw_abstain(hi) + 1e-15 >= raw_abstain(lo));
        // With ordered thresholds no clamping happens and the raw forms are returned.
        prop_assert!((dl.p_single - raw_single(lo)).abs() < 1e-12);
        prop_assert!((dh.p_abstain - raw_abstain(hi)).abs() < 1e-12);
    }

    #[test]
    fn regimes_partition_scores(s in 0.0f64..=1.0, t in pair_strategy()) {
        let r = decide_deterministic(s, &t);
        let single = s < t.q_predict.value;
        let abstain = s >= t.q_abstain.value;
        let set = !single && !abstain;
        prop_assert_eq!(usize::from(single) + usize::from(set) + usize::from(abstain), 1);
        prop_assert_eq!(r == Regime::Single, single);
        prop_assert_eq!(r == Regime::Abstain, abstain);
    }
}
