use cap_core::conformal::{
    aps_set, calibration_scores, conformal_quantile, lac_set, ScoreList, Threshold,
};
use cap_core::dataset::{generate_synthetic, split, ProbRecord, RecordSet, SyntheticSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_row(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-6).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

#[test]
fn scores_are_gathered_true_class_complements() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<(Vec<f64>, usize)> = (0..100)
        .map(|_| (random_row(&mut rng, 5), rng.random_range(0..5)))
        .collect();
    let set = RecordSet::new(
        rows.iter()
            .enumerate()
            .map(|(i, (p, y))| ProbRecord::new(format!("r{i}"), p.clone(), *y).unwrap())
            .collect(),
    )
    .unwrap();
    let scores = calibration_scores(&set).unwrap();
    for ((r, (_, y)), s) in set.iter().zip(&rows).zip(scores.scores()) {
        assert_eq!(*s, 1.0 - r.probs()[*y]);
    }
}

/// Sort-and-index quantile with the rank written out by hand.
fn quantile_oracle(scores: &[f64], alpha: f64) -> Threshold {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut k = 1;
    while (k as f64) < (n as f64 + 1.0) * (1.0 - alpha) - 1e-9 {
        k += 1;
    }
    if k > n {
        Threshold::all_inclusive()
    } else {
        Threshold::at(sorted[k - 1])
    }
}

#[test]
fn quantile_worked_example() {
    let v: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
    let t = conformal_quantile(&ScoreList::new(v).unwrap(), 0.1).unwrap();
    assert_eq!(t, Threshold::at(0.5));
}

#[test]
fn set_worked_examples() {
    // Per-class scores 1 - p: [0.6, 0.65, 0.75]; two fall under 0.7.
    assert_eq!(lac_set(&[0.4, 0.35, 0.25], Threshold::at(0.7)), vec![0, 1]);
    // Cumulative [0.5, 0.8, 1.0] against 0.85.
    assert_eq!(aps_set(&[0.5, 0.3, 0.2], Threshold::at(0.85)), vec![0, 1]);
}

fn lac_oracle(probs: &[f64], t: Threshold) -> Vec<usize> {
    let mut out = Vec::new();
    for (y, p) in probs.iter().enumerate() {
        if t.all_inclusive || 1.0 - p <= t.value {
            out.push(y);
        }
    }
    if out.is_empty() {
        let mut best = 0;
        for y in 1..probs.len() {
            if probs[y] > probs[best] {
                best = y;
            }
        }
        out.push(best);
    }
    out
}

fn aps_oracle(probs: &[f64], t: Threshold) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = probs.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    let mut cum = 0.0;
    for (p, y) in &ranked {
        cum += p;
        if t.all_inclusive || cum.min(1.0) <= t.value {
            out.push(*y);
        } else {
            break;
        }
    }
    if out.is_empty() {
        out.push(ranked[0].1);
    }
    out.sort();
    out
}

fn prob_row() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, 2..8).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn threshold() -> impl Strategy<Value = Threshold> {
    prop_oneof![9 => (0.0f64..=1.0).prop_map(Threshold::at), 1 => Just(Threshold::all_inclusive())]
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

proptest! {
    #[test]
    fn quantile_matches_oracle(scores in prop::collection::vec(0.0f64..=1.0, 1..200), alpha in 0.001f64..0.999) {
        let got = conformal_quantile(&ScoreList::new(scores.clone()).unwrap(), alpha).unwrap();
        prop_assert_eq!(got, quantile_oracle(&scores, alpha));
    }

    #[test]
    fn quantile_is_monotone_in_level(scores in prop::collection::vec(0.0f64..=1.0, 1..100), a in 0.001f64..0.999, b in 0.001f64..0.999) {
        let list = ScoreList::new(scores).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        // Smaller miscoverage means a higher level and a looser cutoff.
        let loose = conformal_quantile(&list, lo).unwrap();
        let tight = conformal_quantile(&list, hi).unwrap();
        prop_assert!(tight.le(&loose));
    }

    #[test]
    fn sets_match_oracles(p in prob_row(), t in threshold()) {
        prop_assert_eq!(lac_set(&p, t), lac_oracle(&p, t));
        prop_assert_eq!(aps_set(&p, t), aps_oracle(&p, t));
    }

    #[test]
    fn sets_are_nested(p in prob_row(), t1 in threshold(), t2 in threshold()) {
        let (lo, hi) = if t1.le(&t2) { (t1, t2) } else { (t2, t1) };
        prop_assert!(is_subset(&lac_set(&p, lo), &lac_set(&p, hi)));
        prop_assert!(is_subset(&aps_set(&p, lo), &aps_set(&p, hi)));
        prop_assert!(!lac_set(&p, lo).is_empty());
        prop_assert!(!aps_set(&p, lo).is_empty());
    }
}

/// Fraction of test labels inside the unfloored LAC set, so the statistic is
/// exactly the conformal event `1 - p_y <= q`.
fn raw_lac_coverage(seed: u64, alpha: f64) -> f64 {
    let set = generate_synthetic(&SyntheticSpec::new(4000, 6, 1.5, 0.0, seed)).unwrap();
    let parts = split(&set, 0.5, seed ^ 0x5eed).unwrap();
    let q = conformal_quantile(&calibration_scores(&parts.calibration).unwrap(), alpha).unwrap();
    let hits = parts
        .test
        .iter()
        .filter(|r| q.admits(1.0 - r.probs()[r.label()]))
        .count();
    hits as f64 / parts.test.len() as f64
}

#[test]
fn coverage_holds_and_is_nearly_exact() {
    let alpha = 0.1;
    let n_cal = 2000.0;
    let runs: Vec<f64> = (0..20).map(|s| raw_lac_coverage(s, alpha)).collect();
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    assert!(mean >= 0.895, "mean coverage {mean}");
    assert!(
        mean <= 1.0 - alpha + 1.0 / (n_cal + 1.0) + 0.01,
        "mean coverage {mean}"
    );
}
