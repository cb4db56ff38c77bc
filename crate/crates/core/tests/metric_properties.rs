use proptest::prelude::*;

use tetraloss::metrics::{evaluate, rates_at_threshold, similarity, threshold_at_fmr, ScoreSet, FRONTEX_FMR_TARGETS};

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    // coarse grid half the time, to force ties
    prop_oneof![
        prop::collection::vec(0.0f64..=1.0, 1..max),
        prop::collection::vec((0u32..=20).prop_map(|k| k as f64 / 20.0), 1..max),
    ]
}

fn score_set() -> impl Strategy<Value = ScoreSet> {
    (scores(200), scores(400), scores(200)).prop_map(|(mated, nonmated, morph_attacks)| ScoreSet { mated, nonmated, morph_attacks })
}

fn candidates(s: &ScoreSet) -> Vec<f64> {
    let mut c: Vec<f64> = s.mated.iter().chain(&s.nonmated).chain(&s.morph_attacks).copied().collect();
    c.extend([-0.5, 1.5]);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

fn fmr(nonmated: &[f64], t: f64) -> f64 {
    nonmated.iter().filter(|&&s| s >= t).count() as f64 / nonmated.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rates_are_monotone_in_threshold(s in score_set()) {
        let mut prev = rates_at_threshold(&s, f64::NEG_INFINITY).unwrap();
        prop_assert_eq!((prev.fmr, prev.fnmr, prev.iapar), (1.0, 0.0, 1.0));
        for t in candidates(&s) {
            let r = rates_at_threshold(&s, t).unwrap();
            prop_assert!(r.fmr <= prev.fmr && r.iapar <= prev.iapar && r.fnmr >= prev.fnmr);
            prev = r;
        }
    }

    #[test]
    fn threshold_is_the_smallest_feasible_candidate(s in score_set(), target in prop_oneof![Just(0.0), 0.0f64..0.2, Just(1.0)]) {
        let tau = threshold_at_fmr(&s.nonmated, target).unwrap();
        prop_assert!(fmr(&s.nonmated, tau) <= target);
        for &c in s.nonmated.iter().filter(|&&c| c < tau) {
            prop_assert!(fmr(&s.nonmated, c) > target);
        }
    }

    #[test]
    fn report_identity(s in score_set()) {
        let r = evaluate("x", &s, &FRONTEX_FMR_TARGETS).unwrap();
        for p in &r.points {
            prop_assert!((p.riapar - (p.fnmr + p.iapar)).abs() <= 1e-15);
            prop_assert!(p.fmr <= p.target_fmr);
        }
    }

    #[test]
    fn similarity_stays_in_unit_interval(d in 0.0f64..=4.0) {
        let s = similarity(d);
        prop_assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let s = ScoreSet { mated: vec![0.1, 1.0 / 3.0], nonmated: vec![0.0, 2f64.sqrt() / 2.0], morph_attacks: vec![0.999999999999] };
    assert_eq!(ScoreSet::from_csv(&s.to_csv()).unwrap(), s);
}
