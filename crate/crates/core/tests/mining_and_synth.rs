use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tetraloss::embedding::{sq_dist, Embedding, SampleKind};
use tetraloss::metrics::{build_comparisons, evaluate, score_pairs, ComparisonProtocol};
use tetraloss::mining::{build_quadruplets, sample_epoch_batches, validate_quadruplet};
use tetraloss::synth::{generate_universe, morph_embedding, split_protocol, SplitProtocol, UniverseConfig};

fn unit(v: Vec<f64>) -> Embedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.into_iter().map(|x| x / n).collect()).unwrap()
}

#[test]
fn every_quadruplet_is_valid_and_every_morph_is_used() {
    let u = generate_universe(&UniverseConfig::toy()).unwrap();
    let train = split_protocol(&u, &SplitProtocol::default()).unwrap().train;
    let quads = build_quadruplets(&train, 3).unwrap();
    assert!(quads.iter().all(|q| validate_quadruplet(q, &train).unwrap()));

    let used: BTreeSet<&str> = quads.iter().map(|q| q.morph_id.as_str()).collect();
    let has_pair = |s: &str| {
        let kinds: BTreeSet<SampleKind> =
            train.records().iter().filter(|r| r.kind.is_bona_fide() && r.subject_a == s).map(|r| r.kind).collect();
        kinds.len() == 2
    };
    for m in train.records().iter().filter(|r| r.kind == SampleKind::Morph) {
        let eligible = has_pair(&m.subject_a) || has_pair(m.subject_b.as_deref().unwrap());
        assert_eq!(used.contains(m.sample_id.as_str()), eligible, "{}", m.sample_id);
    }
}

proptest! {
    #[test]
    fn epoch_batches_are_a_permutation(count in 2usize..300, batch in 2usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = sample_epoch_batches(count, batch, seed, epoch);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() >= 2 && b.len() <= batch));
        seen.sort_unstable();
        seen.dedup();
        let expected = if count % batch == 1 { count - 1 } else { count };
        prop_assert_eq!(seen.len(), expected);
        prop_assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), expected);
        prop_assert_eq!(&batches, &sample_epoch_batches(count, batch, seed, epoch));
    }

    #[test]
    fn balanced_noiseless_morph_is_equidistant(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        alpha in 0.55f64..0.95,
    ) {
        prop_assume!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1e-3);
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let (e1, e2) = (unit(a), unit(b));
        prop_assume!(sq_dist(&e1, &e2).unwrap() > 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mid = morph_embedding(&e1, &e2, 0.5, 0.0, &mut rng).unwrap();
        prop_assert!((sq_dist(&mid, &e1).unwrap() - sq_dist(&mid, &e2).unwrap()).abs() <= 1e-12);
        prop_assert!((mid.norm() - 1.0).abs() <= 1e-9);
        let skew = morph_embedding(&e1, &e2, alpha, 0.0, &mut rng).unwrap();
        prop_assert!(sq_dist(&skew, &e1).unwrap() < sq_dist(&skew, &e2).unwrap());
    }
}

#[test]
fn universe_is_unit_norm_and_deterministic() {
    let cfg = UniverseConfig { seed: 17, ..UniverseConfig::toy() };
    let u = generate_universe(&cfg).unwrap();
    assert!(u.set.records().iter().all(|r| (r.embedding.norm() - 1.0).abs() <= 1e-9));
    assert_eq!(generate_universe(&cfg).unwrap(), u);
    assert_ne!(generate_universe(&UniverseConfig { seed: 18, ..cfg }).unwrap().set, u.set);
}

#[test]
fn splits_keep_partitions_apart() {
    let u = generate_universe(&UniverseConfig::toy()).unwrap();
    let s = split_protocol(&u, &SplitProtocol::default()).unwrap();
    let subjects = |set: &tetraloss::embedding::EmbeddingSet| -> BTreeSet<String> {
        set.all_subjects().into_iter().map(str::to_string).collect()
    };
    assert!(subjects(&s.train).is_disjoint(&subjects(&s.test)));
    let tools = |set: &tetraloss::embedding::EmbeddingSet| -> BTreeSet<String> {
        set.records().iter().filter_map(|r| r.tool.clone()).collect()
    };
    assert_eq!(tools(&s.train), ["A", "B"].map(String::from).into());
    assert_eq!(tools(&s.val), ["C"].map(String::from).into());
    assert_eq!(tools(&s.test), ["C", "D"].map(String::from).into());
}

#[test]
fn default_universe_is_vulnerable_without_adapter() {
    let u = generate_universe(&UniverseConfig::default()).unwrap();
    let test = split_protocol(&u, &SplitProtocol::default()).unwrap().test;
    let pairs = build_comparisons(&test, &ComparisonProtocol::default()).unwrap();
    let scores = score_pairs(None, &test, &pairs).unwrap();
    let p = evaluate("Original", &scores, &[1e-3]).unwrap().points[0];
    assert!(p.iapar >= 0.5, "IAPAR {}", p.iapar);
    assert!(p.fnmr <= 0.05, "FNMR {}", p.fnmr);
}
