//! Baseline vs. adapter-hardened verification on the default synthetic
//! universe, printed as a report table.
//!
//! Usage: `cargo run --release -p tetraloss-core --example mitigation [seed] [scenario]`

use std::time::Instant;

use tetraloss::dmad::{evaluate_scenarios, mad_scores, train_dmad, training_pairs, DmadConfig};
use tetraloss::losses::Scenario;
use tetraloss::metrics::{build_comparisons, reports_to_table, score_pairs, ComparisonProtocol, FRONTEX_FMR_TARGETS};
use tetraloss::synth::{generate_universe, split_protocol, SplitProtocol, UniverseConfig};
use tetraloss::trainer::{train_with_observer, TrainConfig};

fn main() -> tetraloss::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let scenario: Scenario = args.next().map_or(Ok(Scenario::Tetra), |s| s.parse())?;

    let universe = generate_universe(&UniverseConfig { seed, ..Default::default() })?;
    let splits = split_protocol(&universe, &SplitProtocol::default())?;
    let config = TrainConfig { seed, scenario, ..Default::default() };

    let start = Instant::now();
    let (adapter, history) = train_with_observer(&config, &splits.train, &splits.val, |r| {
        eprintln!("epoch {:3}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss);
    })?;
    eprintln!("trained in {:.1?}, best epoch {}", start.elapsed(), history.best_epoch);

    let test_pairs = build_comparisons(&splits.test, &ComparisonProtocol::default())?;
    let original = score_pairs(None, &splits.test, &test_pairs)?;
    let hardened = score_pairs(Some(&adapter), &splits.test, &test_pairs)?;

    let train_pairs = build_comparisons(&splits.train, &ComparisonProtocol::default())?;
    let (bona_fide, morphs) = training_pairs(&splits.train, &train_pairs);
    let detector = train_dmad(&bona_fide, &morphs, &DmadConfig::default(), seed)?;
    let mad = mad_scores(&detector, &splits.test, &test_pairs)?;

    let reports = evaluate_scenarios(&original, Some(&hardened), Some(&mad), &FRONTEX_FMR_TARGETS)?;
    print!("{}", reports_to_table(&reports));
    Ok(())
}
