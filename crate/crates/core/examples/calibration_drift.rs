//! Certainty curves, ECE and Brier score under a calibrated confidence
//! regime and under late overconfidence drift.
//!
//! `cargo run --release --example calibration_drift`

use trajlens::synthworld::{generate, ConfidenceRegime, WorldConfig};
use trajlens::trajstore::Split;
use trajlens::uncertainty::{certainty_curves, DEFAULT_BINS};

fn main() -> trajlens::Result<()> {
    let calibrated = WorldConfig { eval_records: 1000, ..WorldConfig::default() };
    let drift = WorldConfig {
        confidence: ConfidenceRegime::LateDrift { onset: 8, magnitude: 0.8, ramp: 4 },
        ..calibrated.clone()
    };
    let a = certainty_curves(&generate(&calibrated, Split::Eval)?.run, DEFAULT_BINS)?;
    let b = certainty_curves(&generate(&drift, Split::Eval)?.run, DEFAULT_BINS)?;

    println!("{} positions, {} bins", a.num_positions, a.bin_count);
    println!("step  accuracy  conf(cal)  ECE(cal)  conf(drift)  ECE(drift)  Brier(drift)");
    for t in 0..a.ece.len() {
        println!(
            "{t:>4}  {:>8.3}  {:>9.3}  {:>8.3}  {:>11.3}  {:>10.3}  {:>12.3}",
            a.step_accuracy.values[t],
            a.mean_conf.values[t],
            a.ece.values[t],
            b.mean_conf.values[t],
            b.ece.values[t],
            b.brier.values[t]
        );
    }
    if let Some(gap) = a.final_entropy_gap() {
        println!("final entropy, wrong minus correct cohort: {gap:.3} nats");
    }
    Ok(())
}
