//! Commitment steps, group-conditioned CDFs, and accuracy by commitment
//! stratum on a synthetic eval run.
//!
//! `cargo run --example commitment_curves`

use trajlens::commitment::{
    commitment_cdf, commitment_cdf_all, commitment_correctness, group_mean_commitment, CommitmentTable, StepRange,
};
use trajlens::labels::Grouping;
use trajlens::synthworld::{generate, WorldConfig};
use trajlens::trajstore::Split;

fn main() -> trajlens::Result<()> {
    let world = generate(&WorldConfig::default(), Split::Eval)?;
    let table = CommitmentTable::from_run(&world.run);

    println!("mean commitment step by coarse POS group");
    let mut means: Vec<_> = group_mean_commitment(&table, &world.labels, Grouping::PosCoarse)?.into_iter().collect();
    means.sort_by(|a, b| a.1.mean.total_cmp(&b.1.mean));
    for (group, m) in &means {
        let configured = world.truth.config.commitment.iter().find(|(g, _)| g.name() == *group).map(|(_, s)| s.mean);
        println!("  {group:<9} {:.2}  (configured {:.2}, n = {})", m.mean, configured.unwrap_or(f64::NAN), m.count);
    }

    let all = commitment_cdf_all(&table);
    println!("\nCDF by step (all positions and two groups)");
    let groups = commitment_cdf(&table, &world.labels, Grouping::PosCoarse)?;
    println!("  step   all    NUM    FUNCTION");
    for t in 0..all.len() {
        println!(
            "  {t:>4}  {:.3}  {:.3}  {:.3}",
            all.values[t], groups["NUM"].values[t], groups["FUNCTION"].values[t]
        );
    }

    println!("\nfinal accuracy by commitment stratum");
    let strata = [StepRange::new(0, Some(2)), StepRange::new(3, Some(4)), StepRange::new(5, None)];
    for s in commitment_correctness(&table, &strata)? {
        let acc = s.accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}"));
        println!("  {:<5} n = {:<5} accuracy {acc}", s.range.label(), s.count);
    }
    Ok(())
}
