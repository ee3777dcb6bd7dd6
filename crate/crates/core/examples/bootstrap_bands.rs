//! Record-level bootstrap bands on a sensitivity curve and cross-seed
//! mean and standard deviation.
//!
//! `cargo run --release --example bootstrap_bands`

use trajlens::perturb::{sensitivity_curve, PerturbSpec, Selector};
use trajlens::stats::{bootstrap_series, cross_seed, BootstrapSpec, StepSeries};
use trajlens::synthworld::{generate, SyntheticDenoiser, WorldConfig};
use trajlens::trajstore::Split;

fn main() -> trajlens::Result<()> {
    let mut per_seed = Vec::new();
    for seed in [42, 43, 44] {
        let world = generate(&WorldConfig { seed, ..WorldConfig::default() }, Split::Eval)?;
        let mut den = SyntheticDenoiser::new(&world.run, &world.truth)?;
        let curve = sensitivity_curve(&world.run, &mut den, &PerturbSpec::new(0.2, Selector::All, seed), None)?;
        let banded = bootstrap_series(&curve.per_record, &BootstrapSpec { seed, ..BootstrapSpec::default() })?;
        if seed == 42 {
            println!("seed 42, 95% record bootstrap (B = 1000)");
            for (t, (v, (lo, hi))) in banded.values.iter().zip(banded.band.as_ref().unwrap()).enumerate() {
                println!("  step {t:>2}: {v:.4}  [{lo:.4}, {hi:.4}]");
            }
        }
        per_seed.push(StepSeries::new(banded.values));
    }
    let (mean, std) = cross_seed(&per_seed)?;
    println!("\ncross-seed mean ± sd over 3 seeds");
    for t in 0..mean.len() {
        println!("  step {t:>2}: {:.4} ± {:.4}", mean.values[t], std.values[t]);
    }
    Ok(())
}
