//! Re-masking sensitivity: resume from step t with a fraction of the
//! filled positions masked again and measure the final accuracy drop,
//! split into direct and collateral parts.
//!
//! `cargo run --release --example remask_sensitivity`

use trajlens::perturb::{ratio_sweep, Selector};
use trajlens::synthworld::{generate, SyntheticDenoiser, WorldConfig};
use trajlens::trajstore::Split;

fn main() -> trajlens::Result<()> {
    let cfg = WorldConfig::default();
    let world = generate(&cfg, Split::Eval)?;
    let mut den = SyntheticDenoiser::new(&world.run, &world.truth)?;
    println!("engineered point of no return: step {}", cfg.point_of_no_return);

    for selector in [Selector::All, Selector::Committed, Selector::PosFunction] {
        let curves = ratio_sweep(&world.run, &mut den, &[0.1, 0.2, 0.4], selector, 11, Some(&world.labels))?;
        for c in &curves {
            let o = c.peak_outcome().expect("synthetic denoiser never fails");
            println!(
                "{:<13} ratio {:.1}: peak step {:>2}, drop {:.4} (direct {:.4} over {}, collateral {:.4} over {}), direct share {:.3}",
                selector.name(),
                c.ratio,
                o.step,
                o.delta,
                o.delta_direct,
                o.n_direct,
                o.delta_collateral,
                o.n_collateral,
                o.direct_share()
            );
        }
    }

    let curves = ratio_sweep(&world.run, &mut den, &[0.2], Selector::All, 11, None)?;
    println!("\nstep  drop (all, ratio 0.2)");
    for o in &curves[0].outcomes {
        println!("{:>4}  {:.4}", o.step, o.delta);
    }
    Ok(())
}
