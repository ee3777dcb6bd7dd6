//! Drive the re-masking analysis through an out-of-process denoiser that
//! speaks the line protocol. The example re-launches itself with `serve` as
//! the echo reference peer; point `attach_external_denoiser` at any command
//! implementing the protocol instead.
//!
//! `cargo run --example external_denoiser`

use std::io::{self, BufReader};
use std::time::Duration;

use trajlens::perturb::external::{attach_external_denoiser, serve_stub, StubMode};
use trajlens::perturb::{sensitivity_curve, PerturbSpec, Selector};
use trajlens::synthworld::{generate, WorldConfig};
use trajlens::trajstore::Split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    if std::env::args().nth(1).as_deref() == Some("serve") {
        return Ok(serve_stub(StubMode::Echo, BufReader::new(io::stdin().lock()), io::stdout().lock())?);
    }

    let world = generate(&WorldConfig { eval_records: 60, ..WorldConfig::default() }, Split::Eval)?;
    let exe = std::env::current_exe()?;
    let command = format!("'{}' serve", exe.display());
    let mut den = attach_external_denoiser(&command, world.run.num_steps(), Duration::from_secs(10))?;
    let curve = sensitivity_curve(&world.run, &mut den, &PerturbSpec::new(0.2, Selector::All, 1), None)?;

    // The echo peer fills nothing in, so every masked input stays wrong.
    println!("step  drop    direct  collateral");
    for o in &curve.outcomes {
        println!("{:>4}  {:.4}  {:.4}  {:.4}", o.step, o.delta, o.delta_direct, o.delta_collateral);
    }
    Ok(())
}
