//! Synthesis, every analysis, cross-seed aggregation, and the markdown
//! report, as `trajlens all` runs them.
//!
//! `cargo run --release --example full_pipeline [out_dir]`

use std::path::PathBuf;

use trajlens::pipeline::{run_all, JobConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("trajlens-out"));
    let mut cfg = JobConfig { out_dir: out.clone(), ..JobConfig::default() };
    cfg.apply_env()?;
    run_all(&cfg)?;
    println!("config hash {}", cfg.hash());
    println!("outputs under {}", out.display());
    let report = std::fs::read_to_string(out.join("report.md"))?;
    println!("\n{report}");
    Ok(())
}
