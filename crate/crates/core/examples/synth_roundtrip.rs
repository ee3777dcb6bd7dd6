//! Generate a synthetic probe-train/eval pair, write it in the on-disk
//! formats, validate it, and read it back.
//!
//! `cargo run --example synth_roundtrip [out_dir]`

use std::path::PathBuf;

use trajlens::labels::{load_labels, save_labels};
use trajlens::synthworld::{generate_pair, GroundTruth, WorldConfig};
use trajlens::trajstore::{load_run, save_run, validate_run};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("trajlens-synth"));
    std::fs::create_dir_all(&out)?;

    let cfg = WorldConfig::default();
    let (train, eval) = generate_pair(&cfg)?;
    for (name, world) in [("train", &train), ("eval", &eval)] {
        save_run(&world.run, out.join(format!("{name}.traj.jsonl")))?;
        save_labels(&world.labels, out.join(format!("{name}.labels.jsonl")))?;
        world.truth.save(out.join(format!("{name}.truth.json")))?;
    }

    let back = load_run(out.join("eval.traj.jsonl"))?;
    assert!(validate_run(&back).is_empty());
    assert_eq!(back, eval.run);
    assert_eq!(load_labels(out.join("eval.labels.jsonl"))?, eval.labels);
    let truth = GroundTruth::load(out.join("eval.truth.json"))?;

    println!("wrote {}", out.display());
    println!(
        "train: {} records, {} masked positions",
        train.run.records.len(),
        train.run.num_positions()
    );
    println!(
        "eval:  {} records, {} masked positions, T = {}, d = {}",
        back.records.len(),
        back.num_positions(),
        back.num_steps(),
        back.hidden_dim()
    );
    println!("final accuracy {:.3}", back.final_accuracy());
    let acc: Vec<String> = truth.step_accuracy.iter().map(|a| format!("{a:.2}")).collect();
    println!("per-step accuracy {}", acc.join(" "));
    Ok(())
}
