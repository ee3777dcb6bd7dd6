//! Shared and per-step linear probes for POS, semantic class, and token
//! identity, with retrieval metrics and seen/unseen token splits.
//!
//! `cargo run --release --example probe_recoverability`

use trajlens::labels::{baselines, build_token_space};
use trajlens::probekit::{
    eval_probe, gap_series, train_per_step_probes, train_shared_probe, ProbeFamily, ProbeHyper, ProbeSet,
};
use trajlens::synthworld::{generate_pair, WorldConfig};

fn main() -> trajlens::Result<()> {
    let (train, eval) = generate_pair(&WorldConfig::default())?;
    let space = build_token_space(&train.run, &eval.run)?;
    let hp = ProbeHyper::default();
    let base = baselines(&space);
    println!(
        "token classes {}, unseen eval fraction {:.3}, chance {:.4}, train-majority {:.4}",
        space.class_count(),
        space.unseen_fraction(),
        base.uniform_chance,
        base.train_majority_acc
    );

    let mut shared_reports = Vec::new();
    for family in ProbeFamily::ALL {
        let sp = (family == ProbeFamily::Token).then_some(&space);
        let shared = train_shared_probe(&train.run, &train.labels, family, sp, &hp)?;
        let per = train_per_step_probes(&train.run, &train.labels, family, sp, &hp)?;
        let a = eval_probe(ProbeSet::Shared(&shared), &eval.run, &eval.labels, sp)?;
        let b = eval_probe(ProbeSet::PerStep(&per), &eval.run, &eval.labels, sp)?;
        for r in [&a, &b] {
            println!(
                "{:<8} {:<8} initial {:.3}  final {:.3}  best step {}",
                family.name(),
                r.mode,
                r.initial(),
                r.final_acc(),
                r.best_step()
            );
        }
        if let (Some(seen), Some(unseen)) = (&a.seen, &a.unseen) {
            let last = seen.top1.len() - 1;
            println!(
                "         seen top1/5/10 {:.3}/{:.3}/{:.3} mrr {:.3}; unseen top1 {:.3} (n = {})",
                seen.top1.values[last],
                seen.top5.values[last],
                seen.top10.values[last],
                seen.mrr.values[last],
                unseen.top1.values[last],
                unseen.count
            );
        }
        shared_reports.push(a);
    }

    let gap = gap_series(&shared_reports[0], &shared_reports[2]);
    let min = gap.values.iter().copied().fold(f64::INFINITY, f64::min);
    println!("POS minus token accuracy, minimum over steps: {min:.3}");
    Ok(())
}
