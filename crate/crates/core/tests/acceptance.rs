//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use trajlens::commitment::{commitment_cdf, commitment_cdf_all, group_mean_commitment, CommitmentTable};
use trajlens::labels::{build_token_space, Grouping, LabelRow, LabelTable, PosCoarse, Semantic};
use trajlens::perturb::{build_request, sensitivity_curve, Denoiser, PerturbSpec, Selector};
use trajlens::pipeline::{run_all, JobConfig};
use trajlens::probekit::{
    adamw_step, eval_probe, gap_series, train_per_step_probes, train_shared_probe, AdamWConfig, AdamWState,
    ProbeFamily, ProbeHyper, ProbeMode, ProbeModel, ProbeSet,
};
use trajlens::seed::keyed_rng;
use trajlens::stats::{bootstrap_series, BootstrapSpec, RecordContribution};
use trajlens::synthworld::{generate, generate_pair, ConfidenceRegime, SyntheticDenoiser, WorldConfig};
use trajlens::trajstore::{RunMeta, RunSet, Split, TrajRecord, FORMAT_VERSION};
use trajlens::uncertainty::{certainty_curves, ece, step_pairs};

const GAP_TOL: f64 = 0.3;
const CDF_TOL: f64 = 1e-12;
const SEPARABLE_ACC: f64 = 0.95;
const MRR_TOL: f64 = 1e-9;
const UNSEEN_TOP1_MAX: f64 = 0.01;
const ADAM_TOL: f64 = 1e-9;
const ECE_HAND_TOL: f64 = 1e-9;
const ECE_CALIBRATED_MAX: f64 = 0.03;
const CALIBRATION_N: usize = 10_000;
const IDENTITY_TOL: f64 = 1e-9;
const DIRECT_SHARE_MIN: f64 = 0.95;
const COVERAGE: (f64, f64) = (0.90, 0.98);

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        if !pass {
            self.failures += 1;
        }
    }

    fn budget(&mut self, name: &str, elapsed: Duration, limit: Duration) {
        self.check(
            &format!("{name} runtime"),
            elapsed < limit,
            format!("{:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
        );
    }
}

fn commitment(gate: &mut Gate) {
    let start = Instant::now();
    let world = generate(&WorldConfig::default(), Split::Eval).unwrap();
    let table = CommitmentTable::from_run(&world.run);
    let truth: Vec<usize> = world.truth.records.iter().flat_map(|r| r.commit_step.clone()).collect();
    let matched = table.rows.iter().zip(&truth).filter(|(row, &c)| row.step == c).count();
    gate.check(
        "commitment: measured steps equal ground truth",
        matched == truth.len() && truth.len() == table.rows.len(),
        format!("{matched}/{} positions", truth.len()),
    );

    let means = group_mean_commitment(&table, &world.labels, Grouping::PosCoarse).unwrap();
    let cfg = &world.truth.config;
    let order = [PosCoarse::Num, PosCoarse::Noun, PosCoarse::Verb, PosCoarse::Function, PosCoarse::Punct];
    let measured: Vec<f64> = order.iter().map(|g| means[g.name()].mean).collect();
    let configured: Vec<f64> = order.iter().map(|g| cfg.commitment[g].mean).collect();
    let strict = measured[..4].windows(2).all(|w| w[0] < w[1]);
    gate.check(
        "commitment: NUM < NOUN < VERB < FUNCTION",
        strict,
        format!("{measured:.3?}"),
    );
    for k in 0..order.len() - 1 {
        let got = measured[k + 1] - measured[k];
        let want = configured[k + 1] - configured[k];
        gate.check(
            &format!("commitment: gap {}-{} within {GAP_TOL}", order[k + 1], order[k]),
            (got - want).abs() <= GAP_TOL,
            format!("measured {got:.3}, configured {want:.3}"),
        );
    }
    gate.budget("commitment", start.elapsed(), Duration::from_secs(5));
}

fn cdf_properties(gate: &mut Gate) {
    let mut worst_identity: f64 = 0.0;
    let mut monotone = true;
    let mut ends_at_one = true;
    for seed in 0..50u64 {
        let cfg = WorldConfig {
            seed,
            train_records: 0,
            eval_records: 20 + (seed as usize % 7) * 10,
            ..WorldConfig::default()
        };
        let world = generate(&cfg, Split::Eval).unwrap();
        let table = CommitmentTable::from_run(&world.run);
        let all = commitment_cdf_all(&table);
        for grouping in [Grouping::PosCoarse, Grouping::Semantic] {
            let groups = commitment_cdf(&table, &world.labels, grouping).unwrap();
            let counts = trajlens::labels::group_counts(&world.labels, grouping);
            for f in groups.values() {
                monotone &= f.values.windows(2).all(|w| w[0] <= w[1]);
                ends_at_one &= *f.values.last().unwrap() == 1.0;
            }
            let n: usize = counts.values().sum();
            for t in 0..all.len() {
                let combined: f64 =
                    groups.iter().map(|(k, f)| counts[k] as f64 * f.values[t]).sum::<f64>() / n as f64;
                worst_identity = worst_identity.max((combined - all.values[t]).abs());
            }
        }
    }
    gate.check("cdf: every F_k nondecreasing (50 runs)", monotone, "");
    gate.check("cdf: F_k(T-1) = 1 (50 runs)", ends_at_one, "");
    gate.check(
        "cdf: N_k-weighted combination equals ungrouped CDF",
        worst_identity < CDF_TOL,
        format!("max deviation {worst_identity:e}"),
    );
}

fn mean_accuracy(report: &trajlens::probekit::ProbeEvalReport) -> f64 {
    report.accuracy.values.iter().sum::<f64>() / report.accuracy.len() as f64
}

fn one_step_world() -> WorldConfig {
    let base = WorldConfig::default();
    WorldConfig {
        num_steps: 1,
        commitment: base
            .commitment
            .keys()
            .map(|&g| (g, trajlens::synthworld::CommitSchedule { mean: 0.0, spread: 0 }))
            .collect(),
        correct_by_commit: vec![0.5],
        noise: vec![0.4],
        p_recover: vec![1.0],
        point_of_no_return: 0,
        ..base
    }
}

fn probes(gate: &mut Gate) {
    let start = Instant::now();
    let recipe = ProbeHyper::default();
    // Hidden states are exactly the class means: no noise, no per-token offset.
    let noiseless = WorldConfig {
        noise: vec![0.0; 16],
        token_signal: 0.0,
        ..WorldConfig::default()
    };
    let (train, eval) = generate_pair(&noiseless).unwrap();
    for family in [ProbeFamily::Pos, ProbeFamily::Semantic] {
        let m = train_shared_probe(&train.run, &train.labels, family, None, &recipe).unwrap();
        let r = eval_probe(ProbeSet::Shared(&m), &eval.run, &eval.labels, None).unwrap();
        let acc = mean_accuracy(&r);
        gate.check(
            &format!("probe: noiseless shared {} accuracy >= {SEPARABLE_ACC}", family.name()),
            acc >= SEPARABLE_ACC,
            format!("{acc:.4}"),
        );
    }

    let (train, eval) = generate_pair(&one_step_world()).unwrap();
    let space = build_token_space(&train.run, &eval.run).unwrap();
    let mut identical = true;
    for family in [ProbeFamily::Pos, ProbeFamily::Semantic, ProbeFamily::Token] {
        let sp = (family == ProbeFamily::Token).then_some(&space);
        let shared = train_shared_probe(&train.run, &train.labels, family, sp, &recipe).unwrap();
        let per = train_per_step_probes(&train.run, &train.labels, family, sp, &recipe).unwrap();
        let bits = |m: &ProbeModel| m.weights.iter().chain(&m.bias).map(|w| w.to_bits()).collect::<Vec<_>>();
        identical &= bits(&shared) == bits(&per[0]);
        let a = eval_probe(ProbeSet::Shared(&shared), &eval.run, &eval.labels, sp).unwrap();
        let b = eval_probe(ProbeSet::PerStep(&per), &eval.run, &eval.labels, sp).unwrap();
        identical &= a.overall == b.overall;
    }
    gate.check("probe: per-step equals shared at T = 1", identical, "weights and metrics bitwise");

    let (train, eval) = generate_pair(&WorldConfig::default()).unwrap();
    let space = build_token_space(&train.run, &eval.run).unwrap();
    let pos = train_shared_probe(&train.run, &train.labels, ProbeFamily::Pos, None, &recipe).unwrap();
    let tok = train_shared_probe(&train.run, &train.labels, ProbeFamily::Token, Some(&space), &recipe).unwrap();
    let pos_r = eval_probe(ProbeSet::Shared(&pos), &eval.run, &eval.labels, None).unwrap();
    let tok_r = eval_probe(ProbeSet::Shared(&tok), &eval.run, &eval.labels, Some(&space)).unwrap();
    let gap = gap_series(&pos_r, &tok_r);
    let min_gap = gap.values.iter().copied().fold(f64::INFINITY, f64::min);
    gate.check("probe: POS - token gap positive at every step", min_gap > 0.0, format!("min gap {min_gap:.4}"));
    gate.budget("probe", start.elapsed(), Duration::from_secs(60));
}

fn retrieval(gate: &mut Gate) {
    // Identity probe over four token classes; golds 0, 1, 2 land at ranks 1, 2, 4.
    let rec = |id: u64, gold: u32, h: [f32; 4]| TrajRecord {
        record_id: id,
        tokens: vec![gold],
        masked_idx: vec![0],
        fill_step: vec![0],
        preds: vec![vec![gold]],
        conf: vec![vec![0.5]],
        entropy: vec![vec![0.5]],
        hidden: h.to_vec(),
    };
    let meta = |split| RunMeta {
        format_version: FORMAT_VERSION,
        run_id: "hand".into(),
        seed: 0,
        num_steps: 1,
        mask_ratio: 0.4,
        hidden_dim: 4,
        source_model: "hand".into(),
        split,
        fill_step_imputed: false,
    };
    let eval = RunSet {
        meta: meta(Split::Eval),
        records: vec![
            rec(0, 0, [1.0, 0.0, 0.0, 0.0]),
            rec(1, 1, [2.0, 1.0, 0.0, 0.0]),
            rec(2, 2, [3.0, 4.0, 1.0, 2.0]),
        ],
    };
    let train = RunSet {
        meta: meta(Split::ProbeTrain),
        records: (0..4).map(|k| rec(k, k as u32, [0.0; 4])).collect(),
    };
    let labels = LabelTable::new(
        (0..3)
            .map(|k| LabelRow {
                record_id: k,
                pos: 0,
                gold_token: k as u32,
                pos_coarse: PosCoarse::Noun,
                semantic: Semantic::Content,
            })
            .collect(),
    )
    .unwrap();
    let space = build_token_space(&train, &eval).unwrap();
    let probe = ProbeModel {
        family: ProbeFamily::Token,
        mode: ProbeMode::Shared,
        trained_on: "hand".into(),
        num_classes: 4,
        dim: 4,
        weights: (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        bias: vec![0.0; 4],
        classes: vec![0, 1, 2, 3],
        standardizer: None,
    };
    let r = eval_probe(ProbeSet::Shared(&probe), &eval, &labels, Some(&space)).unwrap();
    let mrr = r.overall.mrr.values[0];
    gate.check(
        "retrieval: ranks [1,2,4] give MRR 0.5833",
        (mrr - 0.583_333_333_3).abs() < MRR_TOL && (mrr - 1.75 / 3.0).abs() < 1e-15,
        format!("{mrr:.10}"),
    );

    let mut ordered = true;
    let mut worst_unseen: f64 = 0.0;
    for seed in [42u64, 43, 44] {
        let (train, eval) = generate_pair(&WorldConfig { seed, ..WorldConfig::default() }).unwrap();
        let space = build_token_space(&train.run, &eval.run).unwrap();
        let hp = ProbeHyper::default();
        let shared = train_shared_probe(&train.run, &train.labels, ProbeFamily::Token, Some(&space), &hp).unwrap();
        let per = train_per_step_probes(&train.run, &train.labels, ProbeFamily::Token, Some(&space), &hp).unwrap();
        for report in [
            eval_probe(ProbeSet::Shared(&shared), &eval.run, &eval.labels, Some(&space)).unwrap(),
            eval_probe(ProbeSet::PerStep(&per), &eval.run, &eval.labels, Some(&space)).unwrap(),
        ] {
            for s in [Some(&report.overall), report.seen.as_ref(), report.unseen.as_ref()].into_iter().flatten() {
                for t in 0..s.top1.len() {
                    ordered &= s.top1.values[t] <= s.top5.values[t] && s.top5.values[t] <= s.top10.values[t];
                }
            }
            let unseen = report.unseen.as_ref().unwrap();
            worst_unseen = worst_unseen.max(unseen.top1.values.iter().copied().fold(0.0, f64::max));
        }
    }
    gate.check("retrieval: top-1 <= top-5 <= top-10 on all runs", ordered, "3 seeds, shared and per-step");
    gate.check(
        "retrieval: unseen-target top-1 < 1%",
        worst_unseen < UNSEEN_TOP1_MAX,
        format!("max over steps and seeds {worst_unseen:.4}"),
    );
}

fn optimizer(gate: &mut Gate) {
    let hp = AdamWConfig::default();
    let mut p = [0.0];
    let mut s = AdamWState::new(1);
    adamw_step(&mut p, &[1.0], &mut s, &hp).unwrap();
    gate.check(
        "optimizer: first AdamW step equals -lr",
        (p[0] + hp.lr).abs() < ADAM_TOL,
        format!("{:e}", p[0]),
    );
    let mut q = [0.7, -1.25, 3.0];
    let before = q;
    let mut s = AdamWState::new(3);
    for _ in 0..10 {
        adamw_step(&mut q, &[0.0; 3], &mut s, &hp).unwrap();
    }
    gate.check("optimizer: zero-grad zero-decay fixpoint exact", q == before, "");
}

fn calibration(gate: &mut Gate) {
    let hand = ece(&[0.8, 0.8, 0.8], &[true, true, false], 1).unwrap();
    gate.check(
        "calibration: hand ECE 0.1333",
        (hand - 0.133_333_333_3).abs() < ECE_HAND_TOL,
        format!("{hand:.10}"),
    );

    let records = CALIBRATION_N / 6;
    let calibrated = WorldConfig {
        eval_records: records,
        train_records: 0,
        ..WorldConfig::default()
    };
    let world = generate(&calibrated, Split::Eval).unwrap();
    let n = world.run.num_positions();
    let report = certainty_curves(&world.run, 15).unwrap();
    let worst = report.ece.values.iter().copied().fold(0.0, f64::max);
    gate.check(
        "calibration: calibrated ECE < 0.03 at n >= 10000, 15 bins",
        n >= CALIBRATION_N && worst < ECE_CALIBRATED_MAX,
        format!("n = {n}, max ECE over steps {worst:.4}"),
    );

    let onset = 8;
    let drift = WorldConfig {
        confidence: ConfidenceRegime::LateDrift {
            onset,
            magnitude: 0.8,
            ramp: 4,
        },
        ..calibrated
    };
    let world = generate(&drift, Split::Eval).unwrap();
    let ece_t: Vec<f64> = (0..world.run.num_steps())
        .map(|t| {
            let (c, k) = step_pairs(&world.run, t);
            ece(&c, &k, 15).unwrap()
        })
        .collect();
    let nondecreasing = ece_t[onset - 1..].windows(2).all(|w| w[1] >= w[0]);
    gate.check(
        "calibration: late-drift ECE nondecreasing after onset",
        nondecreasing && ece_t[ece_t.len() - 1] > ece_t[onset - 1],
        format!("{:.3?}", &ece_t[onset - 1..]),
    );
}

fn peak_curve(world: &trajlens::synthworld::World, ratio: f64, seed: u64) -> trajlens::perturb::SensitivityCurve {
    let mut den = SyntheticDenoiser::new(&world.run, &world.truth).unwrap();
    sensitivity_curve(&world.run, &mut den, &PerturbSpec::new(ratio, Selector::All, seed), Some(&world.labels))
        .unwrap()
}

fn perturbation(gate: &mut Gate) {
    let start = Instant::now();
    let cfg = WorldConfig::default();
    let world = generate(&cfg, Split::Eval).unwrap();
    let mut den = SyntheticDenoiser::new(&world.run, &world.truth).unwrap();
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for selector in Selector::ALL {
        for ratio in [0.1, 0.2, 0.4] {
            let curve =
                sensitivity_curve(&world.run, &mut den, &PerturbSpec::new(ratio, selector, 7), Some(&world.labels))
                    .unwrap();
            for o in &curve.outcomes {
                cells += 1;
                worst = worst.max(if o.failed.is_some() { f64::INFINITY } else { o.identity_residual() });
            }
        }
    }
    gate.check(
        "perturbation: decomposition identity on every grid cell",
        worst < IDENTITY_TOL,
        format!("{cells} cells, max residual {worst:e}"),
    );

    let t_star = cfg.point_of_no_return;
    let mut peaks = Vec::new();
    let mut monotone = true;
    for seed in 0..20u64 {
        let w = generate(&WorldConfig { seed, ..cfg.clone() }, Split::Eval).unwrap();
        let drops: Vec<f64> = [0.1, 0.2, 0.4].iter().map(|&r| peak_curve(&w, r, seed).peak().unwrap().1).collect();
        monotone &= drops.windows(2).all(|p| p[0] <= p[1]);
        peaks.push(peak_curve(&w, 0.2, seed).peak().unwrap().0);
    }
    gate.check(
        "perturbation: peak within 1 step of t* over 20 seeds",
        peaks.iter().all(|&p| p.abs_diff(t_star) <= 1),
        format!("t* = {t_star}, peaks {peaks:?}"),
    );
    gate.check("perturbation: peak drop monotone in ratio 0.1, 0.2, 0.4 (20 seeds)", monotone, "");

    let mut exact = true;
    for rec in &world.run.records {
        let finals: Vec<i64> = (0..rec.num_masked()).map(|i| rec.final_pred(i) as i64).collect();
        for t in 0..world.run.num_steps() {
            exact &= den.resume(&build_request(rec, t, &[], 3)).unwrap() == finals;
        }
    }
    gate.check("perturbation: empty re-mask reproduces logged finals", exact, "every record and step");

    let local = WorldConfig {
        collateral_prob: 0.0,
        ..cfg.clone()
    };
    let w = generate(&local, Split::Eval).unwrap();
    let curve = peak_curve(&w, 0.2, 0);
    let share = curve.peak_outcome().unwrap().direct_share();
    gate.check(
        "perturbation: direct share of peak >= 95% (local damage)",
        share >= DIRECT_SHARE_MIN,
        format!("{share:.4}"),
    );
    gate.budget("perturbation", start.elapsed(), Duration::from_secs(180));
}

fn bootstrap(gate: &mut Gate) {
    let mut covered = 0;
    let mut inside = true;
    let trials = 200;
    for trial in 0..trials {
        let mut rng = keyed_rng(&[0xB007, trial]);
        let per: Vec<RecordContribution> = (0..200)
            .map(|_| RecordContribution {
                weight: 1.0,
                sums: vec![rand::Rng::random_bool(&mut rng, 0.5) as u8 as f64],
            })
            .collect();
        let s = bootstrap_series(&per, &BootstrapSpec { resamples: 1000, level: 0.95, seed: trial }).unwrap();
        let (lo, hi) = s.band.as_ref().unwrap()[0];
        covered += (lo <= 0.5 && 0.5 <= hi) as usize;
        inside &= lo <= s.values[0] && s.values[0] <= hi;
    }
    let rate = covered as f64 / trials as f64;
    gate.check(
        "bootstrap: 95% coverage within [90%, 98%] over 200 trials",
        (COVERAGE.0..=COVERAGE.1).contains(&rate),
        format!("{:.1}%", rate * 100.0),
    );
    gate.check("bootstrap: point estimate inside its band", inside, "200 trials");

    let world = generate(&WorldConfig::default(), Split::Eval).unwrap();
    let mut den = SyntheticDenoiser::new(&world.run, &world.truth).unwrap();
    let curve =
        sensitivity_curve(&world.run, &mut den, &PerturbSpec::new(0.2, Selector::All, 1), None).unwrap();
    let spec = BootstrapSpec { seed: 5, ..BootstrapSpec::default() };
    let a = serde_json::to_vec(&bootstrap_series(&curve.per_record, &spec).unwrap()).unwrap();
    let b = serde_json::to_vec(&bootstrap_series(&curve.per_record, &spec).unwrap()).unwrap();
    gate.check("bootstrap: byte-identical bands across reruns", a == b, "");
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(gate: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let mut elapsed = Duration::ZERO;
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let cfg = JobConfig {
            out_dir: dir.path().join(name),
            ..JobConfig::default()
        };
        let start = Instant::now();
        run_all(&cfg).unwrap();
        elapsed = elapsed.max(start.elapsed());
        trees.push(tree(&cfg.out_dir));
    }
    let same = trees[0] == trees[1];
    gate.check(
        "determinism: two synth-to-report runs give byte-identical trees",
        same && trees[0].contains_key("report.md"),
        format!("{} files", trees[0].len()),
    );
    gate.budget("full pipeline", elapsed, Duration::from_secs(600));
}

fn main() -> ExitCode {
    let mut gate = Gate { failures: 0 };
    commitment(&mut gate);
    cdf_properties(&mut gate);
    probes(&mut gate);
    retrieval(&mut gate);
    optimizer(&mut gate);
    calibration(&mut gate);
    perturbation(&mut gate);
    bootstrap(&mut gate);
    determinism(&mut gate);
    if gate.failures == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", gate.failures);
        ExitCode::FAILURE
    }
}
