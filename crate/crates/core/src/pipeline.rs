//! Job configuration and the subcommands that turn runs into CSV, SVG,
//! and a markdown report.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! runs/seed_<s>/       synthesized trajectories, labels, ground truth
//! seed_<s>/commit/     cdf.csv group_means.csv strata.csv
//! seed_<s>/probe/      <family>_<mode>.csv token_split.csv gaps.csv summary.csv baselines.csv
//! seed_<s>/uncert/     curves.csv
//! seed_<s>/perturb/    cells.csv peaks.csv failures.csv delta_<selector>_r<ratio>.csv
//! aggregate/           <metric>.csv with cross-seed mean and std
//! report.md
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::commitment::{
    commitment_cdf, commitment_cdf_all, commitment_correctness, default_strata, group_mean_commitment,
    CommitmentTable, StepRange,
};
use crate::error::{Error, Result};
use crate::labels::{baselines, build_token_space, load_labels, save_labels, Grouping, LabelTable};
use crate::output::{config_hash, fmt_f64, fmt_opt, line_plot, series_table, write_bytes, PlotSeries, Table};
use crate::perturb::external::attach_external_denoiser;
use crate::perturb::{sensitivity_curve, Denoiser, PerturbSpec, RatioBase, Selector};
use crate::probekit::{
    eval_probe, gap_series, train_per_step_probes, train_shared_probe, ProbeEvalReport, ProbeFamily, ProbeHyper,
    ProbeSet,
};
use crate::seed::derive_seed;
use crate::stats::{bootstrap_series, cross_seed, BootstrapSpec, StepSeries};
use crate::synthworld::{generate_pair, GroundTruth, SyntheticDenoiser, WorldConfig};
use crate::trajstore::{load_run, save_run, RunSet};
use crate::uncertainty::{certainty_curves, DEFAULT_BINS};

pub const SEED_ENV: &str = "TRAJLENS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInput {
    pub seed: u64,
    pub train: PathBuf,
    pub eval: PathBuf,
    pub train_labels: PathBuf,
    pub eval_labels: PathBuf,
    /// Ground-truth sidecar of the eval run; required by the synthetic denoiser.
    #[serde(default)]
    pub eval_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthJob {
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
}

impl Default for SynthJob {
    fn default() -> Self {
        Self {
            seeds: vec![42, 43, 44],
            world: WorldConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyses {
    pub commit: bool,
    pub probe: bool,
    pub uncert: bool,
    pub perturb: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Self {
            commit: true,
            probe: true,
            uncert: true,
            perturb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommitJob {
    pub strata: Vec<StepRange>,
}

impl Default for CommitJob {
    fn default() -> Self {
        Self { strata: default_strata() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeJob {
    pub hyper: ProbeHyper,
    pub families: Vec<ProbeFamily>,
    pub per_step: bool,
}

impl Default for ProbeJob {
    fn default() -> Self {
        Self {
            hyper: ProbeHyper::default(),
            families: ProbeFamily::ALL.to_vec(),
            per_step: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertJob {
    pub bins: usize,
}

impl Default for UncertJob {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DenoiserJob {
    /// Resume from the eval run's ground-truth sidecar.
    Synthetic,
    /// Spawn `command` and speak the line protocol with it.
    External { command: String, timeout_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbJob {
    /// Every ratio is run with every selector.
    pub ratios: Vec<f64>,
    pub selectors: Vec<Selector>,
    pub ratio_base: RatioBase,
    pub denoiser: DenoiserJob,
}

impl Default for PerturbJob {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.2, 0.4],
            selectors: vec![Selector::All, Selector::Committed, Selector::PosContent, Selector::PosFunction],
            ratio_base: RatioBase::Eligible,
            denoiser: DenoiserJob::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    /// Global seed for probe shuffles, re-mask draws, and bootstrap.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Explicit inputs; when empty the synthesized runs under `out_dir/runs` are used.
    pub runs: Vec<RunInput>,
    pub synth: SynthJob,
    pub analyses: Analyses,
    pub commit: CommitJob,
    pub probe: ProbeJob,
    pub uncert: UncertJob,
    pub perturb: PerturbJob,
    pub bootstrap: BootstrapSpec,
    pub plots: bool,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            runs: Vec::new(),
            synth: SynthJob::default(),
            analyses: Analyses::default(),
            commit: CommitJob::default(),
            probe: ProbeJob::default(),
            uncert: UncertJob::default(),
            perturb: PerturbJob::default(),
            bootstrap: BootstrapSpec::default(),
            plots: true,
        }
    }
}

impl JobConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies `TRAJLENS_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        config_hash(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.analyses.perturb && (self.perturb.ratios.is_empty() || self.perturb.selectors.is_empty()) {
            problems.push("perturbation grid is empty".to_string());
        }
        if let Some(r) = self.perturb.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            problems.push(format!("ratio {r} outside (0, 1]"));
        }
        if self.runs.is_empty() && self.synth.seeds.is_empty() {
            problems.push("no runs and no synth seeds".into());
        }
        if self.uncert.bins == 0 {
            problems.push("uncert.bins must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }

    /// Explicit runs, or the synthesized layout.
    pub fn run_inputs(&self) -> Vec<RunInput> {
        if !self.runs.is_empty() {
            return self.runs.clone();
        }
        self.synth
            .seeds
            .iter()
            .map(|&seed| {
                let dir = self.runs_dir().join(format!("seed_{seed}"));
                RunInput {
                    seed,
                    train: dir.join("train.traj.jsonl"),
                    eval: dir.join("eval.traj.jsonl"),
                    train_labels: dir.join("train.labels.jsonl"),
                    eval_labels: dir.join("eval.labels.jsonl"),
                    eval_truth: Some(dir.join("eval.truth.json")),
                }
            })
            .collect()
    }

    fn checked_inputs(&self) -> Result<Vec<RunInput>> {
        let inputs = self.run_inputs();
        let missing: Vec<String> = inputs
            .iter()
            .flat_map(|r| [&r.train, &r.eval, &r.train_labels, &r.eval_labels])
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(inputs)
        } else {
            Err(Error::MissingOutputs(missing))
        }
    }

    fn analysis_seed(&self, run_seed: u64) -> u64 {
        derive_seed(&[self.seed, run_seed])
    }
}

struct Loaded {
    input: RunInput,
    train: RunSet,
    eval: RunSet,
    train_labels: LabelTable,
    eval_labels: LabelTable,
}

fn load_inputs(cfg: &JobConfig) -> Result<Vec<Loaded>> {
    cfg.checked_inputs()?
        .into_iter()
        .map(|input| {
            Ok(Loaded {
                train: load_run(&input.train)?,
                eval: load_run(&input.eval)?,
                train_labels: load_labels(&input.train_labels)?,
                eval_labels: load_labels(&input.eval_labels)?,
                input,
            })
        })
        .collect()
}

fn write_svg(cfg: &JobConfig, path: PathBuf, title: &str, y_label: &str, series: &[PlotSeries<'_>]) -> Result<()> {
    if cfg.plots {
        write_bytes(path, line_plot(title, y_label, series, &cfg.hash()).as_bytes())?;
    }
    Ok(())
}

/// Writes probe-train and eval runs, labels, and ground truth per synth seed.
pub fn synth(cfg: &JobConfig) -> Result<()> {
    let hash = cfg.hash();
    for &seed in &cfg.synth.seeds {
        let world = WorldConfig {
            seed,
            ..cfg.synth.world.clone()
        };
        let (train, eval) = generate_pair(&world)?;
        let dir = cfg.runs_dir().join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_run(&train.run, dir.join("train.traj.jsonl"))?;
        save_run(&eval.run, dir.join("eval.traj.jsonl"))?;
        save_labels(&train.labels, dir.join("train.labels.jsonl"))?;
        save_labels(&eval.labels, dir.join("eval.labels.jsonl"))?;
        eval.truth.save(dir.join("eval.truth.json"))?;
        let mut text = serde_json::to_string_pretty(&world)?;
        text.push('\n');
        write_bytes(dir.join("world.json"), text.as_bytes())?;

        let mut summary = Table::new(&["split", "records", "positions", "final_accuracy"]);
        for w in [&train, &eval] {
            summary.push(vec![
                w.run.meta.split.to_string(),
                w.run.records.len().to_string(),
                w.run.num_positions().to_string(),
                fmt_f64(w.run.final_accuracy()),
            ]);
        }
        summary.write(dir.join("summary.csv"), &hash)?;
    }
    Ok(())
}

pub fn commit(cfg: &JobConfig) -> Result<()> {
    let hash = cfg.hash();
    for run in load_inputs(cfg)? {
        let dir = cfg.seed_dir(run.input.seed).join("commit");
        let table = CommitmentTable::from_run(&run.eval);
        let all = commitment_cdf_all(&table);
        let by_pos = commitment_cdf(&table, &run.eval_labels, Grouping::PosCoarse)?;

        let mut cdf = Table::new(&["step", "group", "value"]);
        let mut rows = vec![("all", &all)];
        rows.extend(by_pos.iter().map(|(k, v)| (*k, v)));
        for (group, series) in &rows {
            for (t, v) in series.values.iter().enumerate() {
                cdf.push(vec![t.to_string(), group.to_string(), fmt_f64(*v)]);
            }
        }
        cdf.write(dir.join("cdf.csv"), &hash)?;

        let mut means = Table::new(&["grouping", "group", "count", "mean"]);
        for grouping in [Grouping::PosCoarse, Grouping::Semantic] {
            for (group, m) in group_mean_commitment(&table, &run.eval_labels, grouping)? {
                means.push(vec![grouping.name().into(), group.into(), m.count.to_string(), fmt_f64(m.mean)]);
            }
        }
        means.write(dir.join("group_means.csv"), &hash)?;

        let mut strata = Table::new(&["stratum", "count", "accuracy"]);
        for s in commitment_correctness(&table, &cfg.commit.strata)? {
            strata.push(vec![s.range.label(), s.count.to_string(), fmt_opt(s.accuracy)]);
        }
        strata.write(dir.join("strata.csv"), &hash)?;

        let plots: Vec<PlotSeries<'_>> = rows.iter().map(|(n, s)| PlotSeries { name: n, series: s }).collect();
        write_svg(cfg, dir.join("cdf.svg"), "Commitment CDF", "fraction committed", &plots)?;
    }
    Ok(())
}

fn probe_table(report: &ProbeEvalReport, band: &StepSeries) -> Table {
    let mut t = Table::new(&["step", "accuracy", "ci_lo", "ci_hi", "top5", "top10", "mrr"]);
    for step in 0..report.accuracy.len() {
        let (lo, hi) = band.band.as_ref().map_or((f64::NAN, f64::NAN), |b| b[step]);
        t.push(vec![
            step.to_string(),
            fmt_f64(report.accuracy.values[step]),
            fmt_f64(lo),
            fmt_f64(hi),
            fmt_f64(report.overall.top5.values[step]),
            fmt_f64(report.overall.top10.values[step]),
            fmt_f64(report.overall.mrr.values[step]),
        ]);
    }
    t
}

pub fn probe(cfg: &JobConfig) -> Result<()> {
    let hash = cfg.hash();
    for run in load_inputs(cfg)? {
        let dir = cfg.seed_dir(run.input.seed).join("probe");
        let seed = cfg.analysis_seed(run.input.seed);
        let hp = ProbeHyper {
            seed,
            ..cfg.probe.hyper
        };
        let space = build_token_space(&run.train, &run.eval)?;
        let boot = BootstrapSpec { seed, ..cfg.bootstrap };

        let mut shared_reports = BTreeMap::new();
        let mut summary = Table::new(&["family", "mode", "initial", "final", "best", "best_step"]);
        let mut plot_data = Vec::new();
        for &family in &cfg.probe.families {
            let space_ref = (family == ProbeFamily::Token).then_some(&space);
            let shared = train_shared_probe(&run.train, &run.train_labels, family, space_ref, &hp)?;
            let mut reports = vec![eval_probe(ProbeSet::Shared(&shared), &run.eval, &run.eval_labels, space_ref)?];
            if cfg.probe.per_step {
                let models = train_per_step_probes(&run.train, &run.train_labels, family, space_ref, &hp)?;
                reports.push(eval_probe(ProbeSet::PerStep(&models), &run.eval, &run.eval_labels, space_ref)?);
            }
            for report in reports {
                let band = bootstrap_series(&report.per_record, &boot)?;
                probe_table(&report, &band).write(dir.join(format!("{}_{}.csv", family.name(), report.mode)), &hash)?;
                summary.push(vec![
                    family.name().into(),
                    report.mode.clone(),
                    fmt_f64(report.initial()),
                    fmt_f64(report.final_acc()),
                    fmt_f64(report.accuracy.values[report.best_step()]),
                    report.best_step().to_string(),
                ]);
                if report.mode == "shared" {
                    plot_data.push((family.name().to_string(), band));
                    shared_reports.insert(family, report);
                }
            }
        }
        summary.write(dir.join("summary.csv"), &hash)?;

        if let Some(token) = shared_reports.get(&ProbeFamily::Token) {
            let mut split = Table::new(&["step", "subset", "count", "top1", "top5", "top10", "mrr"]);
            for (name, series) in [("seen", &token.seen), ("unseen", &token.unseen)] {
                let Some(s) = series else { continue };
                for t in 0..s.top1.len() {
                    split.push(vec![
                        t.to_string(),
                        name.into(),
                        s.count.to_string(),
                        fmt_f64(s.top1.values[t]),
                        fmt_f64(s.top5.values[t]),
                        fmt_f64(s.top10.values[t]),
                        fmt_f64(s.mrr.values[t]),
                    ]);
                }
            }
            split.write(dir.join("token_split.csv"), &hash)?;

            let mut gaps = Table::new(&["step", "family", "minus_token"]);
            for (family, report) in &shared_reports {
                if *family == ProbeFamily::Token {
                    continue;
                }
                for (t, v) in gap_series(report, token).values.iter().enumerate() {
                    gaps.push(vec![t.to_string(), family.name().into(), fmt_f64(*v)]);
                }
            }
            gaps.write(dir.join("gaps.csv"), &hash)?;
        }

        let b = baselines(&space);
        let mut base = Table::new(&["classes", "unseen_fraction", "uniform_chance", "train_majority_acc", "majority_class"]);
        base.push(vec![
            space.class_count().to_string(),
            fmt_f64(space.unseen_fraction()),
            fmt_f64(b.uniform_chance),
            fmt_f64(b.train_majority_acc),
            b.majority_class.to_string(),
        ]);
        base.write(dir.join("baselines.csv"), &hash)?;

        let plots: Vec<PlotSeries<'_>> = plot_data.iter().map(|(n, s)| PlotSeries { name: n, series: s }).collect();
        write_svg(cfg, dir.join("accuracy.svg"), "Shared probe accuracy", "accuracy", &plots)?;
    }
    Ok(())
}

pub fn uncert(cfg: &JobConfig) -> Result<()> {
    let hash = cfg.hash();
    for run in load_inputs(cfg)? {
        let dir = cfg.seed_dir(run.input.seed).join("uncert");
        let r = certainty_curves(&run.eval, cfg.uncert.bins)?;
        let mut t = Table::new(&[
            "step",
            "mean_conf",
            "mean_entropy",
            "conf_correct",
            "conf_wrong",
            "entropy_correct",
            "entropy_wrong",
            "step_accuracy",
            "ece",
            "brier",
        ]);
        let cohort = |c: &Option<crate::uncertainty::Cohort>, conf: bool, step: usize| {
            c.as_ref()
                .map_or(f64::NAN, |c| if conf { c.conf.values[step] } else { c.entropy.values[step] })
        };
        for step in 0..r.mean_conf.len() {
            t.push(vec![
                step.to_string(),
                fmt_f64(r.mean_conf.values[step]),
                fmt_f64(r.mean_entropy.values[step]),
                fmt_f64(cohort(&r.correct, true, step)),
                fmt_f64(cohort(&r.wrong, true, step)),
                fmt_f64(cohort(&r.correct, false, step)),
                fmt_f64(cohort(&r.wrong, false, step)),
                fmt_f64(r.step_accuracy.values[step]),
                fmt_f64(r.ece.values[step]),
                fmt_f64(r.brier.values[step]),
            ]);
        }
        t.write(dir.join("curves.csv"), &hash)?;
        write_svg(
            cfg,
            dir.join("calibration.svg"),
            "Calibration",
            "value",
            &[
                PlotSeries { name: "ECE", series: &r.ece },
                PlotSeries { name: "Brier", series: &r.brier },
                PlotSeries { name: "mean conf", series: &r.mean_conf },
                PlotSeries { name: "accuracy", series: &r.step_accuracy },
            ],
        )?;
    }
    Ok(())
}

fn ratio_tag(ratio: f64) -> String {
    format!("r{}", fmt_f64(ratio))
}

fn make_denoiser(cfg: &JobConfig, run: &Loaded) -> Result<Box<dyn Denoiser>> {
    match &cfg.perturb.denoiser {
        DenoiserJob::Synthetic => {
            let path = run.input.eval_truth.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("seed {}: synthetic denoiser needs eval_truth", run.input.seed))
            })?;
            let truth = GroundTruth::load(path)?;
            Ok(Box::new(SyntheticDenoiser::new(&run.eval, &truth)?))
        }
        DenoiserJob::External { command, timeout_ms } => Ok(Box::new(attach_external_denoiser(
            command,
            run.eval.num_steps(),
            Duration::from_millis(*timeout_ms),
        )?)),
    }
}

pub fn perturb(cfg: &JobConfig) -> Result<()> {
    let hash = cfg.hash();
    for run in load_inputs(cfg)? {
        let dir = cfg.seed_dir(run.input.seed).join("perturb");
        let seed = cfg.analysis_seed(run.input.seed);
        let mut denoiser = make_denoiser(cfg, &run)?;
        let mut cells = Table::new(&[
            "step",
            "ratio",
            "selector",
            "acc_base",
            "acc_pert",
            "delta",
            "delta_direct",
            "delta_collateral",
            "n_direct",
            "n_collateral",
        ]);
        let mut peaks = Table::new(&["ratio", "selector", "peak_step", "peak_delta", "direct_share"]);
        let mut failures = Table::new(&["ratio", "selector", "step", "message"]);
        let mut plot_data = Vec::new();
        for &selector in &cfg.perturb.selectors {
            for &ratio in &cfg.perturb.ratios {
                let spec = PerturbSpec {
                    ratio,
                    selector,
                    seed,
                    ratio_base: cfg.perturb.ratio_base,
                };
                let curve = sensitivity_curve(&run.eval, denoiser.as_mut(), &spec, Some(&run.eval_labels))?;
                for o in &curve.outcomes {
                    cells.push(vec![
                        o.step.to_string(),
                        fmt_f64(o.ratio),
                        o.selector.name().into(),
                        fmt_f64(o.acc_base),
                        fmt_f64(o.acc_pert),
                        fmt_f64(o.delta),
                        fmt_f64(o.delta_direct),
                        fmt_f64(o.delta_collateral),
                        o.n_direct.to_string(),
                        o.n_collateral.to_string(),
                    ]);
                    if let Some(msg) = &o.failed {
                        failures.push(vec![fmt_f64(ratio), selector.name().into(), o.step.to_string(), msg.clone()]);
                    }
                }
                match curve.peak_outcome() {
                    Some(o) => peaks.push(vec![
                        fmt_f64(ratio),
                        selector.name().into(),
                        o.step.to_string(),
                        fmt_f64(o.delta),
                        fmt_f64(o.direct_share()),
                    ]),
                    None => peaks.push(vec![
                        fmt_f64(ratio),
                        selector.name().into(),
                        "NaN".into(),
                        "NaN".into(),
                        "NaN".into(),
                    ]),
                }
                let boot = BootstrapSpec { seed, ..cfg.bootstrap };
                let series = bootstrap_series(&curve.per_record, &boot)?;
                series_table(&series).write(
                    dir.join(format!("delta_{}_{}.csv", selector.name(), ratio_tag(ratio))),
                    &hash,
                )?;
                plot_data.push((format!("{} {}", selector.name(), ratio_tag(ratio)), series));
            }
        }
        cells.write(dir.join("cells.csv"), &hash)?;
        peaks.write(dir.join("peaks.csv"), &hash)?;
        failures.write(dir.join("failures.csv"), &hash)?;
        let plots: Vec<PlotSeries<'_>> = plot_data.iter().map(|(n, s)| PlotSeries { name: n, series: s }).collect();
        write_svg(cfg, dir.join("delta.svg"), "Re-masking sensitivity", "accuracy drop", &plots)?;
    }
    Ok(())
}

/// Per-seed series sources: `(metric name, relative CSV path, column, row filter)`.
fn series_sources(cfg: &JobConfig) -> Vec<(String, String, String, Option<(String, String)>)> {
    let mut out = vec![(
        "commit_cdf".to_string(),
        "commit/cdf.csv".to_string(),
        "value".to_string(),
        Some(("group".to_string(), "all".to_string())),
    )];
    for family in &cfg.probe.families {
        for mode in ["shared", "per_step"] {
            out.push((
                format!("probe_{}_{mode}", family.name()),
                format!("probe/{}_{mode}.csv", family.name()),
                "accuracy".into(),
                None,
            ));
        }
    }
    for col in ["ece", "brier", "mean_conf", "mean_entropy", "step_accuracy"] {
        out.push((format!("uncert_{col}"), "uncert/curves.csv".into(), col.into(), None));
    }
    for selector in &cfg.perturb.selectors {
        for &ratio in &cfg.perturb.ratios {
            let stem = format!("delta_{}_{}", selector.name(), ratio_tag(ratio));
            out.push((format!("perturb_{stem}"), format!("perturb/{stem}.csv"), "value".into(), None));
        }
    }
    out
}

fn read_series(path: &Path, column: &str, filter: &Option<(String, String)>) -> Result<Vec<f64>> {
    let table = Table::read(path)?;
    let values = table.floats(column)?;
    Ok(match filter {
        None => values,
        Some((col, want)) => {
            let k = table.column(col)?;
            table.rows.iter().zip(values).filter(|(r, _)| &r[k] == want).map(|(_, v)| v).collect()
        }
    })
}

/// Cross-seed mean and sample standard deviation of every per-seed series found.
pub fn aggregate(cfg: &JobConfig) -> Result<()> {
    let hash = cfg.hash();
    let seeds: Vec<u64> = cfg.run_inputs().iter().map(|r| r.seed).collect();
    let dir = cfg.out_dir.join("aggregate");
    let mut index = Table::new(&["metric", "seeds"]);
    for (name, rel, column, filter) in series_sources(cfg) {
        let mut series = Vec::new();
        for &s in &seeds {
            let path = cfg.seed_dir(s).join(&rel);
            if path.exists() {
                series.push(StepSeries::new(read_series(&path, &column, &filter)?));
            }
        }
        if series.is_empty() {
            continue;
        }
        let (mean, std) = if series.len() >= 2 {
            cross_seed(&series)?
        } else {
            let only = series[0].clone();
            let nan = StepSeries::new(vec![f64::NAN; only.len()]);
            (only, nan)
        };
        let mut t = Table::new(&["step", "mean", "std", "n_seeds"]);
        for step in 0..mean.len() {
            t.push(vec![
                step.to_string(),
                fmt_f64(mean.values[step]),
                fmt_f64(std.values[step]),
                series.len().to_string(),
            ]);
        }
        t.write(dir.join(format!("{name}.csv")), &hash)?;
        index.push(vec![name, series.len().to_string()]);
    }
    index.write(dir.join("index.csv"), &hash)?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> String {
    let xs: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    match xs.len() {
        0 => "n/a".into(),
        1 => format!("{:.4}", xs[0]),
        n => {
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            format!("{m:.4} ± {:.4}", v.sqrt())
        }
    }
}

struct ReportInputs<'a> {
    cfg: &'a JobConfig,
    seeds: Vec<u64>,
    missing: Vec<String>,
    found: usize,
}

impl ReportInputs<'_> {
    /// Per-seed tables at `rel`, recording absent files.
    fn tables(&mut self, rel: &str) -> Vec<Table> {
        let mut out = Vec::new();
        for &s in &self.seeds {
            let path = self.cfg.seed_dir(s).join(rel);
            match Table::read(&path) {
                Ok(t) => {
                    self.found += 1;
                    out.push(t);
                }
                Err(_) => self.missing.push(format!("seed_{s}/{rel}")),
            }
        }
        out
    }
}

fn cell<'r>(t: &Table, row: &'r [String], col: &str) -> Option<&'r str> {
    let k = t.column(col).ok()?;
    row.get(k).map(|s| s.as_str())
}

/// Collects `value_col` per key (joined `key_cols`) across seed tables.
fn collect(tables: &[Table], key_cols: &[&str], value_col: &str) -> BTreeMap<Vec<String>, Vec<f64>> {
    let mut out: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for t in tables {
        for row in &t.rows {
            let key: Option<Vec<String>> = key_cols.iter().map(|c| cell(t, row, c).map(String::from)).collect();
            let value = cell(t, row, value_col).and_then(|v| v.parse().ok());
            if let (Some(key), Some(v)) = (key, value) {
                out.entry(key).or_default().push(v);
            }
        }
    }
    out
}

fn gap_note(out: &mut String, missing_before: usize, inputs: &ReportInputs<'_>) {
    for m in &inputs.missing[missing_before..] {
        let _ = writeln!(out, "_Missing input: `{m}`_\n");
    }
}

/// Summary tables from whatever per-seed outputs exist; absent inputs are
/// listed in place.
pub fn report(cfg: &JobConfig) -> Result<()> {
    let mut inputs = ReportInputs {
        cfg,
        seeds: cfg.run_inputs().iter().map(|r| r.seed).collect(),
        missing: Vec::new(),
        found: 0,
    };
    let mut out = String::new();
    let _ = writeln!(out, "<!-- config_hash={} -->", cfg.hash());
    let _ = writeln!(out, "# Trajectory analysis report\n");
    let _ = writeln!(
        out,
        "Seeds: {}. Values are cross-seed mean ± sample standard deviation.\n",
        inputs.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
    );

    let _ = writeln!(out, "## Commitment by coarse group\n");
    let before = inputs.missing.len();
    let means = inputs.tables("commit/group_means.csv");
    if !means.is_empty() {
        let _ = writeln!(out, "| grouping | group | mean commitment step | positions |");
        let _ = writeln!(out, "|---|---|---|---|");
        let steps = collect(&means, &["grouping", "group"], "mean");
        let counts = collect(&means, &["grouping", "group"], "count");
        for (key, v) in &steps {
            let n: f64 = counts.get(key).map_or(0.0, |c| c.iter().sum());
            let _ = writeln!(out, "| {} | {} | {} | {} |", key[0], key[1], mean_std(v), n);
        }
        out.push('\n');
    }
    let strata = inputs.tables("commit/strata.csv");
    if !strata.is_empty() {
        let _ = writeln!(out, "| commitment step | final accuracy |");
        let _ = writeln!(out, "|---|---|");
        for (key, v) in collect(&strata, &["stratum"], "accuracy") {
            let _ = writeln!(out, "| {} | {} |", key[0], mean_std(&v));
        }
        out.push('\n');
    }
    gap_note(&mut out, before, &inputs);

    let _ = writeln!(out, "## Re-masking sensitivity\n");
    let before = inputs.missing.len();
    let peaks = inputs.tables("perturb/peaks.csv");
    if !peaks.is_empty() {
        let _ = writeln!(out, "| selector | ratio | peak step | peak drop | direct share |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        let step = collect(&peaks, &["selector", "ratio"], "peak_step");
        let drop = collect(&peaks, &["selector", "ratio"], "peak_delta");
        let share = collect(&peaks, &["selector", "ratio"], "direct_share");
        for (key, s) in &step {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                key[0],
                key[1],
                mean_std(s),
                mean_std(drop.get(key).map_or(&[][..], |v| v)),
                mean_std(share.get(key).map_or(&[][..], |v| v))
            );
        }
        out.push('\n');
    }
    gap_note(&mut out, before, &inputs);

    let _ = writeln!(out, "## Linear recoverability\n");
    let before = inputs.missing.len();
    let summary = inputs.tables("probe/summary.csv");
    if !summary.is_empty() {
        let _ = writeln!(out, "| family | mode | initial | final | best | best step |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        let cols = ["initial", "final", "best", "best_step"];
        let data: Vec<_> = cols.iter().map(|c| collect(&summary, &["family", "mode"], c)).collect();
        for key in data[0].keys() {
            let vals: Vec<String> = data.iter().map(|d| mean_std(d.get(key).map_or(&[][..], |v| v))).collect();
            let _ = writeln!(out, "| {} | {} | {} |", key[0], key[1], vals.join(" | "));
        }
        out.push('\n');
    }
    let gaps = inputs.tables("probe/gaps.csv");
    if !gaps.is_empty() {
        let _ = writeln!(out, "| family | min per-step gap to token |");
        let _ = writeln!(out, "|---|---|");
        let mut per_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in &gaps {
            for (key, v) in collect(std::slice::from_ref(t), &["family"], "minus_token") {
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                per_seed.entry(key[0].clone()).or_default().push(min);
            }
        }
        for (family, v) in per_seed {
            let _ = writeln!(out, "| {family} | {} |", mean_std(&v));
        }
        out.push('\n');
    }
    let split = inputs.tables("probe/token_split.csv");
    if !split.is_empty() {
        let _ = writeln!(out, "| token subset | final top-1 | final top-5 | final MRR |");
        let _ = writeln!(out, "|---|---|---|---|");
        for subset in ["seen", "unseen"] {
            let mut vals = [Vec::new(), Vec::new(), Vec::new()];
            for t in &split {
                let last = t.rows.iter().rev().find(|r| cell(t, r, "subset") == Some(subset));
                if let Some(row) = last {
                    for (k, col) in ["top1", "top5", "mrr"].iter().enumerate() {
                        if let Some(v) = cell(t, row, col).and_then(|v| v.parse().ok()) {
                            vals[k].push(v);
                        }
                    }
                }
            }
            let _ = writeln!(out, "| {subset} | {} | {} | {} |", mean_std(&vals[0]), mean_std(&vals[1]), mean_std(&vals[2]));
        }
        out.push('\n');
    }
    gap_note(&mut out, before, &inputs);

    let _ = writeln!(out, "## Certainty and calibration\n");
    let before = inputs.missing.len();
    let curves = inputs.tables("uncert/curves.csv");
    if !curves.is_empty() {
        let _ = writeln!(out, "| quantity | initial step | final step | maximum |");
        let _ = writeln!(out, "|---|---|---|---|");
        for col in ["ece", "brier", "mean_conf", "mean_entropy", "entropy_correct", "entropy_wrong"] {
            let mut first = Vec::new();
            let mut last = Vec::new();
            let mut max = Vec::new();
            for t in &curves {
                if let Ok(v) = t.floats(col) {
                    first.push(v[0]);
                    last.push(*v.last().unwrap_or(&f64::NAN));
                    max.push(v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
            }
            let _ = writeln!(out, "| {col} | {} | {} | {} |", mean_std(&first), mean_std(&last), mean_std(&max));
        }
        out.push('\n');
    }
    gap_note(&mut out, before, &inputs);

    if inputs.found == 0 {
        return Err(Error::MissingOutputs(inputs.missing));
    }
    write_bytes(cfg.out_dir.join("report.md"), out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Commit,
    Probe,
    Uncert,
    Perturb,
    Aggregate,
    Report,
}

pub fn run_stage(cfg: &JobConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    match stage {
        Stage::Synth => synth(cfg),
        Stage::Commit => commit(cfg),
        Stage::Probe => probe(cfg),
        Stage::Uncert => uncert(cfg),
        Stage::Perturb => perturb(cfg),
        Stage::Aggregate => aggregate(cfg),
        Stage::Report => report(cfg),
    }
}

/// Synthesis (when no explicit runs are given), every enabled analysis,
/// aggregation, and the report.
pub fn run_all(cfg: &JobConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.runs.is_empty() {
        synth(cfg)?;
    }
    let a = cfg.analyses;
    for (enabled, stage) in [
        (a.commit, Stage::Commit),
        (a.probe, Stage::Probe),
        (a.uncert, Stage::Uncert),
        (a.perturb, Stage::Perturb),
    ] {
        if enabled {
            run_stage(cfg, stage)?;
        }
    }
    aggregate(cfg)?;
    report(cfg)
}
