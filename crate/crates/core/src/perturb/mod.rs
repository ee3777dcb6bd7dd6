//! Re-masking sensitivity: select filled positions at step `t`, reset them
//! to mask, resume denoising, and measure the drop in final accuracy.
//!
//! The drop over all masked positions splits exactly into a direct part
//! (the re-masked positions) and a collateral part (untouched masked
//! positions): `delta * N = delta_direct * n_direct + delta_collateral * n_collateral`.

pub mod external;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::commitment::commitment_step;
use crate::error::{Error, Result};
use crate::labels::LabelTable;
use crate::seed::{derive_seed, keyed_rng, stream};
use crate::stats::RecordContribution;
use crate::trajstore::{RunSet, TrajRecord};

/// Token id used for positions that are masked in a resume request.
pub const MASK_SENTINEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserCaps {
    pub num_steps: usize,
    /// Whether identical requests always yield identical responses.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeRequest {
    pub record_id: u64,
    pub step: usize,
    /// Full sequence; [`MASK_SENTINEL`] at re-masked and never-filled positions.
    pub tokens: Vec<i64>,
    pub masked_idx: Vec<usize>,
    pub seed: u64,
}

/// Resumes a partially denoised sequence to its final predictions.
///
/// Must return one id per `masked_idx` entry, in order. With no re-masked
/// positions it must reproduce the logged final predictions.
pub trait Denoiser {
    fn caps(&self) -> DenoiserCaps;
    fn resume(&mut self, req: &ResumeRequest) -> Result<Vec<i64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    All,
    /// Commitment step `c <= t`.
    Committed,
    /// Commitment step `c > t`.
    Uncommitted,
    /// NOUN, VERB, NUM, ADJ_ADV.
    PosContent,
    /// FUNCTION, PUNCT.
    PosFunction,
}

impl Selector {
    pub const ALL: [Selector; 5] = [
        Selector::All,
        Selector::Committed,
        Selector::Uncommitted,
        Selector::PosContent,
        Selector::PosFunction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Selector::All => "all",
            Selector::Committed => "committed",
            Selector::Uncommitted => "uncommitted",
            Selector::PosContent => "pos_content",
            Selector::PosFunction => "pos_function",
        }
    }

    pub fn needs_labels(self) -> bool {
        matches!(self, Selector::PosContent | Selector::PosFunction)
    }

    /// Predicate over masked slot `i` of `rec` at step `t`.
    fn admits(self, rec: &TrajRecord, i: usize, t: usize, labels: Option<&LabelTable>) -> Result<bool> {
        Ok(match self {
            Selector::All => true,
            Selector::Committed | Selector::Uncommitted => {
                let preds: Vec<u32> = rec.preds.iter().map(|row| row[i]).collect();
                let c = commitment_step(&preds)?;
                (c <= t) == (self == Selector::Committed)
            }
            Selector::PosContent | Selector::PosFunction => {
                let labels = labels.ok_or_else(|| {
                    Error::InvalidArgument(format!("selector {} requires labels", self.name()))
                })?;
                let pos = rec.masked_idx[i];
                let row = labels
                    .get(rec.record_id, pos)
                    .ok_or_else(|| Error::MissingLabels(format!("record {} pos {pos}", rec.record_id)))?;
                if self == Selector::PosContent {
                    row.pos_coarse.is_content()
                } else {
                    row.pos_coarse.is_function()
                }
            }
        })
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|sel| sel.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown selector `{s}`")))
    }
}

/// What the re-masking ratio is a fraction of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBase {
    /// `ceil(ratio * |eligible|)`.
    #[default]
    Eligible,
    /// `ceil(ratio * |masked|)`, capped at `|eligible|`.
    AllMasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub ratio: f64,
    pub selector: Selector,
    pub seed: u64,
    #[serde(default)]
    pub ratio_base: RatioBase,
}

impl PerturbSpec {
    pub fn new(ratio: f64, selector: Selector, seed: u64) -> Self {
        Self {
            ratio,
            selector,
            seed,
            ratio_base: RatioBase::Eligible,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Masked slots of `rec` to re-mask at step `t`, in ascending order.
///
/// Eligible slots are those filled by `t` that pass the selector; when there
/// are none the selector is applied to every masked slot instead.
pub fn select_remask(
    rec: &TrajRecord,
    t: usize,
    spec: &PerturbSpec,
    labels: Option<&LabelTable>,
) -> Result<Vec<usize>> {
    spec.check()?;
    let m = rec.num_masked();
    let mut admitted = Vec::with_capacity(m);
    for i in 0..m {
        admitted.push(spec.selector.admits(rec, i, t, labels)?);
    }
    let mut eligible: Vec<usize> = (0..m).filter(|&i| admitted[i] && rec.fill_step[i] <= t).collect();
    if eligible.is_empty() {
        eligible = (0..m).filter(|&i| admitted[i]).collect();
    }
    if eligible.is_empty() {
        return Err(Error::EmptySelection {
            selector: spec.selector.name().into(),
            record_id: rec.record_id,
            step: t,
        });
    }
    let base = match spec.ratio_base {
        RatioBase::Eligible => eligible.len(),
        RatioBase::AllMasked => m,
    };
    let k = ((spec.ratio * base as f64).ceil() as usize).min(eligible.len());
    let mut rng = keyed_rng(&[stream::REMASK, spec.seed, rec.record_id, t as u64]);
    let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|j| eligible[j])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// The state handed to the denoiser after re-masking `remask` at step `t`.
pub fn build_request(rec: &TrajRecord, t: usize, remask: &[usize], seed: u64) -> ResumeRequest {
    let mut tokens: Vec<i64> = rec.tokens.iter().map(|&x| x as i64).collect();
    for (i, &p) in rec.masked_idx.iter().enumerate() {
        tokens[p] = if rec.fill_step[i] > t || remask.binary_search(&i).is_ok() {
            MASK_SENTINEL
        } else {
            rec.preds[t][i] as i64
        };
    }
    ResumeRequest {
        record_id: rec.record_id,
        step: t,
        tokens,
        masked_idx: rec.masked_idx.clone(),
        seed: derive_seed(&[stream::RESUME, seed, rec.record_id, t as u64]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbOutcome {
    pub step: usize,
    pub ratio: f64,
    pub selector: Selector,
    pub acc_base: f64,
    pub acc_pert: f64,
    pub delta: f64,
    /// Zero when nothing was re-masked.
    pub delta_direct: f64,
    /// Zero when every masked position was re-masked.
    pub delta_collateral: f64,
    pub n_direct: usize,
    pub n_collateral: usize,
    /// Denoiser error for this cell; drops are NaN when set.
    pub failed: Option<String>,
}

impl PerturbOutcome {
    /// `|delta * N - (delta_direct * n_direct + delta_collateral * n_collateral)|`.
    pub fn identity_residual(&self) -> f64 {
        let n = (self.n_direct + self.n_collateral) as f64;
        (self.delta * n
            - (self.delta_direct * self.n_direct as f64 + self.delta_collateral * self.n_collateral as f64))
            .abs()
    }

    /// Fraction of the total drop carried by the re-masked positions.
    pub fn direct_share(&self) -> f64 {
        let n = (self.n_direct + self.n_collateral) as f64;
        self.delta_direct * self.n_direct as f64 / (self.delta * n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub ratio: f64,
    pub selector: Selector,
    pub acc_base: f64,
    /// One cell per step.
    pub outcomes: Vec<PerturbOutcome>,
    /// Per-record `correct_base - correct_pert` per step, weighted by
    /// masked count; NaN in failed cells.
    pub per_record: Vec<RecordContribution>,
}

impl SensitivityCurve {
    /// Step and value of the largest drop among cells that did not fail;
    /// ties go to the earliest step.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.outcomes
            .iter()
            .filter(|o| o.failed.is_none())
            .fold(None, |best: Option<(usize, f64)>, o| match best {
                Some((_, v)) if v >= o.delta => best,
                _ => Some((o.step, o.delta)),
            })
    }

    pub fn peak_outcome(&self) -> Option<&PerturbOutcome> {
        self.peak().map(|(t, _)| &self.outcomes[t])
    }
}

#[derive(Default)]
struct CellCounts {
    base_direct: usize,
    pert_direct: usize,
    base_coll: usize,
    pert_coll: usize,
    n_direct: usize,
    n_coll: usize,
}

fn run_cell(
    rec: &TrajRecord,
    t: usize,
    spec: &PerturbSpec,
    labels: Option<&LabelTable>,
    denoiser: &mut dyn Denoiser,
    counts: &mut CellCounts,
) -> Result<i64> {
    let remask = match select_remask(rec, t, spec, labels) {
        Ok(s) => s,
        // A record the selector cannot touch is resumed unperturbed.
        Err(Error::EmptySelection { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let req = build_request(rec, t, &remask, spec.seed);
    let out = denoiser.resume(&req)?;
    if out.len() != rec.num_masked() {
        return Err(Error::Denoiser(format!(
            "record {}: {} predictions for {} masked positions",
            rec.record_id,
            out.len(),
            rec.num_masked()
        )));
    }
    let mut drop = 0i64;
    for (i, &pred) in out.iter().enumerate() {
        let gold = rec.gold(i) as i64;
        let base = rec.final_correct(i) as usize;
        let pert = (pred == gold) as usize;
        drop += base as i64 - pert as i64;
        if remask.binary_search(&i).is_ok() {
            counts.n_direct += 1;
            counts.base_direct += base;
            counts.pert_direct += pert;
        } else {
            counts.n_coll += 1;
            counts.base_coll += base;
            counts.pert_coll += pert;
        }
    }
    Ok(drop)
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Re-masks and resumes every record at every step.
///
/// Base accuracy comes from the logged final step. A denoiser error marks
/// that step's cell failed and the curve continues.
pub fn sensitivity_curve(
    run: &RunSet,
    denoiser: &mut dyn Denoiser,
    spec: &PerturbSpec,
    labels: Option<&LabelTable>,
) -> Result<SensitivityCurve> {
    spec.check()?;
    let steps = run.num_steps();
    let caps = denoiser.caps();
    if caps.num_steps != steps {
        return Err(Error::InvalidArgument(format!(
            "denoiser runs {} steps, trajectories have {steps}",
            caps.num_steps
        )));
    }
    if spec.selector.needs_labels() && labels.is_none() {
        return Err(Error::InvalidArgument(format!("selector {} requires labels", spec.selector)));
    }
    let n = run.num_positions();
    let acc_base = run.final_accuracy();
    let mut per_record: Vec<RecordContribution> = run
        .records
        .iter()
        .map(|r| RecordContribution {
            weight: r.num_masked() as f64,
            sums: vec![0.0; steps],
        })
        .collect();
    let mut outcomes = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut counts = CellCounts::default();
        let mut failure = None;
        for (r, rec) in run.records.iter().enumerate() {
            match run_cell(rec, t, spec, labels, denoiser, &mut counts) {
                Ok(drop) => per_record[r].sums[t] = drop as f64,
                Err(e @ (Error::Denoiser(_) | Error::Protocol { .. } | Error::Io { .. } | Error::Json(_))) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let outcome = match failure {
            Some(msg) => {
                per_record.iter_mut().for_each(|c| c.sums[t] = f64::NAN);
                PerturbOutcome {
                    step: t,
                    ratio: spec.ratio,
                    selector: spec.selector,
                    acc_base,
                    acc_pert: f64::NAN,
                    delta: f64::NAN,
                    delta_direct: f64::NAN,
                    delta_collateral: f64::NAN,
                    n_direct: 0,
                    n_collateral: 0,
                    failed: Some(msg),
                }
            }
            None => {
                let c = counts;
                let acc_pert = (c.pert_direct + c.pert_coll) as f64 / n as f64;
                let delta = ((c.base_direct + c.base_coll) as f64 - (c.pert_direct + c.pert_coll) as f64) / n as f64;
                PerturbOutcome {
                    step: t,
                    ratio: spec.ratio,
                    selector: spec.selector,
                    acc_base,
                    acc_pert,
                    delta,
                    delta_direct: rate(c.base_direct, c.n_direct) - rate(c.pert_direct, c.n_direct),
                    delta_collateral: rate(c.base_coll, c.n_coll) - rate(c.pert_coll, c.n_coll),
                    n_direct: c.n_direct,
                    n_collateral: c.n_coll,
                    failed: None,
                }
            }
        };
        outcomes.push(outcome);
    }
    Ok(SensitivityCurve {
        ratio: spec.ratio,
        selector: spec.selector,
        acc_base,
        outcomes,
        per_record,
    })
}

/// One curve per ratio, all sharing the logged base accuracy.
pub fn ratio_sweep(
    run: &RunSet,
    denoiser: &mut dyn Denoiser,
    ratios: &[f64],
    selector: Selector,
    seed: u64,
    labels: Option<&LabelTable>,
) -> Result<Vec<SensitivityCurve>> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("ratio sweep needs at least one ratio".into()));
    }
    ratios
        .iter()
        .map(|&ratio| sensitivity_curve(run, denoiser, &PerturbSpec::new(ratio, selector, seed), labels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{LabelRow, PosCoarse, Semantic};
    use crate::trajstore::fixtures::meta;
    use proptest::prelude::*;

    /// Ten masked positions; slots 0..6 filled at step 1, the rest at 3.
    fn record(fill: Vec<usize>) -> TrajRecord {
        let m = fill.len();
        let steps = 4;
        TrajRecord {
            record_id: 7,
            tokens: (0..m as u32).collect(),
            masked_idx: (0..m).collect(),
            fill_step: fill.clone(),
            preds: (0..steps)
                .map(|t| (0..m).map(|i| if t >= fill[i] { i as u32 } else { 99 }).collect())
                .collect(),
            conf: vec![vec![0.5; m]; steps],
            entropy: vec![vec![1.0; m]; steps],
            hidden: vec![0.0; steps * m],
        }
    }

    /// Flips exactly the listed slots to a wrong id.
    struct Scripted {
        flip: Vec<usize>,
        steps: usize,
    }

    impl Denoiser for Scripted {
        fn caps(&self) -> DenoiserCaps {
            DenoiserCaps {
                num_steps: self.steps,
                deterministic: true,
            }
        }
        fn resume(&mut self, req: &ResumeRequest) -> Result<Vec<i64>> {
            Ok(req
                .masked_idx
                .iter()
                .enumerate()
                .map(|(i, &p)| if self.flip.contains(&i) { -5 } else { p as i64 })
                .collect())
        }
    }

    #[test]
    fn fallback_when_nothing_filled() {
        let rec = record(vec![3; 10]);
        let spec = PerturbSpec::new(0.2, Selector::All, 1);
        let s = select_remask(&rec, 0, &spec, None).unwrap();
        assert_eq!(s.len(), 2);
        let full = select_remask(&rec, 0, &PerturbSpec::new(1.0, Selector::All, 1), None).unwrap();
        assert_eq!(full, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn eligibility_respects_fill_step() {
        let rec = record(vec![1, 1, 1, 1, 1, 1, 3, 3, 3, 3]);
        let s = select_remask(&rec, 2, &PerturbSpec::new(1.0, Selector::All, 1), None).unwrap();
        assert_eq!(s, vec![0, 1, 2, 3, 4, 5]);
        let s = select_remask(&rec, 2, &PerturbSpec::new(0.5, Selector::All, 1), None).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&i| i < 6));
    }

    #[test]
    fn selection_is_deterministic() {
        let rec = record(vec![0; 10]);
        let spec = PerturbSpec::new(0.3, Selector::All, 11);
        let a = select_remask(&rec, 2, &spec, None).unwrap();
        assert_eq!(a, select_remask(&rec, 2, &spec, None).unwrap());
        let draws: Vec<_> = (0..4).map(|t| select_remask(&rec, t, &spec, None).unwrap()).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn committed_boundary_and_partition() {
        // Commitment at step 2 for slot 0 while the sampler filled it at 0.
        let mut rec = record(vec![0, 0, 0]);
        rec.preds = vec![vec![5, 1, 2], vec![6, 1, 2], vec![0, 1, 2], vec![0, 1, 2]];
        let committed = Selector::Committed;
        assert!(committed.admits(&rec, 0, 2, None).unwrap());
        assert!(!committed.admits(&rec, 0, 1, None).unwrap());
        for t in 0..4 {
            let c = select_remask(&rec, t, &PerturbSpec::new(1.0, Selector::Committed, 0), None).unwrap_or_default();
            let u = select_remask(&rec, t, &PerturbSpec::new(1.0, Selector::Uncommitted, 0), None).unwrap_or_default();
            let all = select_remask(&rec, t, &PerturbSpec::new(1.0, Selector::All, 0), None).unwrap();
            let mut union: Vec<usize> = c.iter().chain(&u).copied().collect();
            union.sort_unstable();
            assert_eq!(union, all);
            assert!(c.iter().all(|i| !u.contains(i)));
        }
    }

    #[test]
    fn pos_selectors_and_empty_selection() {
        let rec = record(vec![0, 0]);
        let row = |pos, g| LabelRow {
            record_id: 7,
            pos,
            gold_token: pos as u32,
            pos_coarse: g,
            semantic: Semantic::Other,
        };
        let labels = LabelTable::new(vec![row(0, PosCoarse::Noun), row(1, PosCoarse::Noun)]).unwrap();
        let content = PerturbSpec::new(1.0, Selector::PosContent, 0);
        assert_eq!(select_remask(&rec, 1, &content, Some(&labels)).unwrap(), vec![0, 1]);
        let function = PerturbSpec::new(1.0, Selector::PosFunction, 0);
        assert!(matches!(
            select_remask(&rec, 1, &function, Some(&labels)),
            Err(Error::EmptySelection { .. })
        ));
        assert!(select_remask(&rec, 1, &content, None).is_err());
    }

    #[test]
    fn hand_decomposition() {
        // N = 10, slots 8 and 9 end wrong. Two of the eight filled slots
        // are re-masked (2 correct -> 1); untouched 8 go from 6 correct to 5.
        let mut rec = record(vec![0, 0, 0, 0, 0, 0, 0, 0, 3, 3]);
        rec.preds[3][8] = 50;
        rec.preds[3][9] = 51;
        for t in 0..3 {
            rec.preds[t][8] = 50;
            rec.preds[t][9] = 51;
        }
        let run = RunSet {
            meta: meta(4, 1),
            records: vec![rec.clone()],
        };
        let spec = PerturbSpec::new(0.2, Selector::All, 0);
        let picked = select_remask(&rec, 0, &spec, None).unwrap();
        assert_eq!(picked.len(), 2);
        let untouched = (0..8).find(|i| !picked.contains(i)).unwrap();
        let mut den = Scripted {
            flip: vec![picked[0], untouched, 8, 9],
            steps: 4,
        };
        let curve = sensitivity_curve(&run, &mut den, &spec, None).unwrap();
        let o = &curve.outcomes[0];
        assert!((o.delta - 0.2).abs() < 1e-12);
        assert!((o.delta_direct - 0.5).abs() < 1e-12);
        assert!((o.delta_collateral - 0.125).abs() < 1e-12);
        assert_eq!((o.n_direct, o.n_collateral), (2, 8));
        assert!(o.identity_residual() < 1e-12);
    }

    struct Failing;
    impl Denoiser for Failing {
        fn caps(&self) -> DenoiserCaps {
            DenoiserCaps {
                num_steps: 4,
                deterministic: true,
            }
        }
        fn resume(&mut self, req: &ResumeRequest) -> Result<Vec<i64>> {
            if req.step == 2 {
                Err(Error::Denoiser("boom".into()))
            } else {
                Ok(req.masked_idx.iter().map(|&p| p as i64).collect())
            }
        }
    }

    #[test]
    fn failed_cell_does_not_stop_curve() {
        let run = RunSet {
            meta: meta(4, 1),
            records: vec![record(vec![0; 5])],
        };
        let curve = sensitivity_curve(&run, &mut Failing, &PerturbSpec::new(0.2, Selector::All, 0), None).unwrap();
        assert_eq!(curve.outcomes.len(), 4);
        assert!(curve.outcomes[2].failed.is_some());
        assert!(curve.outcomes[2].delta.is_nan());
        assert_eq!(curve.outcomes[3].delta, 0.0);
        assert_eq!(curve.peak(), Some((0, 0.0)));
    }

    #[test]
    fn selector_names_round_trip() {
        for s in Selector::ALL {
            assert_eq!(s.name().parse::<Selector>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("none".parse::<Selector>().is_err());
    }

    #[test]
    fn ratio_base_all_masked_is_capped() {
        let rec = record(vec![0, 0, 3, 3, 3, 3, 3, 3, 3, 3]);
        let spec = PerturbSpec {
            ratio_base: RatioBase::AllMasked,
            ..PerturbSpec::new(0.5, Selector::All, 0)
        };
        assert_eq!(select_remask(&rec, 1, &spec, None).unwrap(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn sample_size_is_ceiling(
            fills in proptest::collection::vec(0usize..4, 1..30),
            ratio in 0.01f64..=1.0,
            t in 0usize..4,
            seed in any::<u64>(),
        ) {
            let rec = record(fills.clone());
            let spec = PerturbSpec::new(ratio, Selector::All, seed);
            let s = select_remask(&rec, t, &spec, None).unwrap();
            let filled = fills.iter().filter(|&&f| f <= t).count();
            let eligible = if filled == 0 { fills.len() } else { filled };
            prop_assert_eq!(s.len(), (ratio * eligible as f64).ceil() as usize);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            if filled > 0 {
                prop_assert!(s.iter().all(|&i| fills[i] <= t));
            }
        }
    }
}
