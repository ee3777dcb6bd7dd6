//! Per-step certainty curves, the eventually-correct / eventually-wrong
//! split, and calibration drift.
//!
//! Cohorts are fixed by final-step correctness. Calibration at step `t`
//! scores the step-`t` predictor: a position is correct at `t` when its
//! step-`t` prediction equals the gold token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::StepSeries;
use crate::trajstore::RunSet;

pub const DEFAULT_BINS: usize = 15;

fn bin_index(q: f64, bins: usize) -> usize {
    // Right-inclusive edges: bin b covers (b/B, (b+1)/B], bin 0 also holds 0.
    let b = bins as f64;
    let mut idx = ((q * b).ceil() as usize).saturating_sub(1).min(bins - 1);
    if idx > 0 && q <= idx as f64 / b {
        idx -= 1;
    }
    if idx + 1 < bins && q > (idx + 1) as f64 / b {
        idx += 1;
    }
    idx
}

/// Binned expected calibration error over equal-width bins on `[0, 1]`.
pub fn ece(conf: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if conf.is_empty() {
        return Err(Error::InvalidArgument("ECE of an empty sample".into()));
    }
    if conf.len() != correct.len() {
        return Err(Error::InvalidArgument("conf/correct length mismatch".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&q, &c) in conf.iter().zip(correct) {
        let b = bin_index(q, bins);
        count[b] += 1;
        conf_sum[b] += q;
        hits[b] += c as usize;
    }
    let n = conf.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (conf_sum[b] / nb - hits[b] as f64 / nb).abs()
        })
        .sum())
}

/// Binary Brier score of top-1 confidence against correctness.
pub fn brier(conf: &[f64], correct: &[bool]) -> Result<f64> {
    if conf.is_empty() {
        return Err(Error::InvalidArgument("Brier score of an empty sample".into()));
    }
    if conf.len() != correct.len() {
        return Err(Error::InvalidArgument("conf/correct length mismatch".into()));
    }
    Ok(conf
        .iter()
        .zip(correct)
        .map(|(&q, &c)| (q - if c { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        / conf.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub count: usize,
    pub conf: StepSeries,
    pub entropy: StepSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub num_positions: usize,
    pub mean_conf: StepSeries,
    pub mean_entropy: StepSeries,
    /// `None` when no position ends correct.
    pub correct: Option<Cohort>,
    /// `None` when every position ends correct.
    pub wrong: Option<Cohort>,
    pub step_accuracy: StepSeries,
    pub ece: StepSeries,
    pub brier: StepSeries,
    pub bin_count: usize,
}

impl UncertaintyReport {
    pub fn final_entropy_gap(&self) -> Option<f64> {
        Some(self.wrong.as_ref()?.entropy.last()? - self.correct.as_ref()?.entropy.last()?)
    }
}

/// Confidence and correctness at one step, flattened over positions in run order.
pub fn step_pairs(run: &RunSet, step: usize) -> (Vec<f64>, Vec<bool>) {
    let mut conf = Vec::with_capacity(run.num_positions());
    let mut correct = Vec::with_capacity(run.num_positions());
    for rec in &run.records {
        for i in 0..rec.num_masked() {
            conf.push(rec.conf[step][i]);
            correct.push(rec.preds[step][i] == rec.gold(i));
        }
    }
    (conf, correct)
}

pub fn certainty_curves(run: &RunSet, bins: usize) -> Result<UncertaintyReport> {
    let steps = run.num_steps();
    let n = run.num_positions();
    if n == 0 {
        return Err(Error::InvalidArgument("run has no masked positions".into()));
    }

    let mut sums = [[vec![0.0; steps], vec![0.0; steps]], [vec![0.0; steps], vec![0.0; steps]]];
    let mut cohort_n = [0usize; 2];
    for rec in &run.records {
        for i in 0..rec.num_masked() {
            let k = rec.final_correct(i) as usize;
            cohort_n[k] += 1;
            for t in 0..steps {
                sums[k][0][t] += rec.conf[t][i];
                sums[k][1][t] += rec.entropy[t][i];
            }
        }
    }
    let mean_of = |idx: usize| {
        StepSeries::new(
            (0..steps)
                .map(|t| (sums[0][idx][t] + sums[1][idx][t]) / n as f64)
                .collect(),
        )
    };
    let cohort = |k: usize| {
        (cohort_n[k] > 0).then(|| Cohort {
            count: cohort_n[k],
            conf: StepSeries::new(sums[k][0].iter().map(|s| s / cohort_n[k] as f64).collect()),
            entropy: StepSeries::new(sums[k][1].iter().map(|s| s / cohort_n[k] as f64).collect()),
        })
    };

    let mut ece_v = Vec::with_capacity(steps);
    let mut brier_v = Vec::with_capacity(steps);
    let mut acc_v = Vec::with_capacity(steps);
    for t in 0..steps {
        let (conf, correct) = step_pairs(run, t);
        ece_v.push(ece(&conf, &correct, bins)?);
        brier_v.push(brier(&conf, &correct)?);
        acc_v.push(correct.iter().filter(|&&c| c).count() as f64 / n as f64);
    }

    Ok(UncertaintyReport {
        num_positions: n,
        mean_conf: mean_of(0),
        mean_entropy: mean_of(1),
        correct: cohort(1),
        wrong: cohort(0),
        step_accuracy: StepSeries::new(acc_v),
        ece: StepSeries::new(ece_v),
        brier: StepSeries::new(brier_v),
        bin_count: bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajstore::fixtures::minimal;
    use proptest::prelude::*;

    #[test]
    fn perfect_confidence_has_zero_ece() {
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
    }

    #[test]
    fn one_bin_hand_case() {
        let e = ece(&[0.8, 0.8, 0.8], &[true, true, false], 1).unwrap();
        assert!((e - (0.8 - 2.0 / 3.0)).abs() < 1e-12);
        assert!((e - 0.133_333_333_3).abs() < 1e-9);
    }

    #[test]
    fn bin_edges_are_right_inclusive() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.8, 15), 11);
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.5000001, 2), 1);
    }

    #[test]
    fn brier_cases() {
        assert_eq!(brier(&[1.0], &[true]).unwrap(), 0.0);
        assert!((brier(&[0.8], &[true]).unwrap() - 0.04).abs() < 1e-15);
        assert!(brier(&[], &[]).is_err());
        assert!(ece(&[], &[], 3).is_err());
    }

    #[test]
    fn single_position_curve() {
        let mut run = minimal();
        run.records[0].conf = vec![vec![0.5], vec![1.0]];
        let r = certainty_curves(&run, DEFAULT_BINS).unwrap();
        assert_eq!(r.mean_conf.values, vec![0.5, 1.0]);
        assert!(r.wrong.is_none());
        assert_eq!(r.correct.as_ref().unwrap().count, 1);
        assert_eq!(r.step_accuracy.values, vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn ece_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
            rot in 0usize..80,
        ) {
            let (c, k): (Vec<f64>, Vec<bool>) = pairs.iter().cloned().unzip();
            let mut p = pairs.clone();
            p.rotate_left(rot % pairs.len());
            p.reverse();
            let (c2, k2): (Vec<f64>, Vec<bool>) = p.into_iter().unzip();
            let a = ece(&c, &k, 15).unwrap();
            let b = ece(&c2, &k2, 15).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn brier_constant_conf_identity(p in 0.0f64..=1.0, correct in proptest::collection::vec(any::<bool>(), 1..60)) {
            let a = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
            let b = brier(&vec![p; correct.len()], &correct).unwrap();
            prop_assert!((b - (p * p - 2.0 * p * a + a)).abs() < 1e-12);
        }
    }
}
