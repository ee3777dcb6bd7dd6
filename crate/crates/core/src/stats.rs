//! Step series, record-level bootstrap bands, and cross-seed aggregation.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// A per-step metric curve with an optional confidence band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSeries {
    pub values: Vec<f64>,
    pub band: Option<Vec<(f64, f64)>>,
}

impl StepSeries {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, band: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// Index of the maximum value, ties to the earliest step.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (t, &v) in self.values.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            match best {
                Some(b) if self.values[b] >= v => {}
                _ => best = Some(t),
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// One record's contribution to a position-weighted per-step aggregate:
/// the aggregate is `sum_r sums_r[t] / sum_r weight_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordContribution {
    pub weight: f64,
    pub sums: Vec<f64>,
}

fn aggregate<'a>(items: impl Iterator<Item = &'a RecordContribution>, steps: usize) -> Vec<f64> {
    let mut total = vec![0.0; steps];
    let mut weight = 0.0;
    for item in items {
        weight += item.weight;
        for (acc, v) in total.iter_mut().zip(&item.sums) {
            *acc += v;
        }
    }
    total.iter().map(|v| v / weight).collect()
}

/// Sorted-sample indices of the percentile interval endpoints.
pub fn percentile_indices(resamples: usize, level: f64) -> (usize, usize) {
    let alpha = (1.0 - level) / 2.0;
    let lo = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - alpha) * resamples as f64).ceil() as usize)
        .saturating_sub(1)
        .clamp(lo, resamples - 1);
    (lo, hi)
}

/// Record-level percentile bootstrap of a position-weighted step aggregate.
///
/// The point estimate is the full-sample value. The band is the percentile
/// interval of the resampled aggregates, widened to include the point
/// estimate when a small number of resamples leaves it outside.
pub fn bootstrap_series(per_record: &[RecordContribution], spec: &BootstrapSpec) -> Result<StepSeries> {
    if per_record.len() < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least two records".into(),
        ));
    }
    if spec.resamples < 1 || !(spec.level > 0.0 && spec.level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid bootstrap spec: B={} level={}",
            spec.resamples, spec.level
        )));
    }
    let steps = per_record[0].sums.len();
    if per_record.iter().any(|r| r.sums.len() != steps) {
        return Err(Error::InvalidArgument("records disagree on step count".into()));
    }

    // Canonical record order makes the result invariant to input ordering.
    let mut records: Vec<&RecordContribution> = per_record.iter().collect();
    records.sort_by(|a, b| {
        a.weight
            .total_cmp(&b.weight)
            .then_with(|| {
                a.sums
                    .iter()
                    .zip(&b.sums)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let point = aggregate(records.iter().copied(), steps);
    let resampled: Vec<Vec<f64>> = (0..spec.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, b as u64]));
            let draw = (0..records.len()).map(|_| *records.choose(&mut rng).unwrap());
            aggregate(draw, steps)
        })
        .collect();

    let (lo_idx, hi_idx) = percentile_indices(spec.resamples, spec.level);
    let band = (0..steps)
        .map(|t| {
            let mut column: Vec<f64> = resampled.iter().map(|v| v[t]).collect();
            column.sort_by(f64::total_cmp);
            let lo = column[lo_idx].min(point[t]);
            let hi = column[hi_idx].max(point[t]);
            (lo, hi)
        })
        .collect();

    Ok(StepSeries {
        values: point,
        band: Some(band),
    })
}

/// Per-step mean and sample (n-1) standard deviation across seeds.
pub fn cross_seed(series: &[StepSeries]) -> Result<(StepSeries, StepSeries)> {
    if series.len() < 2 {
        return Err(Error::InvalidArgument(
            "cross-seed aggregation needs at least two series".into(),
        ));
    }
    let steps = series[0].len();
    if let Some(bad) = series.iter().find(|s| s.len() != steps) {
        return Err(Error::InvalidArgument(format!(
            "series length mismatch: {} vs {steps}",
            bad.len()
        )));
    }
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(steps);
    let mut std = Vec::with_capacity(steps);
    for t in 0..steps {
        let m = series.iter().map(|s| s.values[t]).sum::<f64>() / n;
        let var = series.iter().map(|s| (s.values[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok((StepSeries::new(mean), StepSeries::new(std)))
}
