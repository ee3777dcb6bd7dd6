//! Commitment steps, group-conditioned commitment CDFs, and
//! commitment-vs-correctness strata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Grouping, LabelTable};
use crate::stats::StepSeries;
use crate::trajstore::RunSet;

/// Earliest step after which the prediction never changes.
pub fn commitment_step(preds: &[u32]) -> Result<usize> {
    let last = *preds
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty prediction sequence".into()))?;
    let unchanged = preds.iter().rev().take_while(|&&p| p == last).count();
    Ok(preds.len() - unchanged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitmentRow {
    pub record_id: u64,
    /// Index into the record's masked positions.
    pub slot: usize,
    /// Sequence position.
    pub pos: usize,
    pub step: usize,
    pub committed_pred: u32,
    pub gold: u32,
    pub correct_final: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitmentTable {
    pub num_steps: usize,
    /// Run order: records as stored, slots ascending.
    pub rows: Vec<CommitmentRow>,
}

impl CommitmentTable {
    pub fn from_run(run: &RunSet) -> Self {
        let steps = run.num_steps();
        let mut rows = Vec::with_capacity(run.num_positions());
        let mut column = Vec::with_capacity(steps);
        for rec in &run.records {
            for slot in 0..rec.num_masked() {
                column.clear();
                column.extend(rec.preds.iter().map(|row| row[slot]));
                let step = commitment_step(&column).expect("validated run has T >= 1");
                rows.push(CommitmentRow {
                    record_id: rec.record_id,
                    slot,
                    pos: rec.masked_idx[slot],
                    step,
                    committed_pred: rec.final_pred(slot),
                    gold: rec.gold(slot),
                    correct_final: rec.final_correct(slot),
                });
            }
        }
        Self { num_steps: steps, rows }
    }

    /// Commitment step keyed by `(record_id, slot)`.
    pub fn lookup(&self) -> BTreeMap<(u64, usize), usize> {
        self.rows
            .iter()
            .map(|r| ((r.record_id, r.slot), r.step))
            .collect()
    }
}

fn cdf_of<'a>(steps: impl Iterator<Item = &'a usize>, num_steps: usize) -> StepSeries {
    let mut hist = vec![0usize; num_steps];
    let mut n = 0usize;
    for &c in steps {
        hist[c] += 1;
        n += 1;
    }
    let mut acc = 0usize;
    let values = hist
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / n as f64
        })
        .collect();
    StepSeries::new(values)
}

/// Ungrouped commitment CDF over every position in the table.
pub fn commitment_cdf_all(table: &CommitmentTable) -> StepSeries {
    cdf_of(table.rows.iter().map(|r| &r.step), table.num_steps)
}

fn grouped_steps(
    table: &CommitmentTable,
    labels: &LabelTable,
    grouping: Grouping,
) -> Result<BTreeMap<&'static str, Vec<usize>>> {
    let mut groups: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    let mut missing = Vec::new();
    for row in &table.rows {
        match labels.get(row.record_id, row.pos) {
            Some(label) => groups.entry(label.group(grouping)).or_default().push(row.step),
            None => missing.push(format!("({}, {})", row.record_id, row.pos)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingLabels(missing.join(", ")));
    }
    Ok(groups)
}

/// Group-conditioned commitment CDFs `F_k(t)`; groups without positions are omitted.
pub fn commitment_cdf(
    table: &CommitmentTable,
    labels: &LabelTable,
    grouping: Grouping,
) -> Result<BTreeMap<&'static str, StepSeries>> {
    Ok(grouped_steps(table, labels, grouping)?
        .into_iter()
        .map(|(k, steps)| (k, cdf_of(steps.iter(), table.num_steps)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub count: usize,
    pub mean: f64,
}

pub fn group_mean_commitment(
    table: &CommitmentTable,
    labels: &LabelTable,
    grouping: Grouping,
) -> Result<BTreeMap<&'static str, GroupMean>> {
    Ok(grouped_steps(table, labels, grouping)?
        .into_iter()
        .map(|(k, steps)| {
            let mean = steps.iter().sum::<usize>() as f64 / steps.len() as f64;
            (k, GroupMean { count: steps.len(), mean })
        })
        .collect())
}

/// Inclusive step range; `end = None` extends to the last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub start: usize,
    pub end: Option<usize>,
}

impl StepRange {
    pub fn new(start: usize, end: Option<usize>) -> Self {
        Self { start, end }
    }

    pub fn bounds(&self, num_steps: usize) -> (usize, usize) {
        (self.start, self.end.unwrap_or(num_steps.saturating_sub(1)))
    }

    pub fn label(&self) -> String {
        match self.end {
            Some(e) if e == self.start => format!("{}", self.start),
            Some(e) => format!("{}-{}", self.start, e),
            None => format!("{}+", self.start),
        }
    }
}

/// `{0}`, `{5..9}`, `{10+}`.
pub fn default_strata() -> Vec<StepRange> {
    vec![
        StepRange::new(0, Some(0)),
        StepRange::new(5, Some(9)),
        StepRange::new(10, None),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumAccuracy {
    pub range: StepRange,
    pub count: usize,
    /// `None` when the stratum is empty.
    pub accuracy: Option<f64>,
}

pub fn commitment_correctness(
    table: &CommitmentTable,
    strata: &[StepRange],
) -> Result<Vec<StratumAccuracy>> {
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(strata.len());
    for s in strata {
        let (lo, hi) = s.bounds(table.num_steps);
        if lo > hi {
            return Err(Error::InvalidArgument(format!("empty stratum {}", s.label())));
        }
        spans.push((lo, hi));
    }
    let mut sorted = spans.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0].1 >= w[1].0) {
        return Err(Error::InvalidArgument("strata overlap".into()));
    }

    Ok(strata
        .iter()
        .zip(&spans)
        .map(|(range, &(lo, hi))| {
            let members = table.rows.iter().filter(|r| r.step >= lo && r.step <= hi);
            let (count, correct) = members.fold((0, 0), |(n, c), r| (n + 1, c + r.correct_final as usize));
            StratumAccuracy {
                range: *range,
                count,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            }
        })
        .collect())
}
