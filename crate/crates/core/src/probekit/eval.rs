use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{label_id, ProbeFamily, ProbeModel};
use crate::error::{Error, Result};
use crate::labels::{LabelTable, TokenLabelSpace};
use crate::stats::{RecordContribution, StepSeries};
use crate::trajstore::RunSet;

pub enum ProbeSet<'a> {
    Shared(&'a ProbeModel),
    PerStep(&'a [ProbeModel]),
}

impl ProbeSet<'_> {
    fn at(&self, step: usize) -> &ProbeModel {
        match self {
            ProbeSet::Shared(m) => m,
            ProbeSet::PerStep(ms) => &ms[step],
        }
    }

    fn family(&self) -> Option<ProbeFamily> {
        match self {
            ProbeSet::Shared(m) => Some(m.family),
            ProbeSet::PerStep(ms) => ms.first().map(|m| m.family),
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            ProbeSet::Shared(_) => "shared",
            ProbeSet::PerStep(_) => "per_step",
        }
    }
}

/// 1-based rank of `gold` under descending score, ties broken by
/// ascending column index.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > g || (s == g && c < gold))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSeries {
    pub count: usize,
    pub top1: StepSeries,
    pub top5: StepSeries,
    pub top10: StepSeries,
    pub mrr: StepSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvalReport {
    pub family: ProbeFamily,
    pub mode: String,
    pub num_positions: usize,
    /// `A_g(t)`; identical to the top-1 hit rate.
    pub accuracy: StepSeries,
    pub overall: RetrievalSeries,
    /// TOKEN only: eval positions whose gold id occurs in probe-train.
    pub seen: Option<RetrievalSeries>,
    pub unseen: Option<RetrievalSeries>,
    /// Per-record sums of top-1 hits per step, for record-level bootstrap.
    pub per_record: Vec<RecordContribution>,
}

impl ProbeEvalReport {
    pub fn initial(&self) -> f64 {
        self.accuracy.values[0]
    }

    pub fn final_acc(&self) -> f64 {
        self.accuracy.last().unwrap_or(f64::NAN)
    }

    /// Step of highest accuracy, ties to the earliest step.
    pub fn best_step(&self) -> usize {
        self.accuracy.argmax().unwrap_or(0)
    }
}

/// Pointwise `a - b` of two accuracy curves.
pub fn gap_series(a: &ProbeEvalReport, b: &ProbeEvalReport) -> StepSeries {
    StepSeries::new(
        a.accuracy
            .values
            .iter()
            .zip(&b.accuracy.values)
            .map(|(x, y)| x - y)
            .collect(),
    )
}

#[derive(Clone, Copy, Default)]
struct Tally {
    n: usize,
    top1: usize,
    top5: usize,
    top10: usize,
    rr: f64,
}

impl Tally {
    fn add(&mut self, rank: Option<usize>) {
        self.n += 1;
        if let Some(r) = rank {
            self.top1 += (r <= 1) as usize;
            self.top5 += (r <= 5) as usize;
            self.top10 += (r <= 10) as usize;
            self.rr += 1.0 / r as f64;
        }
    }
}

fn series(tallies: &[Tally]) -> RetrievalSeries {
    let rate = |f: fn(&Tally) -> f64| {
        StepSeries::new(
            tallies
                .iter()
                .map(|t| if t.n == 0 { f64::NAN } else { f(t) / t.n as f64 })
                .collect(),
        )
    };
    RetrievalSeries {
        count: tallies.first().map_or(0, |t| t.n),
        top1: rate(|t| t.top1 as f64),
        top5: rate(|t| t.top5 as f64),
        top10: rate(|t| t.top10 as f64),
        mrr: rate(|t| t.rr),
    }
}

/// Evaluates shared or per-step probes on every step of an eval run.
///
/// For TOKEN probes, a gold id without a column counts as a miss at every
/// cutoff and contributes zero reciprocal rank.
pub fn eval_probe(
    probes: ProbeSet<'_>,
    eval: &RunSet,
    labels: &LabelTable,
    space: Option<&TokenLabelSpace>,
) -> Result<ProbeEvalReport> {
    let family = probes
        .family()
        .ok_or_else(|| Error::InvalidArgument("no probes supplied".into()))?;
    let steps = eval.num_steps();
    if let ProbeSet::PerStep(ms) = &probes {
        if ms.len() != steps {
            return Err(Error::InvalidArgument(format!(
                "{} per-step probes for a {steps}-step run",
                ms.len()
            )));
        }
    }
    for t in 0..steps {
        let m = probes.at(t);
        m.validate()?;
        if m.family != family || m.dim != eval.hidden_dim() {
            return Err(Error::InvalidArgument("probe family or dimension mismatch".into()));
        }
    }
    let seen_mask = match family {
        ProbeFamily::Token => Some(
            &space
                .ok_or_else(|| Error::InvalidArgument("TOKEN evaluation requires a token label space".into()))?
                .seen_mask,
        ),
        _ => None,
    };
    if let Some(mask) = seen_mask {
        if mask.len() != eval.records.len()
            || mask.iter().zip(&eval.records).any(|(m, r)| m.len() != r.num_masked())
        {
            return Err(Error::InvalidArgument("token space does not describe this eval run".into()));
        }
    }
    let aligned = labels.align(eval)?;

    // Column of each position's gold label, resolved once per probe model.
    let gold_columns = |model: &ProbeModel| -> Result<Vec<Vec<Option<usize>>>> {
        aligned
            .iter()
            .map(|rows| {
                rows.iter()
                    .map(|row| match model.classes.binary_search(&label_id(family, row)) {
                        Ok(c) => Ok(Some(c)),
                        Err(_) if family == ProbeFamily::Token => Ok(None),
                        Err(_) => Err(Error::InvalidArgument(format!(
                            "record {} pos {}: label outside the {} class index",
                            row.record_id,
                            row.pos,
                            family.name()
                        ))),
                    })
                    .collect()
            })
            .collect()
    };
    let shared_columns = match &probes {
        ProbeSet::Shared(m) => Some(gold_columns(m)?),
        ProbeSet::PerStep(_) => None,
    };

    let d = eval.hidden_dim();
    // ranks[t][r][i]
    let ranks: Vec<Vec<Vec<Option<usize>>>> = (0..steps)
        .into_par_iter()
        .map(|t| -> Result<_> {
            let model = probes.at(t);
            let owned;
            let columns = match &shared_columns {
                Some(c) => c,
                None => {
                    owned = gold_columns(model)?;
                    &owned
                }
            };
            let mut x = Vec::with_capacity(d);
            let mut scores = Vec::with_capacity(model.num_classes);
            Ok(eval
                .records
                .iter()
                .zip(columns)
                .map(|(rec, cols)| {
                    cols.iter()
                        .enumerate()
                        .map(|(i, col)| {
                            col.map(|c| {
                                model.prepare(rec.hidden_at(t, i, d), &mut x);
                                model.scores_into(&x, &mut scores);
                                rank_of(&scores, c)
                            })
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut overall = vec![Tally::default(); steps];
    let mut seen = vec![Tally::default(); steps];
    let mut unseen = vec![Tally::default(); steps];
    let mut per_record: Vec<RecordContribution> = eval
        .records
        .iter()
        .map(|r| RecordContribution { weight: r.num_masked() as f64, sums: vec![0.0; steps] })
        .collect();
    for (t, step_ranks) in ranks.iter().enumerate() {
        for (r, rec_ranks) in step_ranks.iter().enumerate() {
            for (i, &rank) in rec_ranks.iter().enumerate() {
                overall[t].add(rank);
                if rank == Some(1) {
                    per_record[r].sums[t] += 1.0;
                }
                if let Some(mask) = seen_mask {
                    if mask[r][i] {
                        seen[t].add(rank);
                    } else {
                        unseen[t].add(rank);
                    }
                }
            }
        }
    }

    let overall = series(&overall);
    Ok(ProbeEvalReport {
        family,
        mode: probes.mode_name().to_string(),
        num_positions: eval.num_positions(),
        accuracy: overall.top1.clone(),
        overall,
        seen: seen_mask.map(|_| series(&seen)),
        unseen: seen_mask.map(|_| series(&unseen)),
        per_record,
    })
}
