//! Linear probes over logged hidden states.
//!
//! Probes are trained either shared across steps (one decoder fit on the
//! pooled `(h_t, label)` pairs of every step) or per step. Training is a
//! single pass of minibatch softmax cross-entropy under AdamW, starting
//! from zero weights; sample order is fixed by the run layout and one
//! seeded shuffle, so a given seed always yields the same weights.

pub mod adamw;
mod eval;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use eval::{eval_probe, gap_series, rank_of, ProbeEvalReport, ProbeSet, RetrievalSeries};

use crate::error::{Error, Result};
use crate::labels::{LabelRow, LabelTable, PosCoarse, Semantic, TokenLabelSpace};
use crate::seed::{keyed_rng, stream};
use crate::trajstore::RunSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeFamily {
    Pos,
    Semantic,
    Token,
}

impl ProbeFamily {
    pub const ALL: [ProbeFamily; 3] = [ProbeFamily::Pos, ProbeFamily::Semantic, ProbeFamily::Token];

    pub fn name(self) -> &'static str {
        match self {
            ProbeFamily::Pos => "pos",
            ProbeFamily::Semantic => "semantic",
            ProbeFamily::Token => "token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Shared,
    PerStep(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_bias: bool,
    /// Per-dimension standardization fit on the training hidden states.
    pub standardize: bool,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            epochs: 1,
            batch_size: 256,
            seed: 0,
            use_bias: true,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub family: ProbeFamily,
    pub mode: ProbeMode,
    pub trained_on: String,
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `num_classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Column `c` predicts label id `classes[c]`: the enum index for POS and
    /// SEMANTIC, the token id for TOKEN.
    pub classes: Vec<u32>,
    pub standardizer: Option<Standardizer>,
}

impl ProbeModel {
    fn zeros(family: ProbeFamily, mode: ProbeMode, trained_on: String, classes: Vec<u32>, dim: usize) -> Self {
        let c = classes.len();
        Self {
            family,
            mode,
            trained_on,
            num_classes: c,
            dim,
            weights: vec![0.0; c * dim],
            bias: vec![0.0; c],
            classes,
            standardizer: None,
        }
    }

    pub fn prepare(&self, hidden: &[f32], out: &mut Vec<f64>) {
        out.clear();
        match &self.standardizer {
            Some(s) => out.extend(
                hidden
                    .iter()
                    .zip(s.mean.iter().zip(&s.scale))
                    .map(|(&h, (m, sc))| (h as f64 - m) / sc),
            ),
            None => out.extend(hidden.iter().map(|&h| h as f64)),
        }
    }

    /// `W x + b` for an already prepared feature vector.
    pub fn scores_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.dim).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }

    pub fn scores(&self, hidden: &[f32]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim);
        self.prepare(hidden, &mut x);
        let mut out = Vec::with_capacity(self.num_classes);
        self.scores_into(&x, &mut out);
        out
    }

    /// Column index of the maximal score; ties go to the lowest column.
    pub fn predict(&self, hidden: &[f32]) -> usize {
        argmax(&self.scores(hidden))
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.num_classes * self.dim
            || self.bias.len() != self.num_classes
            || self.classes.len() != self.num_classes
        {
            return Err(Error::InvalidArgument("probe model shapes are inconsistent".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("probe model has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ProbeModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Class columns of a family's label space.
pub fn family_classes(family: ProbeFamily, space: Option<&TokenLabelSpace>) -> Result<Vec<u32>> {
    match family {
        ProbeFamily::Pos => Ok((0..PosCoarse::ALL.len() as u32).collect()),
        ProbeFamily::Semantic => Ok((0..Semantic::ALL.len() as u32).collect()),
        ProbeFamily::Token => space
            .map(|s| s.classes.clone())
            .ok_or_else(|| Error::InvalidArgument("TOKEN probes require a token label space".into())),
    }
}

/// Label id of a position for a family (enum index or token id).
pub(crate) fn label_id(family: ProbeFamily, row: &LabelRow) -> u32 {
    match family {
        ProbeFamily::Pos => row.pos_coarse.index() as u32,
        ProbeFamily::Semantic => row.semantic.index() as u32,
        ProbeFamily::Token => row.gold_token,
    }
}

struct Sample {
    record: usize,
    step: usize,
    slot: usize,
    target: usize,
}

fn targets(
    run: &RunSet,
    labels: &LabelTable,
    family: ProbeFamily,
    classes: &[u32],
) -> Result<Vec<Vec<usize>>> {
    let aligned = labels.align(run)?;
    let mut unknown = Vec::new();
    let out = aligned
        .iter()
        .zip(&run.records)
        .map(|(rows, rec)| {
            rows.iter()
                .map(|row| match classes.binary_search(&label_id(family, row)) {
                    Ok(c) => c,
                    Err(_) => {
                        unknown.push(format!("({}, {})", rec.record_id, row.pos));
                        0
                    }
                })
                .collect()
        })
        .collect();
    if !unknown.is_empty() {
        return Err(Error::MissingLabels(format!(
            "labels outside the {} class space: {}",
            family.name(),
            unknown.join(", ")
        )));
    }
    Ok(out)
}

fn fit_standardizer(run: &RunSet, samples: &[Sample]) -> Standardizer {
    let d = run.hidden_dim();
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for s in samples {
        let h = run.records[s.record].hidden_at(s.step, s.slot, d);
        for k in 0..d {
            let v = h[k] as f64;
            mean[k] += v;
            sq[k] += v * v;
        }
    }
    let n = samples.len().max(1) as f64;
    let scale = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= n;
            let var = (s / n - *m * *m).max(0.0);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    Standardizer { mean, scale }
}

fn fit(
    run: &RunSet,
    mut samples: Vec<Sample>,
    mut model: ProbeModel,
    hp: &ProbeHyper,
    seed: u64,
) -> Result<ProbeModel> {
    if hp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if hp.standardize {
        model.standardizer = Some(fit_standardizer(run, &samples));
    }
    let d = model.dim;
    let c = model.num_classes;
    let n_w = c * d;
    let mut params = vec![0.0; n_w + c];
    let mut grads = vec![0.0; n_w + c];
    let mut state = AdamWState::new(params.len());
    let mut x = Vec::with_capacity(d);
    let mut logits = Vec::with_capacity(c);

    for epoch in 0..hp.epochs {
        samples.shuffle(&mut keyed_rng(&[stream::SHUFFLE, seed, epoch as u64]));
        for batch in samples.chunks(hp.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for s in batch {
                model.prepare(run.records[s.record].hidden_at(s.step, s.slot, d), &mut x);
                logits.clear();
                logits.extend(params[..n_w].chunks_exact(d).zip(&params[n_w..]).map(|(row, b)| {
                    row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + if hp.use_bias { *b } else { 0.0 }
                }));
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                for (k, p) in logits.iter().enumerate() {
                    let delta = (p / z - if k == s.target { 1.0 } else { 0.0 }) * scale;
                    if delta == 0.0 {
                        continue;
                    }
                    let row = &mut grads[k * d..(k + 1) * d];
                    for (g, v) in row.iter_mut().zip(&x) {
                        *g += delta * v;
                    }
                    if hp.use_bias {
                        grads[n_w + k] += delta;
                    }
                }
            }
            adamw_step(&mut params, &grads, &mut state, &hp.optimizer)?;
        }
    }
    model.bias = params.split_off(n_w);
    model.weights = params;
    Ok(model)
}

/// One decoder fit on the pooled examples of every step.
pub fn train_shared_probe(
    train: &RunSet,
    labels: &LabelTable,
    family: ProbeFamily,
    space: Option<&TokenLabelSpace>,
    hp: &ProbeHyper,
) -> Result<ProbeModel> {
    let classes = family_classes(family, space)?;
    let targets = targets(train, labels, family, &classes)?;
    let mut samples = Vec::with_capacity(train.num_positions() * train.num_steps());
    for (r, rec) in train.records.iter().enumerate() {
        for step in 0..train.num_steps() {
            for slot in 0..rec.num_masked() {
                samples.push(Sample { record: r, step, slot, target: targets[r][slot] });
            }
        }
    }
    let model = ProbeModel::zeros(
        family,
        ProbeMode::Shared,
        train.meta.run_id.clone(),
        classes,
        train.hidden_dim(),
    );
    fit(train, samples, model, hp, hp.seed)
}

/// One decoder per step, each fit only on that step's examples. Step `t`
/// is shuffled with seed `hp.seed + t`.
pub fn train_per_step_probes(
    train: &RunSet,
    labels: &LabelTable,
    family: ProbeFamily,
    space: Option<&TokenLabelSpace>,
    hp: &ProbeHyper,
) -> Result<Vec<ProbeModel>> {
    let classes = family_classes(family, space)?;
    let targets = targets(train, labels, family, &classes)?;
    (0..train.num_steps())
        .map(|step| {
            let mut samples = Vec::with_capacity(train.num_positions());
            for (r, rec) in train.records.iter().enumerate() {
                for slot in 0..rec.num_masked() {
                    samples.push(Sample { record: r, step, slot, target: targets[r][slot] });
                }
            }
            let model = ProbeModel::zeros(
                family,
                ProbeMode::PerStep(step),
                train.meta.run_id.clone(),
                classes.clone(),
                train.hidden_dim(),
            );
            fit(train, samples, model, hp, hp.seed.wrapping_add(step as u64))
        })
        .collect()
}
