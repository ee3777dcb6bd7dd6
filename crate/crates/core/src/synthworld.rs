//! Synthetic masked-diffusion trajectories with known ground truth.
//!
//! Every masked position gets a gold token from a coarse group, a scheduled
//! commitment step `c*` drawn from that group's schedule, and a committed
//! token (gold with a step-dependent probability, otherwise a same-group
//! distractor). Predictions churn among same-group distractors before `c*`
//! and hold the committed token from `c*` on, so the measured commitment
//! step equals `c*` exactly. The sampler fills the position at `c*`.
//!
//! Hidden states are a sum of coarse-group, semantic, and token mean
//! vectors plus isotropic noise `sigma(t)`. Confidence is drawn from a
//! Beta posterior conditioned on step correctness, which makes it
//! calibrated by construction; the late-drift regime then pushes it toward
//! one after an onset step. Entropy is a linear schedule with a fixed
//! offset for eventually-wrong positions.
//!
//! The paired [`SyntheticDenoiser`] resumes a perturbed trajectory:
//! re-masked filled positions restore their logged outcome with
//! probability `p_recover(t)` and otherwise resolve to a wrong distractor.
//! Its randomness is keyed per position by the world seed; the request
//! seed is ignored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelRow, LabelTable, PosCoarse, Semantic};
use crate::perturb::{Denoiser, DenoiserCaps, ResumeRequest};
use crate::seed::{keyed_rng, stream};
use crate::trajstore::{RunMeta, RunSet, Split, TrajRecord, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitSchedule {
    /// Exact mean of the commitment-step distribution.
    pub mean: f64,
    /// Half-width of the uniform integer jitter around the mean.
    pub spread: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanConstruction {
    /// Coarse-group and semantic means on disjoint coordinate axes; token
    /// means random on the remaining coordinates.
    Orthogonal,
    /// Every mean a random unit vector in the full space.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConfidenceRegime {
    Calibrated,
    /// From `onset`, confidence `q` becomes `q + d(t) (1 - q)` with
    /// `d(t) = magnitude * min(1, (t - onset + 1) / ramp)`.
    LateDrift {
        onset: usize,
        magnitude: f64,
        ramp: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_steps: usize,
    pub hidden_dim: usize,
    pub mask_ratio: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_records: usize,
    pub eval_records: usize,
    pub group_proportions: BTreeMap<PosCoarse, f64>,
    pub commitment: BTreeMap<PosCoarse, CommitSchedule>,
    /// Probability that the committed token is gold, indexed by `c*`.
    pub correct_by_commit: Vec<f64>,
    pub means: MeanConstruction,
    pub pos_signal: f64,
    pub semantic_signal: f64,
    pub token_signal: f64,
    /// `sigma(t)`, one entry per step.
    pub noise: Vec<f64>,
    pub confidence: ConfidenceRegime,
    /// Beta concentration of the confidence draw.
    pub concentration: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub entropy_jitter: f64,
    pub wrong_entropy_offset: f64,
    pub point_of_no_return: usize,
    /// `p_recover(t)`, one entry per step.
    pub p_recover: Vec<f64>,
    /// Chance that a still-masked untouched position resolves wrong when
    /// any filled position in its record was re-masked.
    pub collateral_prob: f64,
    /// Target fraction of eval masked positions whose gold token never
    /// occurs in probe-train.
    pub unseen_eval_mass: f64,
}

/// `1 - (1 - floor) * exp(-((t - t*) / width)^2)`: recovery dips to
/// `floor` at `t*`.
pub fn recovery_dip(num_steps: usize, t_star: usize, width: f64, floor: f64) -> Vec<f64> {
    (0..num_steps)
        .map(|t| {
            let z = (t as f64 - t_star as f64) / width;
            1.0 - (1.0 - floor) * (-z * z).exp()
        })
        .collect()
}

/// Full recovery before `t_star`, `after` from `t_star` on.
pub fn recovery_cliff(num_steps: usize, t_star: usize, after: f64) -> Vec<f64> {
    (0..num_steps).map(|t| if t < t_star { 1.0 } else { after }).collect()
}

fn linear(num_steps: usize, start: f64, end: f64) -> Vec<f64> {
    (0..num_steps)
        .map(|t| {
            if num_steps == 1 {
                start
            } else {
                start + (end - start) * t as f64 / (num_steps - 1) as f64
            }
        })
        .collect()
}

impl Default for WorldConfig {
    fn default() -> Self {
        let num_steps = 16;
        let proportions = [
            (PosCoarse::Noun, 0.25),
            (PosCoarse::Verb, 0.15),
            (PosCoarse::Num, 0.10),
            (PosCoarse::AdjAdv, 0.10),
            (PosCoarse::Function, 0.25),
            (PosCoarse::Punct, 0.10),
            (PosCoarse::Other, 0.05),
        ];
        let commit = [
            (PosCoarse::Num, 3.4),
            (PosCoarse::Noun, 4.1),
            (PosCoarse::AdjAdv, 4.3),
            (PosCoarse::Verb, 4.5),
            (PosCoarse::Other, 4.6),
            (PosCoarse::Function, 4.9),
            (PosCoarse::Punct, 5.0),
        ];
        let t_star = 9;
        Self {
            seed: 42,
            vocab_size: 200,
            num_steps,
            hidden_dim: 32,
            mask_ratio: 0.4,
            min_len: 10,
            max_len: 25,
            train_records: 300,
            eval_records: 100,
            group_proportions: proportions.into_iter().collect(),
            commitment: commit
                .into_iter()
                .map(|(g, mean)| (g, CommitSchedule { mean, spread: 1 }))
                .collect(),
            correct_by_commit: (0..num_steps)
                .map(|c| match c {
                    0 => 0.62,
                    1..=4 => 0.5,
                    5..=9 => 0.31,
                    _ => 0.49,
                })
                .collect(),
            means: MeanConstruction::Orthogonal,
            pos_signal: 1.0,
            semantic_signal: 1.0,
            token_signal: 1.0,
            noise: linear(num_steps, 0.6, 0.3),
            confidence: ConfidenceRegime::Calibrated,
            concentration: 4.0,
            entropy_start: 2.5,
            entropy_end: 0.8,
            entropy_jitter: 0.1,
            wrong_entropy_offset: 0.4,
            point_of_no_return: t_star,
            p_recover: recovery_dip(num_steps, t_star, 1.5, 0.2),
            collateral_prob: 0.0,
            unseen_eval_mass: 0.334,
        }
    }
}

impl WorldConfig {
    pub fn records_for(&self, split: Split) -> usize {
        match split {
            Split::ProbeTrain => self.train_records,
            Split::Eval => self.eval_records,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_steps;
        let bad = |m: String| Err(Error::InfeasibleConfig(m));
        if t == 0 || self.hidden_dim == 0 {
            return bad("num_steps and hidden_dim must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0, 1)".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 0 < min_len <= max_len".into());
        }
        let total: f64 = self.group_proportions.values().sum();
        if (total - 1.0).abs() > 1e-9 || self.group_proportions.values().any(|&p| p < 0.0) {
            return bad(format!("group proportions must be nonnegative and sum to 1, got {total}"));
        }
        for (&g, &p) in &self.group_proportions {
            if p == 0.0 {
                continue;
            }
            let Some(s) = self.commitment.get(&g) else {
                return bad(format!("no commitment schedule for {g}"));
            };
            let lo = s.mean.floor() - s.spread as f64;
            let hi = s.mean.ceil() + s.spread as f64;
            if lo < 0.0 || hi > (t - 1) as f64 {
                return bad(format!("commitment schedule for {g} leaves [0, {t})"));
            }
        }
        for (name, v) in [
            ("correct_by_commit", &self.correct_by_commit),
            ("noise", &self.noise),
            ("p_recover", &self.p_recover),
        ] {
            if v.len() != t {
                return bad(format!("{name} must have one entry per step"));
            }
        }
        if self.correct_by_commit.iter().chain(&self.p_recover).any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.noise.iter().any(|&s| !(s >= 0.0)) {
            return bad("noise schedule must be nonnegative".into());
        }
        if self.point_of_no_return >= t {
            return bad("point_of_no_return must be < num_steps".into());
        }
        if !(0.0..=1.0).contains(&self.collateral_prob) || !(0.0..1.0).contains(&self.unseen_eval_mass) {
            return bad("collateral_prob and unseen_eval_mass out of range".into());
        }
        if let ConfidenceRegime::LateDrift { onset, magnitude, ramp } = self.confidence {
            if onset >= t || ramp == 0 || !(0.0..=1.0).contains(&magnitude) {
                return bad("late drift needs onset < T, ramp >= 1, magnitude in [0, 1]".into());
            }
        }
        if self.concentration <= 0.0 {
            return bad("concentration must be positive".into());
        }
        if self.means == MeanConstruction::Orthogonal
            && self.hidden_dim <= PosCoarse::ALL.len() + Semantic::ALL.len()
        {
            return bad(format!(
                "orthogonal means need hidden_dim > {}",
                PosCoarse::ALL.len() + Semantic::ALL.len()
            ));
        }
        Vocabulary::new(self).map(|_| ())
    }
}

/// Token ids partitioned into contiguous per-group blocks.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    blocks: BTreeMap<PosCoarse, Vec<u32>>,
    /// Tokens eligible in probe-train (and seen in eval).
    shared: BTreeMap<PosCoarse, Vec<u32>>,
    /// Tokens that only eval may draw.
    eval_only: BTreeMap<PosCoarse, Vec<u32>>,
    group_of: HashMap<u32, PosCoarse>,
}

impl Vocabulary {
    pub fn new(config: &WorldConfig) -> Result<Self> {
        let min_size = if config.unseen_eval_mass > 0.0 { 3 } else { 2 };
        let active: Vec<(PosCoarse, f64)> = config
            .group_proportions
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(&g, &p)| (g, p))
            .collect();
        if active.len() * min_size > config.vocab_size {
            return Err(Error::InfeasibleConfig(format!(
                "vocab_size {} too small for {} groups of at least {min_size} tokens",
                config.vocab_size,
                active.len()
            )));
        }
        // Largest-remainder apportionment on top of the per-group minimum.
        let spare = config.vocab_size - active.len() * min_size;
        let quotas: Vec<f64> = active.iter().map(|(_, p)| p * spare as f64).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
        let left = spare - sizes.iter().sum::<usize>();
        for &k in order.iter().take(left) {
            sizes[k] += 1;
        }

        let mut blocks = BTreeMap::new();
        let mut shared = BTreeMap::new();
        let mut eval_only = BTreeMap::new();
        let mut group_of = HashMap::new();
        let mut next = 0u32;
        for ((g, _), extra) in active.iter().zip(sizes) {
            let size = min_size + extra;
            let block: Vec<u32> = (next..next + size as u32).collect();
            next += size as u32;
            let n_eval_only = if config.unseen_eval_mass > 0.0 {
                ((size as f64 * 0.3).round() as usize).clamp(1, size - 2)
            } else {
                0
            };
            for &tok in &block {
                group_of.insert(tok, *g);
            }
            shared.insert(*g, block[..size - n_eval_only].to_vec());
            eval_only.insert(*g, block[size - n_eval_only..].to_vec());
            blocks.insert(*g, block);
        }
        Ok(Self { blocks, shared, eval_only, group_of })
    }

    pub fn group(&self, token: u32) -> Option<PosCoarse> {
        self.group_of.get(&token).copied()
    }

    pub fn block(&self, group: PosCoarse) -> &[u32] {
        &self.blocks[&group]
    }

    /// Semantic category of a token: nouns split into entities (first half
    /// of the block) and content words.
    pub fn semantic(&self, token: u32) -> Semantic {
        let group = self.group(token).unwrap_or(PosCoarse::Other);
        match group {
            PosCoarse::Noun => {
                let block = self.block(group);
                if ((token - block[0]) as usize) < block.len() / 2 {
                    Semantic::Entity
                } else {
                    Semantic::Content
                }
            }
            PosCoarse::Num => Semantic::Number,
            PosCoarse::Verb | PosCoarse::AdjAdv => Semantic::Content,
            PosCoarse::Function => Semantic::Function,
            PosCoarse::Punct => Semantic::Punct,
            PosCoarse::Other => Semantic::Other,
        }
    }

    /// Uniform same-group token different from `avoid`.
    pub fn distractor(&self, avoid: u32, rng: &mut impl Rng) -> u32 {
        let block = self.block(self.group(avoid).expect("token from this vocabulary"));
        let k = rng.random_range(0..block.len() - 1);
        let tok = block[k];
        if tok >= avoid {
            block[k + 1]
        } else {
            tok
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub record_id: u64,
    pub commit_step: Vec<usize>,
    pub committed: Vec<u32>,
    pub group: Vec<PosCoarse>,
    pub unseen: Vec<bool>,
}

/// Every scheduled quantity behind a generated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: WorldConfig,
    pub split: Split,
    /// Fraction of positions whose step-`t` prediction is gold.
    pub step_accuracy: Vec<f64>,
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub run: RunSet,
    pub labels: LabelTable,
    pub truth: GroundTruth,
}

struct ClassMeans {
    pos: Vec<Vec<f64>>,
    semantic: Vec<Vec<f64>>,
    token: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize, offset: usize, total: usize) -> Vec<f64> {
    let mut v = vec![0.0; total];
    let mut norm = 0.0;
    for x in &mut v[offset..offset + dim] {
        *x = rng.sample::<f64, _>(StandardNormal);
        norm += *x * *x;
    }
    let norm = norm.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl ClassMeans {
    fn new(config: &WorldConfig) -> Self {
        let d = config.hidden_dim;
        let mut rng = keyed_rng(&[stream::MEANS, config.seed]);
        let n_pos = PosCoarse::ALL.len();
        let n_sem = Semantic::ALL.len();
        match config.means {
            MeanConstruction::Orthogonal => {
                let axis = |k: usize| {
                    let mut v = vec![0.0; d];
                    v[k] = 1.0;
                    v
                };
                let off = n_pos + n_sem;
                Self {
                    pos: (0..n_pos).map(axis).collect(),
                    semantic: (0..n_sem).map(|k| axis(n_pos + k)).collect(),
                    token: (0..config.vocab_size).map(|_| unit_gaussian(&mut rng, d - off, off, d)).collect(),
                }
            }
            MeanConstruction::Random => Self {
                pos: (0..n_pos).map(|_| unit_gaussian(&mut rng, d, 0, d)).collect(),
                semantic: (0..n_sem).map(|_| unit_gaussian(&mut rng, d, 0, d)).collect(),
                token: (0..config.vocab_size).map(|_| unit_gaussian(&mut rng, d, 0, d)).collect(),
            },
        }
    }
}

struct Skeleton {
    record_id: u64,
    tokens: Vec<u32>,
    masked_idx: Vec<usize>,
    commit: Vec<usize>,
    committed: Vec<u32>,
    groups: Vec<PosCoarse>,
    unseen: Vec<bool>,
    preds: Vec<Vec<u32>>,
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::ProbeTrain => 1,
        Split::Eval => 2,
    }
}

fn draw_commit(schedule: &CommitSchedule, rng: &mut impl Rng) -> usize {
    let base = schedule.mean.floor();
    let frac = schedule.mean - base;
    let base = base as i64 + rng.random_bool(frac) as i64;
    let spread = schedule.spread as i64;
    (base + rng.random_range(-spread..=spread)) as usize
}

/// Generates one split of the world described by `config`.
pub fn generate(config: &WorldConfig, split: Split) -> Result<World> {
    config.validate()?;
    let vocab = Vocabulary::new(config)?;
    let steps = config.num_steps;
    let groups: Vec<PosCoarse> = config.group_proportions.keys().copied().collect();
    let weights = WeightedIndex::new(config.group_proportions.values().copied())
        .map_err(|e| Error::InfeasibleConfig(e.to_string()))?;
    let tag = split_tag(split);

    // Pass 1: tokens, schedules, and predictions.
    let mut eval_masked_seen = 0u64;
    let mut skeletons = Vec::with_capacity(config.records_for(split));
    for r in 0..config.records_for(split) {
        let mut rng = keyed_rng(&[stream::RECORD, config.seed, tag, r as u64]);
        let len = rng.random_range(config.min_len..=config.max_len);
        let m = ((config.mask_ratio * len as f64).round() as usize).clamp(1, len);
        let mut masked_idx = index::sample(&mut rng, len, m).into_vec();
        masked_idx.sort_unstable();

        let mut tokens = Vec::with_capacity(len);
        let mut pos_groups = Vec::with_capacity(len);
        for _ in 0..len {
            let g = groups[weights.sample(&mut rng)];
            pos_groups.push(g);
            tokens.push(*vocab.shared[&g].choose(&mut rng).unwrap());
        }

        let mut unseen = vec![false; m];
        if split == Split::Eval && config.unseen_eval_mass > 0.0 {
            // Low-discrepancy assignment keeps the unseen share within 1/N of target.
            let u = config.unseen_eval_mass;
            for (i, &p) in masked_idx.iter().enumerate() {
                let j = eval_masked_seen as f64;
                if ((j + 1.0) * u).floor() > (j * u).floor() {
                    unseen[i] = true;
                    tokens[p] = *vocab.eval_only[&pos_groups[p]].choose(&mut rng).unwrap();
                }
                eval_masked_seen += 1;
            }
        }

        let mut commit = Vec::with_capacity(m);
        let mut committed = Vec::with_capacity(m);
        let mut slot_groups = Vec::with_capacity(m);
        for &p in &masked_idx {
            let g = pos_groups[p];
            let c = draw_commit(&config.commitment[&g], &mut rng);
            let gold = tokens[p];
            let tok = if rng.random_bool(config.correct_by_commit[c]) {
                gold
            } else {
                vocab.distractor(gold, &mut rng)
            };
            commit.push(c);
            committed.push(tok);
            slot_groups.push(g);
        }
        let mut preds = vec![vec![0u32; m]; steps];
        for i in 0..m {
            for (t, row) in preds.iter_mut().enumerate() {
                row[i] = if t >= commit[i] {
                    committed[i]
                } else {
                    vocab.distractor(committed[i], &mut rng)
                };
            }
        }
        skeletons.push(Skeleton {
            record_id: r as u64,
            tokens,
            masked_idx,
            commit,
            committed,
            groups: slot_groups,
            unseen,
            preds,
        });
    }

    let n: usize = skeletons.iter().map(|s| s.masked_idx.len()).sum();
    let step_accuracy: Vec<f64> = (0..steps)
        .map(|t| {
            let hits: usize = skeletons
                .iter()
                .map(|s| {
                    s.masked_idx
                        .iter()
                        .enumerate()
                        .filter(|&(i, &p)| s.preds[t][i] == s.tokens[p])
                        .count()
                })
                .sum();
            hits as f64 / n.max(1) as f64
        })
        .collect();

    // Pass 2: confidence, entropy, hidden states.
    let means = ClassMeans::new(config);
    let d = config.hidden_dim;
    let entropy_base = linear(steps, config.entropy_start, config.entropy_end);
    let mut records = Vec::with_capacity(skeletons.len());
    let mut label_rows = Vec::with_capacity(n);
    let mut truth_records = Vec::with_capacity(skeletons.len());
    for s in skeletons {
        let m = s.masked_idx.len();
        let mut conf = vec![vec![0.0; m]; steps];
        let mut entropy = vec![vec![0.0; m]; steps];
        for i in 0..m {
            let gold = s.tokens[s.masked_idx[i]];
            let final_wrong = s.committed[i] != gold;
            for t in 0..steps {
                // Same stream at every step: once correctness and step
                // accuracy settle, the draw repeats exactly.
                let mut rng = keyed_rng(&[stream::CONF, config.seed, tag, s.record_id, i as u64]);
                let p = step_accuracy[t].clamp(0.01, 0.99);
                let (a, b) = (config.concentration * p, config.concentration * (1.0 - p));
                let correct = s.preds[t][i] == gold;
                let beta = if correct { Beta::new(a + 1.0, b) } else { Beta::new(a, b + 1.0) }
                    .map_err(|e| Error::InfeasibleConfig(e.to_string()))?;
                let mut q: f64 = beta.sample(&mut rng);
                if let ConfidenceRegime::LateDrift { onset, magnitude, ramp } = config.confidence {
                    if t >= onset {
                        let drift = magnitude * ((t - onset + 1) as f64 / ramp as f64).min(1.0);
                        q += drift * (1.0 - q);
                    }
                }
                conf[t][i] = q.clamp(0.0, 1.0);
                let jitter = rng.random_range(-1.0..=1.0) * config.entropy_jitter;
                let offset = if final_wrong { config.wrong_entropy_offset } else { 0.0 };
                entropy[t][i] = (entropy_base[t] + jitter + offset).max(0.0);
            }
            let g = s.groups[i];
            label_rows.push(LabelRow {
                record_id: s.record_id,
                pos: s.masked_idx[i],
                gold_token: gold,
                pos_coarse: g,
                semantic: vocab.semantic(gold),
            });
        }

        let mut rng = keyed_rng(&[stream::HIDDEN, config.seed, tag, s.record_id]);
        let mut hidden = Vec::with_capacity(steps * m * d);
        for t in 0..steps {
            for i in 0..m {
                let gold = s.tokens[s.masked_idx[i]];
                let pos = &means.pos[s.groups[i].index()];
                let sem = &means.semantic[vocab.semantic(gold).index()];
                let tok = &means.token[gold as usize];
                for k in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = config.pos_signal * pos[k]
                        + config.semantic_signal * sem[k]
                        + config.token_signal * tok[k]
                        + config.noise[t] * noise;
                    hidden.push(v as f32);
                }
            }
        }

        truth_records.push(TruthRecord {
            record_id: s.record_id,
            commit_step: s.commit.clone(),
            committed: s.committed.clone(),
            group: s.groups.clone(),
            unseen: s.unseen.clone(),
        });
        records.push(TrajRecord {
            record_id: s.record_id,
            tokens: s.tokens,
            masked_idx: s.masked_idx,
            fill_step: s.commit,
            preds: s.preds,
            conf,
            entropy,
            hidden,
        });
    }

    let meta = RunMeta {
        format_version: FORMAT_VERSION,
        run_id: format!("synth-s{}-{}", config.seed, split),
        seed: config.seed,
        num_steps: steps,
        mask_ratio: config.mask_ratio,
        hidden_dim: d,
        source_model: "synthworld".into(),
        split,
        fill_step_imputed: false,
    };
    Ok(World {
        run: RunSet { meta, records },
        labels: LabelTable::new(label_rows)?,
        truth: GroundTruth {
            config: config.clone(),
            split,
            step_accuracy,
            records: truth_records,
        },
    })
}

/// Generates the probe-train and eval splits of one world.
pub fn generate_pair(config: &WorldConfig) -> Result<(World, World)> {
    Ok((generate(config, Split::ProbeTrain)?, generate(config, Split::Eval)?))
}

struct DenoiseRecord {
    fill_step: Vec<usize>,
    masked_idx: Vec<usize>,
    committed: Vec<u32>,
    gold: Vec<u32>,
}

/// Reference denoiser that resumes synthetic trajectories from ground truth.
pub struct SyntheticDenoiser {
    vocab: Vocabulary,
    p_recover: Vec<f64>,
    collateral_prob: f64,
    num_steps: usize,
    seed: u64,
    tag: u64,
    records: HashMap<u64, DenoiseRecord>,
}

impl SyntheticDenoiser {
    pub fn new(run: &RunSet, truth: &GroundTruth) -> Result<Self> {
        let config = &truth.config;
        let mismatch = |m: String| Err(Error::InvalidArgument(format!("ground truth does not match run: {m}")));
        if run.records.len() != truth.records.len() || run.num_steps() != config.num_steps {
            return mismatch("record count or step count differs".into());
        }
        let mut records = HashMap::with_capacity(run.records.len());
        for (rec, tr) in run.records.iter().zip(&truth.records) {
            if rec.record_id != tr.record_id {
                return mismatch(format!("record id {} vs {}", rec.record_id, tr.record_id));
            }
            let finals: Vec<u32> = (0..rec.num_masked()).map(|i| rec.final_pred(i)).collect();
            if finals != tr.committed || rec.fill_step != tr.commit_step {
                return mismatch(format!("record {} schedule differs", rec.record_id));
            }
            records.insert(
                rec.record_id,
                DenoiseRecord {
                    fill_step: rec.fill_step.clone(),
                    masked_idx: rec.masked_idx.clone(),
                    committed: finals,
                    gold: (0..rec.num_masked()).map(|i| rec.gold(i)).collect(),
                },
            );
        }
        Ok(Self {
            vocab: Vocabulary::new(config)?,
            p_recover: config.p_recover.clone(),
            collateral_prob: config.collateral_prob,
            num_steps: config.num_steps,
            seed: config.seed,
            tag: split_tag(truth.split),
            records,
        })
    }
}

impl Denoiser for SyntheticDenoiser {
    fn caps(&self) -> DenoiserCaps {
        DenoiserCaps {
            num_steps: self.num_steps,
            deterministic: true,
        }
    }

    fn resume(&mut self, req: &ResumeRequest) -> Result<Vec<i64>> {
        let rec = self
            .records
            .get(&req.record_id)
            .ok_or_else(|| Error::Denoiser(format!("unknown record {}", req.record_id)))?;
        if req.masked_idx != rec.masked_idx || req.step >= self.num_steps {
            return Err(Error::Denoiser(format!("malformed request for record {}", req.record_id)));
        }
        let slot_token = |i: usize| req.tokens.get(rec.masked_idx[i]).copied().unwrap_or(-1);
        let remasked = |i: usize| slot_token(i) < 0 && rec.fill_step[i] <= req.step;
        let any_remasked = (0..rec.masked_idx.len()).any(remasked);

        Ok((0..rec.masked_idx.len())
            .map(|i| {
                // One uniform per position shared by every step and request,
                // so recovery is monotone in p_recover(t).
                let mut rng = keyed_rng(&[stream::DENOISE, self.seed, self.tag, req.record_id, i as u64]);
                let u: f64 = rng.random();
                let keep = if slot_token(i) >= 0 {
                    true
                } else if remasked(i) {
                    u < self.p_recover[req.step]
                } else {
                    !(any_remasked && u < self.collateral_prob)
                };
                if keep {
                    rec.committed[i] as i64
                } else {
                    self.vocab.distractor(rec.gold[i], &mut rng) as i64
                }
            })
            .collect())
    }
}
