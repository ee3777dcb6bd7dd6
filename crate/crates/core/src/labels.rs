//! Gold labels per masked position, the coarse taxonomies, and the compact
//! token label space used by the token-identity probe.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajstore::RunSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PosCoarse {
    Noun,
    Verb,
    Num,
    AdjAdv,
    Function,
    Punct,
    Other,
}

impl PosCoarse {
    pub const ALL: [PosCoarse; 7] = [
        PosCoarse::Noun,
        PosCoarse::Verb,
        PosCoarse::Num,
        PosCoarse::AdjAdv,
        PosCoarse::Function,
        PosCoarse::Punct,
        PosCoarse::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosCoarse::Noun => "NOUN",
            PosCoarse::Verb => "VERB",
            PosCoarse::Num => "NUM",
            PosCoarse::AdjAdv => "ADJ_ADV",
            PosCoarse::Function => "FUNCTION",
            PosCoarse::Punct => "PUNCT",
            PosCoarse::Other => "OTHER",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap()
    }

    /// Content-word groups targeted by the `pos_content` selector.
    pub fn is_content(self) -> bool {
        matches!(self, PosCoarse::Noun | PosCoarse::Verb | PosCoarse::Num | PosCoarse::AdjAdv)
    }

    pub fn is_function(self) -> bool {
        matches!(self, PosCoarse::Function | PosCoarse::Punct)
    }
}

impl fmt::Display for PosCoarse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Semantic {
    Entity,
    Number,
    Content,
    Function,
    Punct,
    Other,
}

impl Semantic {
    pub const ALL: [Semantic; 6] = [
        Semantic::Entity,
        Semantic::Number,
        Semantic::Content,
        Semantic::Function,
        Semantic::Punct,
        Semantic::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Semantic::Entity => "ENTITY",
            Semantic::Number => "NUMBER",
            Semantic::Content => "CONTENT",
            Semantic::Function => "FUNCTION",
            Semantic::Punct => "PUNCT",
            Semantic::Other => "OTHER",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

impl fmt::Display for Semantic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PosCoarse,
    Semantic,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Grouping::PosCoarse => "pos_coarse",
            Grouping::Semantic => "semantic",
        }
    }
}

/// One labeled masked position. `pos` is the sequence position, i.e. an
/// entry of the record's `masked_idx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRow {
    pub record_id: u64,
    pub pos: usize,
    pub gold_token: u32,
    pub pos_coarse: PosCoarse,
    pub semantic: Semantic,
}

impl LabelRow {
    pub fn group(&self, grouping: Grouping) -> &'static str {
        match grouping {
            Grouping::PosCoarse => self.pos_coarse.name(),
            Grouping::Semantic => self.semantic.name(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    rows: Vec<LabelRow>,
    index: HashMap<(u64, usize), usize>,
}

impl LabelTable {
    pub fn new(rows: Vec<LabelRow>) -> Result<Self> {
        let mut index = HashMap::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if index.insert((row.record_id, row.pos), k).is_some() {
                return Err(Error::Validation(vec![format!(
                    "duplicate label for record {} pos {}",
                    row.record_id, row.pos
                )]));
            }
        }
        Ok(Self { rows, index })
    }

    pub fn rows(&self) -> &[LabelRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, record_id: u64, pos: usize) -> Option<&LabelRow> {
        self.index.get(&(record_id, pos)).map(|&k| &self.rows[k])
    }

    /// Lines up labels with the run: `out[r][i]` labels masked slot `i` of
    /// record `r`. Fails if any position is unlabeled, if extra rows exist,
    /// or if a label's gold token disagrees with the record.
    pub fn align(&self, run: &RunSet) -> Result<Vec<Vec<LabelRow>>> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut out = Vec::with_capacity(run.records.len());
        for rec in &run.records {
            let mut row_labels = Vec::with_capacity(rec.num_masked());
            for (i, &pos) in rec.masked_idx.iter().enumerate() {
                match self.get(rec.record_id, pos) {
                    Some(row) => {
                        if row.gold_token != rec.gold(i) {
                            mismatched.push(format!(
                                "record {} pos {}: label gold {} != token {}",
                                rec.record_id,
                                pos,
                                row.gold_token,
                                rec.gold(i)
                            ));
                        }
                        row_labels.push(*row);
                    }
                    None => missing.push(format!("({}, {})", rec.record_id, pos)),
                }
            }
            out.push(row_labels);
        }
        if !missing.is_empty() {
            return Err(Error::MissingLabels(missing.join(", ")));
        }
        if !mismatched.is_empty() {
            return Err(Error::Validation(mismatched));
        }
        let covered = run.num_positions();
        if covered != self.rows.len() {
            return Err(Error::Validation(vec![format!(
                "label table has {} rows but run has {covered} masked positions",
                self.rows.len()
            )]));
        }
        Ok(out)
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LabelRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    LabelTable::new(rows)
}

pub fn save_labels(table: &LabelTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in table.rows() {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-group position counts `N_k`. Groups with no positions are absent.
pub fn group_counts(labels: &LabelTable, grouping: Grouping) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for row in labels.rows() {
        *counts.entry(row.group(grouping)).or_insert(0) += 1;
    }
    counts
}

/// Compact classification space over gold masked-target ids seen in a
/// train/eval run pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLabelSpace {
    /// Sorted ascending, unique.
    pub classes: Vec<u32>,
    pub train_counts: Vec<usize>,
    pub eval_counts: Vec<usize>,
    /// `seen_mask[r][i]` for eval record `r`, masked slot `i`.
    pub seen_mask: Vec<Vec<bool>>,
}

impl TokenLabelSpace {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, token: u32) -> Option<usize> {
        self.classes.binary_search(&token).ok()
    }

    pub fn unseen_fraction(&self) -> f64 {
        let total: usize = self.seen_mask.iter().map(Vec::len).sum();
        if total == 0 {
            return 0.0;
        }
        let unseen: usize = self.seen_mask.iter().flatten().filter(|&&s| !s).count();
        unseen as f64 / total as f64
    }
}

pub fn build_token_space(train: &RunSet, eval: &RunSet) -> Result<TokenLabelSpace> {
    let golds = |run: &RunSet| -> Vec<u32> {
        run.records
            .iter()
            .flat_map(|r| (0..r.num_masked()).map(move |i| r.gold(i)))
            .collect()
    };
    let train_gold = golds(train);
    let eval_gold = golds(eval);

    let mut classes: Vec<u32> = train_gold.iter().chain(&eval_gold).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("token label space is empty".into()));
    }

    let k = classes.len();
    let mut train_counts = vec![0; k];
    let mut eval_counts = vec![0; k];
    for g in &train_gold {
        train_counts[classes.binary_search(g).unwrap()] += 1;
    }
    for g in &eval_gold {
        eval_counts[classes.binary_search(g).unwrap()] += 1;
    }
    let seen_mask = eval
        .records
        .iter()
        .map(|r| {
            (0..r.num_masked())
                .map(|i| train_counts[classes.binary_search(&r.gold(i)).unwrap()] > 0)
                .collect()
        })
        .collect();

    Ok(TokenLabelSpace {
        classes,
        train_counts,
        eval_counts,
        seen_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    pub uniform_chance: f64,
    pub train_majority_acc: f64,
    /// Train-modal class id (ties to the smallest id).
    pub majority_class: u32,
}

pub fn baselines(space: &TokenLabelSpace) -> Baselines {
    let k = space.class_count().max(1);
    let mut modal = 0;
    for c in 1..space.train_counts.len() {
        if space.train_counts[c] > space.train_counts[modal] {
            modal = c;
        }
    }
    let eval_total: usize = space.eval_counts.iter().sum();
    let train_majority_acc = if eval_total == 0 {
        0.0
    } else {
        space.eval_counts.get(modal).copied().unwrap_or(0) as f64 / eval_total as f64
    };
    Baselines {
        uniform_chance: 1.0 / k as f64,
        train_majority_acc,
        majority_class: space.classes.get(modal).copied().unwrap_or(0),
    }
}
