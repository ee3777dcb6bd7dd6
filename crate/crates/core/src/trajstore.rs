//! Trajectory data model and the line-oriented on-disk format.
//!
//! A run file is a header line of run metadata followed by one line per
//! record. Every line is a JSON object with a fixed key order; floats are
//! written as shortest round-trip decimals, hidden states at 32-bit
//! precision as a flat row-major `steps x masked x hidden_dim` array.
//!
//! ```text
//! {"format_version":1,"run_id":"...","seed":42,"num_steps":32,...}
//! {"record_id":0,"tokens":[...],"masked_idx":[...],"fill_step":[...],"preds":[[...]],...}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    ProbeTrain,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::ProbeTrain => f.write_str("probe_train"),
            Split::Eval => f.write_str("eval"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub format_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub num_steps: usize,
    pub mask_ratio: f64,
    pub hidden_dim: usize,
    pub source_model: String,
    pub split: Split,
    /// Set by exporters that cannot observe the sampler's fill order and
    /// wrote `fill_step = 0` everywhere.
    #[serde(default)]
    pub fill_step_imputed: bool,
}

/// One sequence's token-by-step table over its masked positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajRecord {
    pub record_id: u64,
    pub tokens: Vec<u32>,
    pub masked_idx: Vec<usize>,
    pub fill_step: Vec<usize>,
    /// `[step][masked position]`
    pub preds: Vec<Vec<u32>>,
    pub conf: Vec<Vec<f64>>,
    pub entropy: Vec<Vec<f64>>,
    /// Flat `[step][masked position][dim]`.
    pub hidden: Vec<f32>,
}

impl TrajRecord {
    pub fn num_masked(&self) -> usize {
        self.masked_idx.len()
    }

    /// Gold token id at masked slot `i`.
    pub fn gold(&self, i: usize) -> u32 {
        self.tokens[self.masked_idx[i]]
    }

    pub fn hidden_at(&self, step: usize, i: usize, hidden_dim: usize) -> &[f32] {
        let m = self.num_masked();
        let start = (step * m + i) * hidden_dim;
        &self.hidden[start..start + hidden_dim]
    }

    pub fn final_pred(&self, i: usize) -> u32 {
        self.preds[self.preds.len() - 1][i]
    }

    pub fn final_correct(&self, i: usize) -> bool {
        self.final_pred(i) == self.gold(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSet {
    pub meta: RunMeta,
    pub records: Vec<TrajRecord>,
}

impl RunSet {
    /// Total number of masked positions, `N`.
    pub fn num_positions(&self) -> usize {
        self.records.iter().map(TrajRecord::num_masked).sum()
    }

    pub fn num_steps(&self) -> usize {
        self.meta.num_steps
    }

    pub fn hidden_dim(&self) -> usize {
        self.meta.hidden_dim
    }

    /// Final-step exact-match accuracy over all masked positions.
    pub fn final_accuracy(&self) -> f64 {
        let n = self.num_positions();
        if n == 0 {
            return 0.0;
        }
        let correct: usize = self
            .records
            .iter()
            .map(|r| (0..r.num_masked()).filter(|&i| r.final_correct(i)).count())
            .sum();
        correct as f64 / n as f64
    }
}

/// A single invariant violation. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record_id: Option<u64>,
    pub field: String,
    pub index: Option<Vec<usize>>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record_id {
            Some(id) => write!(f, "record {id}: ")?,
            None => f.write_str("header: ")?,
        }
        write!(f, "field `{}`", self.field)?;
        if let Some(index) = &self.index {
            write!(f, " at {index:?}")?;
        }
        write!(f, ": {}", self.message)
    }
}

fn violation(
    record_id: Option<u64>,
    field: &str,
    index: Option<Vec<usize>>,
    message: impl Into<String>,
) -> Violation {
    Violation {
        record_id,
        field: field.to_string(),
        index,
        message: message.into(),
    }
}

pub fn validate_meta(meta: &RunMeta) -> Vec<Violation> {
    let mut out = Vec::new();
    if meta.format_version != FORMAT_VERSION {
        out.push(violation(
            None,
            "format_version",
            None,
            format!("unsupported version {}", meta.format_version),
        ));
    }
    if meta.num_steps < 1 {
        out.push(violation(None, "num_steps", None, "must be >= 1"));
    }
    if !(meta.mask_ratio > 0.0 && meta.mask_ratio < 1.0) {
        out.push(violation(None, "mask_ratio", None, "must lie in (0, 1)"));
    }
    if meta.hidden_dim < 1 {
        out.push(violation(None, "hidden_dim", None, "must be >= 1"));
    }
    out
}

pub fn validate_record(meta: &RunMeta, rec: &TrajRecord) -> Vec<Violation> {
    let id = Some(rec.record_id);
    let steps = meta.num_steps;
    let m = rec.masked_idx.len();
    let mut out = Vec::new();

    for (k, w) in rec.masked_idx.windows(2).enumerate() {
        if w[0] >= w[1] {
            out.push(violation(id, "masked_idx", Some(vec![k + 1]), "not strictly increasing"));
        }
    }
    for (k, &p) in rec.masked_idx.iter().enumerate() {
        if p >= rec.tokens.len() {
            out.push(violation(
                id,
                "masked_idx",
                Some(vec![k]),
                format!("position {p} outside sequence of length {}", rec.tokens.len()),
            ));
        }
    }

    if rec.fill_step.len() != m {
        out.push(violation(
            id,
            "fill_step",
            None,
            format!("length {} != masked count {m}", rec.fill_step.len()),
        ));
    }
    for (i, &s) in rec.fill_step.iter().enumerate() {
        if s >= steps {
            out.push(violation(id, "fill_step", Some(vec![i]), format!("{s} outside [0, {steps})")));
        }
    }

    fn check_shape<T>(
        out: &mut Vec<Violation>,
        id: Option<u64>,
        field: &str,
        rows: &[Vec<T>],
        steps: usize,
        m: usize,
    ) -> bool {
        let mut ok = true;
        if rows.len() != steps {
            out.push(violation(
                id,
                field,
                None,
                format!("outer length {} != num_steps {steps}", rows.len()),
            ));
            ok = false;
        }
        for (t, row) in rows.iter().enumerate() {
            if row.len() != m {
                out.push(violation(
                    id,
                    field,
                    Some(vec![t]),
                    format!("inner length {} != masked count {m}", row.len()),
                ));
                ok = false;
            }
        }
        ok
    }

    check_shape(&mut out, id, "preds", &rec.preds, steps, m);
    check_shape(&mut out, id, "conf", &rec.conf, steps, m);
    check_shape(&mut out, id, "entropy", &rec.entropy, steps, m);

    for (t, row) in rec.conf.iter().enumerate() {
        for (i, &q) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&q) {
                out.push(violation(id, "conf", Some(vec![t, i]), format!("{q} outside [0, 1]")));
            }
        }
    }
    for (t, row) in rec.entropy.iter().enumerate() {
        for (i, &h) in row.iter().enumerate() {
            if !(h >= 0.0 && h.is_finite()) {
                out.push(violation(id, "entropy", Some(vec![t, i]), format!("{h} is not a finite value >= 0")));
            }
        }
    }

    let expected_hidden = steps * m * meta.hidden_dim;
    if rec.hidden.len() != expected_hidden {
        out.push(violation(
            id,
            "hidden",
            None,
            format!("length {} != num_steps*masked*hidden_dim = {expected_hidden}", rec.hidden.len()),
        ));
    } else if let Some(k) = rec.hidden.iter().position(|v| !v.is_finite()) {
        out.push(violation(id, "hidden", Some(vec![k]), "non-finite value"));
    }
    out
}

/// Returns every invariant violation in the run; empty iff the run is valid.
pub fn validate_run(run: &RunSet) -> Vec<Violation> {
    let mut out = validate_meta(&run.meta);
    let mut seen = HashSet::new();
    for rec in &run.records {
        if !seen.insert(rec.record_id) {
            out.push(violation(Some(rec.record_id), "record_id", None, "duplicate record id"));
        }
        out.extend(validate_record(&run.meta, rec));
    }
    if run.num_positions() == 0 {
        out.push(violation(None, "records", None, "run has no masked positions"));
    }
    out
}

/// Streams records from a run file after parsing its header.
pub struct RunReader {
    meta: RunMeta,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl RunReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::Format(format!("{}: empty file, missing header", path.display()))),
        };
        let meta: RunMeta = serde_json::from_str(&first).map_err(|e| {
            Error::Format(format!("{}: missing or malformed header line: {e}", path.display()))
        })?;
        let violations = validate_meta(&meta);
        if !violations.is_empty() {
            return Err(Error::Validation(violations.iter().map(ToString::to_string).collect()));
        }
        Ok(Self {
            meta,
            lines,
            line_no: 1,
        })
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }
}

impl Iterator for RunReader {
    type Item = Result<TrajRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str::<TrajRecord>(&line).map_err(|e| Error::Parse {
                    line: self.line_no,
                    message: e.to_string(),
                }),
            );
        }
    }
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunSet> {
    let reader = RunReader::open(path)?;
    let meta = reader.meta().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    let run = RunSet { meta, records };
    let violations = validate_run(&run);
    if !violations.is_empty() {
        return Err(Error::Validation(violations.iter().map(ToString::to_string).collect()));
    }
    Ok(run)
}

/// Serializes a run in canonical form.
pub fn write_run<W: Write>(run: &RunSet, mut w: W) -> Result<()> {
    let violations = validate_run(run);
    if !violations.is_empty() {
        return Err(Error::Validation(violations.iter().map(ToString::to_string).collect()));
    }
    let io = |e| Error::io("<writer>", e);
    serde_json::to_writer(&mut w, &run.meta)?;
    w.write_all(b"\n").map_err(io)?;
    for rec in &run.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn save_run(run: &RunSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_run(run, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn to_bytes(run: &RunSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_run(run, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn meta(steps: usize, dim: usize) -> RunMeta {
        RunMeta {
            format_version: FORMAT_VERSION,
            run_id: "fixture".into(),
            seed: 0,
            num_steps: steps,
            mask_ratio: 0.4,
            hidden_dim: dim,
            source_model: "hand".into(),
            split: Split::Eval,
            fill_step_imputed: false,
        }
    }

    /// One record, one masked position, T = 2, d = 2.
    pub fn minimal() -> RunSet {
        RunSet {
            meta: meta(2, 2),
            records: vec![TrajRecord {
                record_id: 0,
                tokens: vec![4, 9, 4],
                masked_idx: vec![1],
                fill_step: vec![1],
                preds: vec![vec![3], vec![9]],
                conf: vec![vec![0.25], vec![0.75]],
                entropy: vec![vec![1.5], vec![0.5]],
                hidden: vec![0.5, -0.25, 1.0, 0.125],
            }],
        }
    }
}
