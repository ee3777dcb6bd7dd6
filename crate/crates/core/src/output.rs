//! CSV tables and SVG line plots. Every file carries the job's config hash
//! in a leading comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stats::StepSeries;

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Shortest decimal that round-trips; `NaN` for missing values.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".into(), fmt_f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self, hash: &str) -> Result<Vec<u8>> {
        let mut out = format!("# config_hash={hash}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.columns)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush().map_err(|e| Error::io("<csv>", e))?;
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>, hash: &str) -> Result<()> {
        write_bytes(path, &self.to_csv(hash)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Format(format!("{}: {other:?}", path.display())),
            })?;
        let columns = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    }

    /// Values of `name` as floats; unparseable cells become NaN.
    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `step, value, ci_lo, ci_hi`; band columns are NaN without a band.
pub fn series_table(series: &StepSeries) -> Table {
    let mut t = Table::new(&["step", "value", "ci_lo", "ci_hi"]);
    for (step, &v) in series.values.iter().enumerate() {
        let (lo, hi) = series
            .band
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |b| b[step]);
        t.push(vec![step.to_string(), fmt_f64(v), fmt_f64(lo), fmt_f64(hi)]);
    }
    t
}

pub struct PlotSeries<'a> {
    pub name: &'a str,
    pub series: &'a StepSeries,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart over steps with optional translucent bands.
pub fn line_plot(title: &str, y_label: &str, series: &[PlotSeries<'_>], hash: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let finite = |v: f64| v.is_finite().then_some(v);
    let all = series.iter().flat_map(|s| {
        let band = s.series.band.iter().flatten().flat_map(|&(lo, hi)| [lo, hi]);
        s.series.values.iter().copied().chain(band)
    });
    let (mut lo, mut hi) = all
        .filter_map(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let steps = series.iter().map(|s| s.series.len()).max().unwrap_or(1).max(2);
    let x = |t: usize| left + pw * t as f64 / (steps - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">");
    let _ = writeln!(s, "<!-- config_hash={hash} -->");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"22\" font-size=\"14\">{}</text>", left, escape(title));
    let _ = writeln!(
        s,
        "<path d=\"M{left} {top} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        top + ph,
        left + pw
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            left - 6.0,
            y(v) + 4.0,
            v
        );
    }
    let tick = (steps / 8).max(1);
    for t in (0..steps).step_by(tick) {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{t}</text>",
            x(t),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>",
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "<text transform=\"translate(14 {}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        top + ph / 2.0,
        escape(y_label)
    );

    for (k, ps) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if let Some(band) = &ps.series.band {
            let upper = band.iter().enumerate().filter(|(_, b)| b.1.is_finite());
            let lower = band.iter().enumerate().rev().filter(|(_, b)| b.0.is_finite());
            let pts: Vec<String> = upper
                .map(|(t, b)| format!("{:.1},{:.1}", x(t), y(b.1)))
                .chain(lower.map(|(t, b)| format!("{:.1},{:.1}", x(t), y(b.0))))
                .collect();
            if !pts.is_empty() {
                let _ = writeln!(
                    s,
                    "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
                    pts.join(" ")
                );
            }
        }
        let pts: Vec<String> = ps
            .series
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(t, &v)| format!("{:.1},{:.1}", x(t), y(v)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            pts.join(" ")
        );
        let ly = top + 14.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            left + pw + 10.0,
            left + pw + 28.0
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", left + pw + 32.0, ly + 4.0, escape(ps.name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
