//! Sweep tables and FSD heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsd::FsdMatrix;
use crate::fsutil;

pub const SWEEP_HEADER: [&str; 6] = ["target", "k", "member_set", "clean_acc", "fgsm_acc", "fsd_mean"];

/// One evaluated mixture. Accuracies are absent when no benchmark bundle
/// backs the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target: String,
    pub k: usize,
    pub members: Vec<String>,
    pub clean_acc: Option<f64>,
    pub fgsm_acc: Option<f64>,
    /// Mean FSD over unordered member pairs (zero for a single member).
    pub fsd_mean: f64,
}

impl SweepRow {
    pub fn member_set(&self) -> String {
        self.members.join(";")
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Parse {
        what: "sweep CSV".into(),
        reason: e.to_string(),
    }
}

fn fixed(v: Option<f64>, decimals: usize) -> String {
    v.map(|v| format!("{v:.decimals$}")).unwrap_or_default()
}

/// CSV bytes with rows sorted by `(target, k, member_set)`.
pub fn report_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut sorted: Vec<(&SweepRow, String)> = rows.iter().map(|r| (r, r.member_set())).collect();
    sorted.sort_by(|(a, ma), (b, mb)| (&a.target, a.k, ma).cmp(&(&b.target, b.k, mb)));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for (r, members) in sorted {
        w.write_record([
            r.target.clone(),
            r.k.to_string(),
            members,
            fixed(r.clean_acc, 6),
            fixed(r.fgsm_acc, 6),
            fixed(Some(r.fsd_mean), 9),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

pub fn emit_report_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &report_csv(rows)?)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != SWEEP_HEADER {
        return Err(csv_err(format!("unexpected header {header:?}")));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(csv_err)
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(SweepRow {
                target: rec[0].to_string(),
                k: rec[1].parse().map_err(csv_err)?,
                members: rec[2].split(';').map(String::from).collect(),
                clean_acc: opt(&rec[3])?,
                fgsm_acc: opt(&rec[4])?,
                fsd_mean: rec[5].parse().map_err(csv_err)?,
            })
        })
        .collect()
}

/// Population statistics of one accuracy column for a `(target, k)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub target: String,
    pub k: usize,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-(target, k) statistics of the clean accuracy; rows without an
/// accuracy are skipped.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(a) = r.clean_acc {
            groups.entry((r.target.clone(), r.k)).or_default().push(a);
        }
    }
    groups
        .into_iter()
        .map(|((target, k), vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            GroupSummary {
                target,
                k,
                count: vals.len(),
                mean,
                variance: vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub fn summary_csv(groups: &[GroupSummary]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(["target", "k", "count", "mean", "variance", "min", "max"])
        .map_err(csv_err)?;
    for g in groups {
        w.write_record([
            g.target.clone(),
            g.k.to_string(),
            g.count.to_string(),
            format!("{:.6}", g.mean),
            format!("{:.6}", g.variance),
            format!("{:.6}", g.min),
            format!("{:.6}", g.max),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

const CELL: usize = 56;
const MARGIN: usize = 110;
const LIGHT: (f64, f64, f64) = (247.0, 251.0, 255.0);
const DARK: (f64, f64, f64) = (8.0, 48.0, 107.0);

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn cell_color(t: f64) -> String {
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(LIGHT.0, DARK.0),
        lerp(LIGHT.1, DARK.1),
        lerp(LIGHT.2, DARK.2)
    )
}

/// Cell label: the fraction as a percentage with one decimal.
pub fn percent_label(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Standalone SVG heatmap. Colors scale linearly from light at 0 to dark at
/// the largest entry.
pub fn heatmap_svg(matrix: &FsdMatrix) -> String {
    let k = matrix.k();
    let size = MARGIN + k * CELL;
    let max = matrix.max_value();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="12">"#
    );
    for (i, label) in matrix.labels().iter().enumerate() {
        let centre = MARGIN + i * CELL + CELL / 2;
        let label = escape(label);
        let _ = writeln!(
            svg,
            r#"<text class="col-label" x="{centre}" y="{}" text-anchor="middle">{label}</text>"#,
            MARGIN - 8
        );
        let _ = writeln!(
            svg,
            r#"<text class="row-label" x="{}" y="{centre}" text-anchor="end" dominant-baseline="middle">{label}</text>"#,
            MARGIN - 8
        );
    }
    for i in 0..k {
        for j in 0..k {
            let v = matrix.get(i, j);
            let t = if max > 0.0 { v / max } else { 0.0 };
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let fill = cell_color(t);
            let ink = if t > 0.5 { "#ffffff" } else { "#000000" };
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text class="cell" x="{}" y="{}" text-anchor="middle" dominant-baseline="middle" fill="{ink}">{}</text>"#,
                x + CELL / 2,
                y + CELL / 2,
                percent_label(v)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn emit_heatmap_svg(matrix: &FsdMatrix, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, heatmap_svg(matrix).as_bytes())
}
