//! Results persistence: CSV emission with full-precision floats, a strict
//! CSV reader for round-trip checks, run manifests, and small dependency-free
//! SVG renderings.
//!
//! `records.csv` is deterministic for a given config; wall-clock timings go
//! to a separate `timings.csv` so the record stream can be compared byte for
//! byte across runs.

use crate::diagnostics::NuBins;
use crate::trainer::TrainRecord;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Serialize with 17 significant digits, enough to round-trip any f64.
pub fn format_full(x: f64) -> String {
    format!("{x:.16e}")
}

pub const RECORDS_HEADER: &str = "epoch,residual_hat_lambda,residual_hat_mu,residual_tilde_lambda,residual_tilde_mu,boundary,total,rel_l2,cosine";

/// Render the per-epoch records as CSV text.
pub fn records_csv(records: &[TrainRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let b = &r.breakdown;
        let opt = |v: Option<f64>| v.map(format_full).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            format_full(b.residual_hat_lambda),
            format_full(b.residual_hat_mu),
            format_full(b.residual_tilde_lambda),
            format_full(b.residual_tilde_mu),
            format_full(b.boundary),
            format_full(b.total),
            opt(r.rel_l2),
            opt(r.cosine),
        ));
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[TrainRecord]) -> Result<(), ReportError> {
    Ok(std::fs::write(path, records_csv(records))?)
}

/// Wall-clock timings, kept out of the deterministic record stream.
pub fn write_timings_csv(path: &Path, records: &[TrainRecord]) -> Result<(), ReportError> {
    let mut out = String::from("epoch,wall_ms\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.epoch, r.wall_ms));
    }
    Ok(std::fs::write(path, out)?)
}

/// A parsed `records.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRecord {
    pub epoch: u64,
    pub breakdown: [f64; 6],
    pub rel_l2: Option<f64>,
    pub cosine: Option<f64>,
}

/// Strict reader for `records.csv`: exact header, exact field count, every
/// number must parse.
pub fn parse_records_csv(text: &str) -> Result<Vec<ParsedRecord>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == RECORDS_HEADER => {}
        Some((_, other)) => {
            return Err(ReportError::Csv {
                line: 1,
                reason: format!("unexpected header {other:?}"),
            })
        }
        None => {
            return Err(ReportError::Csv {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(ReportError::Csv {
                line: idx + 1,
                reason: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, line: usize| -> Result<f64, ReportError> {
            s.parse::<f64>().map_err(|e| ReportError::Csv {
                line,
                reason: format!("bad float {s:?}: {e}"),
            })
        };
        let parse_opt = |s: &str, line: usize| -> Result<Option<f64>, ReportError> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f(s, line).map(Some)
            }
        };
        let epoch = fields[0].parse::<u64>().map_err(|e| ReportError::Csv {
            line: idx + 1,
            reason: format!("bad epoch {:?}: {e}", fields[0]),
        })?;
        let mut breakdown = [0.0; 6];
        for (i, slot) in breakdown.iter_mut().enumerate() {
            *slot = parse_f(fields[1 + i], idx + 1)?;
        }
        out.push(ParsedRecord {
            epoch,
            breakdown,
            rel_l2: parse_opt(fields[7], idx + 1)?,
            cosine: parse_opt(fields[8], idx + 1)?,
        });
    }
    Ok(out)
}

/// `surface.csv`: one `(E, nu, rel_l2)` triple per row.
pub fn write_surface_csv(path: &Path, rows: &[(f64, f64, f64)]) -> Result<(), ReportError> {
    let mut out = String::from("e,nu,rel_l2\n");
    for (e, nu, r) in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            format_full(*e),
            format_full(*nu),
            format_full(*r)
        ));
    }
    Ok(std::fs::write(path, out)?)
}

/// `histogram.csv`: per-bin mean errors for the standard and decomposed
/// parametric models.
pub fn write_histogram_csv(
    path: &Path,
    bins: &NuBins,
    mean_standard: &[f64],
    mean_decomposed: &[f64],
) -> Result<(), ReportError> {
    let mut out = String::from("bin_low,bin_high,mean_standard,mean_decomposed\n");
    for (i, (lo, hi)) in bins.bins.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            format_full(*lo),
            format_full(*hi),
            format_full(mean_standard[i]),
            format_full(mean_decomposed[i])
        ));
    }
    Ok(std::fs::write(path, out)?)
}

/// Top-level run manifest written next to the result files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    pub problem: String,
    pub stopped_at: u64,
}

pub fn write_run_manifest(path: &Path, manifest: &RunManifest) -> Result<(), ReportError> {
    let text = toml::to_string(manifest).expect("manifest serializes");
    Ok(std::fs::write(path, text)?)
}

// ---------------------------------------------------------------------------
// SVG rendering (convenience output; CSV is the contract)
// ---------------------------------------------------------------------------

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Line chart with an optional log10 y-axis. Each series is a named list of
/// `(x, y)` points.
pub fn svg_line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let ys = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .filter(|y| !log_y || *y > 0.0);
    let xs = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0));
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in ys {
        let y = if log_y { y.log10() } else { y };
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    let (mut xlo, mut xhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
    }
    if !ylo.is_finite() || ylo == yhi {
        yhi = ylo + 1.0;
    }
    if !xlo.is_finite() || xlo == xhi {
        xhi = xlo + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - xlo) / (xhi - xlo) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| {
        let y = if log_y { y.log10() } else { y };
        SVG_H - MARGIN - (y - ylo) / (yhi - ylo) * (SVG_H - 2.0 * MARGIN)
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        SVG_W / 2.0,
        xml_escape(title)
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| !log_y || p.1 > 0.0)
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            SVG_W - MARGIN - 150.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            xml_escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of `values[i][j]` over `e_values` (rows) and `nu_values`
/// (columns), colored by log10.
pub fn svg_heatmap(
    title: &str,
    e_values: &[f64],
    nu_values: &[f64],
    values: &[Vec<f64>],
) -> String {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in values {
        for &v in row {
            if v > 0.0 {
                lo = lo.min(v.log10());
                hi = hi.max(v.log10());
            }
        }
    }
    if !lo.is_finite() || lo == hi {
        hi = lo + 1.0;
    }
    let cell_w = (SVG_W - 2.0 * MARGIN) / nu_values.len() as f64;
    let cell_h = (SVG_H - 2.0 * MARGIN) / e_values.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        SVG_W / 2.0,
        xml_escape(title)
    );
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if v > 0.0 {
                ((v.log10() - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let red = (255.0 * t) as u8;
            let blue = (255.0 * (1.0 - t)) as u8;
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({red},60,{blue})\"/>\n",
                MARGIN + j as f64 * cell_w,
                MARGIN + i as f64 * cell_h,
                cell_w,
                cell_h
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write a string to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
