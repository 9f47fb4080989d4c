// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV, JSON and SVG output for experiment reports. All output is a pure
//! function of the report, so identical reports give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::presets::{ExperimentReport, Heatmap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            _ => Err(Error::invalid(format!("unknown format {s:?}"))),
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn report_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format {
        what: "csv",
        detail: e.to_string(),
    };
    w.write_record([
        "branch",
        "depth",
        "n_tasks",
        "accuracy",
        "mean_nll",
        "mean_attention",
    ])
    .map_err(csv_err)?;
    for b in &report.branches {
        for r in &b.rows {
            w.write_record([
                b.branch.clone(),
                r.depth.to_string(),
                r.n_tasks.to_string(),
                r.accuracy.to_string(),
                r.mean_nll.to_string(),
                r.mean_attention.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format {
        what: "csv",
        detail: e.to_string(),
    })
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Gold attention against depth, one line per branch.
pub fn attention_chart_svg(report: &ExperimentReport) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let ymax = report
        .branches
        .iter()
        .flat_map(|b| b.rows.iter().map(|r| r.mean_attention))
        .fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.1 } else { 1.0 };
    let x = |d: f64| left + d * pw;
    let y = |v: f64| top + ph - v / ymax * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}: attention to gold vs depth</text>"#,
        left + pw / 2.0,
        esc(&report.preset)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left:.2} {top:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for k in 0..=4 {
        let d = k as f64 / 4.0;
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.0}%</text>"#,
            x(d),
            top + ph + 18.0,
            d * 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.4}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, b) in report.branches.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = b
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.depth), y(r.mean_attention)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            left + pw + 12.0,
            ly + 10.0,
            esc(&b.branch)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Layer by position grid of last-row attention.
pub fn heatmap_svg(hm: &Heatmap) -> String {
    let n = hm.values.first().map_or(0, Vec::len).max(1);
    let rows = hm.values.len().max(1);
    let cell_h = 24.0;
    let plot_w = 800.0;
    let cell_w = plot_w / n as f64;
    let (left, top) = (60.0, 40.0);
    let w = left + plot_w + 20.0;
    let h = top + cell_h * rows as f64 + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="24" font-family="sans-serif" font-size="14">{}: last-row attention by layer (depth {})</text>"#,
        esc(&hm.branch),
        hm.depth
    );
    for (r, (layer, vals)) in hm.layers.iter().zip(&hm.values).enumerate() {
        let max = vals.iter().copied().fold(0.0f64, f64::max);
        let yy = top + cell_h * r as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">L{layer}</text>"#,
            left - 6.0,
            yy + cell_h / 2.0 + 4.0
        );
        for (j, &v) in vals.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            if t < 0.005 {
                continue;
            }
            let shade = (255.0 * (1.0 - t)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{yy:.2}" width="{:.3}" height="{cell_h}" fill="rgb({shade},{shade},255)"/>"#,
                left + cell_w * j as f64,
                cell_w
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">position (0..{})</text>"#,
        left + plot_w / 2.0,
        h - 12.0,
        n - 1
    );
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the requested formats into `dir` as `<preset>.csv`,
/// `<preset>.json`, `<preset>_attention.svg` and `<preset>_heatmap.svg`.
pub fn emit_report(
    report: &ExperimentReport,
    dir: &Path,
    formats: &[Format],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = &report.preset;
    let mut out = Vec::new();
    for f in formats {
        match f {
            Format::Csv => out.push(write(
                dir.join(format!("{stem}.csv")),
                &report_csv(report)?,
            )?),
            Format::Json => {
                let mut text = serde_json::to_string_pretty(report)?;
                text.push('\n');
                out.push(write(dir.join(format!("{stem}.json")), text.as_bytes())?);
            }
            Format::Svg => {
                out.push(write(
                    dir.join(format!("{stem}_attention.svg")),
                    attention_chart_svg(report).as_bytes(),
                )?);
                if let Some(hm) = &report.heatmap {
                    out.push(write(
                        dir.join(format!("{stem}_heatmap.svg")),
                        heatmap_svg(hm).as_bytes(),
                    )?);
                }
            }
        }
    }
    Ok(out)
}
