//! Learning-curve SVGs from a metrics file.
//!
//! One image per metric column. The offline phase is drawn as a gray band
//! that ends at the last offline evaluation step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::train::{csv_err, Phase};
use crate::error::{Error, Result};

pub(crate) struct TableRow {
    pub line: usize,
    pub step: usize,
    pub phase: Phase,
    /// Parsed value per header column; `None` for empty cells and for the
    /// `step` and `phase` columns.
    pub values: Vec<Option<f64>>,
}

pub(crate) struct Table {
    pub header: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub(crate) fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let step_col = header.iter().position(|h| h == "step");
    let phase_col = header.iter().position(|h| h == "phase");
    let (Some(step_col), Some(phase_col)) = (step_col, phase_col) else {
        return Err(Error::parse(path, 1, "header needs `step` and `phase` columns"));
    };
    let mut rows: Vec<TableRow> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::parse(path, line, msg);
        let step: usize = rec[step_col].parse().map_err(|_| bad(format!("bad step `{}`", &rec[step_col])))?;
        if rows.last().is_some_and(|r| r.step > step) {
            return Err(bad(format!("step {step} goes backwards")));
        }
        let phase = match &rec[phase_col] {
            "offline" => Phase::Offline,
            "online" => Phase::Online,
            other => return Err(bad(format!("bad phase `{other}`"))),
        };
        let mut values = Vec::with_capacity(header.len());
        for (i, cell) in rec.iter().enumerate() {
            if i == step_col || i == phase_col || cell.is_empty() {
                values.push(None);
            } else {
                values.push(Some(
                    cell.parse::<f64>()
                        .map_err(|_| bad(format!("bad value `{cell}` in `{}`", header[i])))?,
                ));
            }
        }
        rows.push(TableRow { line, step, phase, values });
    }
    Ok(Table { header, rows })
}

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Horizontal pixel of `step` on an axis spanning `[0, max_step]`.
pub fn x_pixel(step: f64, max_step: f64) -> f64 {
    LEFT + step / max_step * (WIDTH - LEFT - RIGHT)
}

fn y_pixel(v: f64, lo: f64, hi: f64) -> f64 {
    HEIGHT - BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn render(metric: &str, points: &[(f64, f64)], max_step: f64, offline_end: Option<f64>) -> String {
    let (mut lo, mut hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1), h.max(p.1)));
    if points.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if hi - lo < 1e-12 {
        (lo, hi) = (lo - 1.0, hi + 1.0);
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if let Some(k) = offline_end {
        let x0 = x_pixel(0.0, max_step);
        let x1 = x_pixel(k, max_step);
        let _ = writeln!(
            s,
            r##"<rect id="offline" x="{x0}" y="{TOP}" width="{}" height="{}" fill="#d9d9d9"/>"##,
            x1 - x0,
            HEIGHT - TOP - BOTTOM
        );
    }
    let (x_end, y_end) = (WIDTH - RIGHT, HEIGHT - BOTTOM);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} L{LEFT} {y_end} L{x_end} {y_end}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let step = f * max_step;
        let x = x_pixel(step, max_step);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{y_end}" x2="{x}" y2="{}" stroke="black"/>"#, y_end + 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            y_end + 16.0,
            step.round()
        );
        let v = lo + f * (hi - lo);
        let y = y_pixel(v, lo, hi);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        (LEFT + x_end) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}">{metric}</text>"#, TOP - 10.0);
    if !points.is_empty() {
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, v)| format!("{},{}", x_pixel(x, max_step), y_pixel(v, lo, hi)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
            coords.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `<stem>_<metric>.svg` into `out_dir` for every metric column of
/// `metrics_file` and return the paths in column order.
pub fn emit_plots(metrics_file: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let table = read_table(metrics_file)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = metrics_file.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let max_step = table.rows.iter().map(|r| r.step).max().filter(|&m| m > 0).unwrap_or(1) as f64;
    let offline_end = table
        .rows
        .iter()
        .filter(|r| r.phase == Phase::Offline)
        .map(|r| r.step as f64)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    let mut written = Vec::new();
    for (col, name) in table.header.iter().enumerate() {
        if name == "step" || name == "phase" {
            continue;
        }
        let points: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| r.values[col].filter(|v| v.is_finite()).map(|v| (r.step as f64, v)))
            .collect();
        let path = out_dir.join(format!("{stem}_{name}.svg"));
        fs::write(&path, render(name, &points, max_step, offline_end)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
