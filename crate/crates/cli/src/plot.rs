//! Self-rendered vector plots. The companion CSV is the authoritative
//! artifact: the SVG is a pure function of the plotted data, so re-plotting a
//! companion file reproduces the image byte for byte.

use anyhow::{bail, Context, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    TotalReward,
    AccuracyReward,
    SpeedReward,
    CollapseRatio,
    Frontier,
}

impl PlotKind {
    pub fn parse(name: &str) -> Option<PlotKind> {
        match name {
            "total-reward" => Some(PlotKind::TotalReward),
            "accuracy-reward" => Some(PlotKind::AccuracyReward),
            "speed-reward" => Some(PlotKind::SpeedReward),
            "collapse-ratio" => Some(PlotKind::CollapseRatio),
            "frontier" => Some(PlotKind::Frontier),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlotKind::TotalReward => "total-reward",
            PlotKind::AccuracyReward => "accuracy-reward",
            PlotKind::SpeedReward => "speed-reward",
            PlotKind::CollapseRatio => "collapse-ratio",
            PlotKind::Frontier => "frontier",
        }
    }

    fn labels(&self) -> (&'static str, &'static str) {
        match self {
            PlotKind::TotalReward => ("iteration", "mean total reward"),
            PlotKind::AccuracyReward => ("iteration", "mean accuracy reward"),
            PlotKind::SpeedReward => ("iteration", "mean speed reward (TPF)"),
            PlotKind::CollapseRatio => ("iteration", "collapse ratio"),
            PlotKind::Frontier => ("mean TPF", "accuracy (%)"),
        }
    }

    /// Metrics-CSV column holding this kind's y value.
    fn metrics_column(&self) -> Option<&'static str> {
        match self {
            PlotKind::TotalReward => Some("total_reward"),
            PlotKind::AccuracyReward => Some("mean_accuracy_reward"),
            PlotKind::SpeedReward => Some("mean_speed_reward"),
            PlotKind::CollapseRatio => Some("collapse_ratio"),
            PlotKind::Frontier => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

fn parse_csv(raw: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = raw.lines();
    let header = lines.next().context("empty CSV")?;
    let headers: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((headers, rows))
}

fn series_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("series");
    match path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
    {
        Some(parent) => format!("{parent}/{stem}"),
        None => stem.to_string(),
    }
}

/// Extract one series from an input file. Metrics logs yield
/// (iteration, column) pairs; frontier tables yield (mean TPF, accuracy).
fn extract_series(path: &Path, kind: PlotKind) -> Result<(String, Vec<(f64, f64)>)> {
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (headers, rows) = parse_csv(&raw)?;
    let first = headers.first().map(String::as_str);
    let points = match (first, kind.metrics_column()) {
        (Some("iteration"), Some(column)) => {
            let x_idx = 0;
            let y_idx = headers
                .iter()
                .position(|h| h == column)
                .with_context(|| format!("{} lacks column {column}", path.display()))?;
            rows.iter()
                .map(|r| {
                    Ok((
                        r[x_idx].parse::<f64>().context("bad x value")?,
                        r[y_idx].parse::<f64>().context("bad y value")?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        }
        (Some("threshold"), None) => {
            let x_idx = headers
                .iter()
                .position(|h| h == "mean_tpf")
                .with_context(|| format!("{} lacks column mean_tpf", path.display()))?;
            let y_idx = headers
                .iter()
                .position(|h| h == "accuracy_pct")
                .with_context(|| format!("{} lacks column accuracy_pct", path.display()))?;
            rows.iter()
                .map(|r| {
                    Ok((
                        r[x_idx].parse::<f64>().context("bad x value")?,
                        r[y_idx].parse::<f64>().context("bad y value")?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => bail!(
            "{} is not a metrics or frontier CSV usable for kind {}",
            path.display(),
            kind.name()
        ),
    };
    Ok((series_name(path), points))
}

/// Detect a companion CSV (long form `series,x,y`).
fn is_companion(raw: &str) -> bool {
    raw.lines().next().map(str::trim) == Some("series,x,y")
}

fn read_companion(raw: &str) -> Result<PlotData> {
    let (_, rows) = parse_csv(raw)?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in rows {
        anyhow::ensure!(row.len() == 3, "companion rows must be series,x,y");
        let x: f64 = row[1].parse().context("bad x value")?;
        let y: f64 = row[2].parse().context("bad y value")?;
        match series.last_mut() {
            Some((name, points)) if *name == row[0] => points.push((x, y)),
            _ => series.push((row[0].clone(), vec![(x, y)])),
        }
    }
    Ok(PlotData { series })
}

/// Assemble plot data from input files: either one companion CSV or any
/// number of metrics/frontier CSVs.
pub fn load_plot_data(files: &[std::path::PathBuf], kind: PlotKind) -> Result<PlotData> {
    anyhow::ensure!(!files.is_empty(), "no input files given");
    if files.len() == 1 {
        let raw = std::fs::read_to_string(&files[0])
            .with_context(|| format!("reading {}", files[0].display()))?;
        if is_companion(&raw) {
            return read_companion(&raw);
        }
    }
    let mut series = Vec::new();
    for f in files {
        series.push(extract_series(f, kind)?);
    }
    Ok(PlotData { series })
}

pub fn companion_csv(data: &PlotData) -> String {
    let mut out = String::from("series,x,y\n");
    for (name, points) in &data.series {
        for (x, y) in points {
            let _ = writeln!(out, "{name},{x},{y}");
        }
    }
    out
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Render the data as an SVG polyline chart. Pure function of the data and
/// kind: identical inputs produce identical bytes.
pub fn render_svg(data: &PlotData, kind: PlotKind) -> String {
    let (x_label, y_label) = kind.labels();
    let width = 720.0;
    let height = 480.0;
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let all_points: Vec<(f64, f64)> = data.series.iter().flat_map(|s| s.1.clone()).collect();
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in &all_points {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if all_points.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    } else {
        let pad = 0.05 * (y_max - y_min);
        y_min -= pad;
        y_max += pad;
    }
    let sx = move |x: f64| left + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = move |y: f64| top + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"22\" font-family=\"monospace\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        left + plot_w / 2.0,
        kind.name()
    );

    // Axes and ticks.
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.2}\" stroke=\"black\"/>",
        top + plot_h
    );
    for i in 0..5 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let px = sx(fx);
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            top + plot_h,
            top + plot_h + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{px:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            top + plot_h + 18.0,
            format_tick(fx)
        );
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = sy(fy);
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{left}\" y2=\"{py:.2}\" stroke=\"black\"/>",
            left - 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            left - 8.0,
            py + 4.0,
            format_tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        left + plot_w / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{y_label}</text>",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    // Series polylines and legend.
    for (i, (name, points)) in data.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !points.is_empty() {
            let path: Vec<String> = points
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.join(" ")
            );
        }
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            left + plot_w - 120.0,
            left + plot_w - 100.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{name}</text>",
            left + plot_w - 95.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
