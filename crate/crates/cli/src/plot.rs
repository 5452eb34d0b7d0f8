//! SVG line plots of metrics tables, each with a sidecar CSV of the plotted
//! series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;

use crate::metrics::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Diversity statistics against iteration.
    Scaling,
    /// Low/mid/high band energy of each step against iteration.
    Bands,
    /// Radial power against frequency (an analysis `spectrum.csv`).
    Spectrum,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Scaling => "scaling",
            PlotKind::Bands => "bands",
            PlotKind::Spectrum => "spectrum",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn series_from(table: &Table, x: usize, ys: &[usize]) -> Vec<Series> {
    let xs = table.column(x);
    ys.iter()
        .map(|&y| Series {
            name: table.header[y].clone(),
            points: xs.iter().copied().zip(table.column(y)).filter(|(_, v)| !v.is_nan()).collect(),
        })
        .collect()
}

/// The series a plot of `kind` draws from `table`.
pub fn series_for(kind: PlotKind, table: &Table) -> Result<Vec<Series>> {
    match kind {
        PlotKind::Scaling => {
            let idx = table.require(&["iteration", "v_b"])?;
            let mut ys = vec![idx[1]];
            ys.extend((0..table.header.len()).filter(|&i| table.header[i].starts_with("div_")));
            Ok(series_from(table, idx[0], &ys))
        }
        PlotKind::Bands => {
            let idx = table.require(&["iteration", "band_low", "band_mid", "band_high"])?;
            Ok(series_from(table, idx[0], &idx[1..]))
        }
        PlotKind::Spectrum => {
            let idx = table.require(&["frequency"])?;
            let ys: Vec<usize> = (0..table.header.len()).filter(|&i| table.header[i].starts_with("power")).collect();
            if ys.is_empty() {
                bail!("table lacks column(s): power_*");
            }
            Ok(series_from(table, idx[0], &ys))
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn bounds(series: &[Series], pick: impl Fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.points.iter().map(&pick))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render_svg(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let (x0, x1) = bounds(series, |p| p.0);
    let (y0, y1) = bounds(series, |p| p.1);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{left}" y="24" font-family="sans-serif" font-size="15">{title}</text>"#);
    let (ax_r, ax_b) = (w - right, h - bottom);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} L{left} {ax_b} L{ax_r} {ax_b}" fill="none" stroke="black"/>"#
    );
    for (v, y) in [(y0, ax_b), (y1, top)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.4}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for (v, x) in [(x0, left), (x1, ax_r)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.4}</text>"#,
            ax_b + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_label}</text>"#,
        (left + ax_r) / 2.0,
        h - 12.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            s.name,
            pts.join(" ")
        );
        let ly = top + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            ax_r + 12.0,
            ax_r + 32.0,
            ax_r + 38.0,
            ly + 4.0,
            s.name
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Long-format sidecar: `series,x,y`, values printed round-trip exact.
pub fn write_sidecar(path: &Path, series: &[Series]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["series", "x", "y"])?;
    for s in series {
        for &(x, y) in &s.points {
            w.write_record([s.name.clone(), format!("{x}"), format!("{y}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out: Vec<Series> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let name = rec.get(0).context("series column")?.to_string();
        let x: f64 = rec.get(1).context("x column")?.parse()?;
        let y: f64 = rec.get(2).context("y column")?.parse()?;
        match out.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series { name, points: vec![(x, y)] }),
        }
    }
    Ok(out)
}

pub fn sidecar_path(svg: &Path) -> PathBuf {
    svg.with_extension("csv")
}

/// Default plot path next to the table: `<stem>_<kind>.svg`.
pub fn default_output(table: &Path, kind: PlotKind) -> PathBuf {
    let stem = table.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    table.with_file_name(format!("{stem}_{}.svg", kind.as_str()))
}

/// Plot `table` to `out` (SVG) and its sidecar; returns the series drawn.
pub fn plot(table_path: &Path, kind: PlotKind, out: &Path) -> Result<Vec<Series>> {
    let table = Table::read(table_path)?;
    let series = series_for(kind, &table).with_context(|| format!("cannot draw a {} plot", kind.as_str()))?;
    let x_label = if kind == PlotKind::Spectrum { "radial frequency" } else { "iteration" };
    let title = match kind {
        PlotKind::Scaling => "Output variation across iterations",
        PlotKind::Bands => "Noise change per frequency band",
        PlotKind::Spectrum => "Radial power spectrum",
    };
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, render_svg(title, x_label, &series)).with_context(|| format!("cannot write {}", out.display()))?;
    write_sidecar(&sidecar_path(out), &series)?;
    Ok(series)
}
