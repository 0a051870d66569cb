//! CSV, SVG and PGM writers for analysis products.
//!
//! The SVG output is deliberately plain: rect grids for matrices and
//! polylines for curves, with no external plotting dependency.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::Result;

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Diverging blue/white/red color for `v` in `[-1, 1]`.
fn diverging(v: f64) -> String {
    let t = v.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap with a symmetric color scale around zero.
pub fn heatmap_svg(m: &DMatrix<f64>, title: &str) -> String {
    let cell = (480.0 / m.nrows().max(m.ncols()).max(1) as f64).clamp(2.0, 40.0);
    let (top, left) = (30.0, 10.0);
    let width = left * 2.0 + cell * m.ncols() as f64;
    let height = top + 10.0 + cell * m.nrows() as f64;
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="20" font-family="sans-serif" font-size="13">{} (max |v| = {scale:.3e})</text>"#,
        escape(title)
    );
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = if scale > 0.0 { m[(r, c)] / scale } else { 0.0 };
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"/>"#,
                left + c as f64 * cell,
                top + r as f64 * cell,
                diverging(v)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of one or more series with min/max axis labels.
pub fn line_chart_svg(series: &[Series<'_>], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 150.0, 30.0, 40.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{ml}" y="20" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{ml},{mt} {ml},{} {},{}" fill="none" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb
    );
    for (text, x, y, anchor) in [
        (format!("{x0:.3}"), ml, h - mb + 15.0, "start"),
        (format!("{x1:.3}"), w - mr, h - mb + 15.0, "end"),
        (format!("{y0:.3}"), ml - 4.0, h - mb, "end"),
        (format!("{y1:.3}"), ml - 4.0, mt + 10.0, "end"),
        (x_label.to_string(), (ml + w - mr) / 2.0, h - 8.0, "middle"),
    ] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
            escape(&text)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = mt + 15.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            w - mr + 10.0,
            ly + 10.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Binary 8-bit PGM, linearly mapping `[min, max]` to `[0, 255]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let (lo, hi) = data
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
