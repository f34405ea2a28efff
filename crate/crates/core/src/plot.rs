//! Projection artifacts: a `x,y,label` CSV and a self-contained SVG scatter
//! plot with one fill color per class and a legend. Output is deterministic
//! text, so reruns diff clean.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WIDTH: usize = 860;
const HEIGHT: usize = 640;
const MARGIN: usize = 40;
const LEGEND_W: usize = 140;

// tab10-style palette; classes beyond ten cycle through generated hues
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn class_color(c: usize) -> String {
    if c < PALETTE.len() {
        PALETTE[c].to_string()
    } else {
        // golden-angle hue walk for arbitrary class counts
        let h = (c as f64 * 137.508) % 360.0;
        let (r, g, b) = hsl_to_rgb(h, 0.65, 0.5);
        format!("#{r:02x}{g:02x}{b:02x}")
    }
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = l - c / 2.0;
    let (r, g, b) = match h as u32 {
        0..=59 => (c, x, 0.0),
        60..=119 => (x, c, 0.0),
        120..=179 => (0.0, c, x),
        180..=239 => (0.0, x, c),
        240..=299 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    )
}

fn check_points(points: &Tensor<f64>, labels: &[usize]) -> Result<usize> {
    if points.rank() != 2 || points.dim(1) != 2 {
        return Err(Error::shape(
            "emit_projection",
            format!("points must be [N,2], got {:?}", points.shape()),
        ));
    }
    if points.dim(0) != labels.len() {
        return Err(Error::shape(
            "emit_projection",
            format!("{} points vs {} labels", points.dim(0), labels.len()),
        ));
    }
    Ok(points.dim(0))
}

/// RFC-4180-style quoting; class ids never need it, but labels stay safe if a
/// caller ever writes text labels through the same path.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_projection_csv(
    points: &Tensor<f64>,
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let n = check_points(points, labels)?;
    let mut out = String::from("x,y,label\n");
    for i in 0..n {
        let x = points.data()[2 * i];
        let y = points.data()[2 * i + 1];
        let _ = writeln!(out, "{},{},{}", x, y, csv_field(&labels[i].to_string()));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_projection_svg(
    points: &Tensor<f64>,
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let n = check_points(points, labels)?;
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        min_x = min_x.min(points.data()[2 * i]);
        max_x = max_x.max(points.data()[2 * i]);
        min_y = min_y.min(points.data()[2 * i + 1]);
        max_y = max_y.max(points.data()[2 * i + 1]);
    }
    if n == 0 {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let plot_w = (WIDTH - LEGEND_W - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let sx = |x: f64| MARGIN as f64 + (x - min_x) / span_x * plot_w;
    let sy = |y: f64| MARGIN as f64 + (max_y - y) / span_y * plot_h;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#cccccc"/>"##,
        plot_w as usize, plot_h as usize
    );
    for i in 0..n {
        let x = sx(points.data()[2 * i]);
        let y = sy(points.data()[2 * i + 1]);
        let _ = writeln!(
            svg,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}" fill-opacity="0.65"/>"#,
            class_color(labels[i])
        );
    }
    let lx = WIDTH - LEGEND_W + 10;
    let _ = writeln!(
        svg,
        r##"<text x="{lx}" y="{MARGIN}" font-family="sans-serif" font-size="13" fill="#333333">classes</text>"##
    );
    for (row, &c) in classes.iter().enumerate() {
        let y = MARGIN + 18 + row * 20;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{}"/>"#,
            y,
            class_color(c)
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="#333333">class {}</text>"##,
            lx + 18,
            y + 10,
            c
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub fn emit_projection(
    points: &Tensor<f64>,
    labels: &[usize],
    csv_path: impl AsRef<Path>,
    svg_path: impl AsRef<Path>,
) -> Result<()> {
    write_projection_csv(points, labels, csv_path)?;
    write_projection_svg(points, labels, svg_path)
}
