//! PSNR-versus-ratio SVG plots from result CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::results::{self, mean_std, Method};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AxesSpec {
    pub title: String,
    pub width: u32,
    pub height: u32,
    /// Only rows of this task are plotted when set.
    pub task: Option<String>,
}

impl Default for AxesSpec {
    fn default() -> Self {
        Self {
            title: "Average PSNR".into(),
            width: 640,
            height: 420,
            task: None,
        }
    }
}

/// One plotted curve: `(ratio, mean, std)` sorted by ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Curves keyed by (method, S, loss), in that order.
pub fn curves(rows: &[results::ResultRow], task: Option<&str>) -> Vec<Curve> {
    let mut groups: BTreeMap<(Method, usize, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| task.is_none_or(|t| r.task == t)) {
        groups
            .entry((r.method, r.shots, r.loss.clone()))
            .or_default()
            .entry(r.ratio.to_bits())
            .or_default()
            .push(r.psnr);
    }
    groups
        .into_iter()
        .map(|((method, shots, loss), by_ratio)| {
            let label = match method {
                Method::Untrained => "untrained".to_string(),
                Method::Lowshot => format!("lowshot S={shots} {loss}"),
            };
            let points = by_ratio
                .into_iter()
                .map(|(bits, v)| {
                    let (m, s) = mean_std(&v);
                    (f64::from_bits(bits), m, s)
                })
                .collect();
            Curve { label, points }
        })
        .collect()
}

/// Renders curves as a standalone SVG document.
pub fn render_svg(curves: &[Curve], axes: &AxesSpec) -> String {
    let (w, h) = (axes.width as f64, axes.height as f64);
    let (left, right, top, bottom) = (60.0, 180.0, 40.0, 50.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, s) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if x1 <= x0 {
        x0 -= 0.05;
        x1 += 0.05;
    }
    if y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        axes.width, axes.height, axes.width, axes.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(&axes.title));
    let _ = writeln!(
        svg,
        r#"<path d="M{:.2},{:.2} L{:.2},{:.2} L{:.2},{:.2}" fill="none" stroke="black"/>"#,
        left,
        top,
        left,
        h - bottom,
        w - right,
        h - bottom
    );
    for i in 0..=4 {
        let (xv, yv) = (x0 + (x1 - x0) * i as f64 / 4.0, y0 + (y1 - y0) * i as f64 / 4.0);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.3}</text>"#, sx(xv), h - bottom + 18.0, xv);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.1}</text>"#, left - 6.0, sy(yv) + 4.0, yv);
    }
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">compression ratio m/n</text>"#, (left + w - right) / 2.0, h - 10.0);
    let _ = writeln!(svg, r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">PSNR (dB)</text>"#, (top + h - bottom) / 2.0);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<g stroke="{color}" fill="{color}">"#);
        for &(x, m, s) in &c.points {
            let _ = writeln!(
                svg,
                r#"<line class="errorbar" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                sx(x),
                sy(m - s),
                sx(x),
                sy(m + s)
            );
        }
        let verts: Vec<String> = c.points.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke-width="2" points="{}"/>"#, verts.join(" "));
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" stroke="none">{}</text>"#,
            w - right + 12.0,
            ly + 4.0,
            escape(&c.label)
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads a result CSV and writes its plot. Nothing is written on error.
pub fn emit_plot(csv_path: impl AsRef<Path>, out_path: impl AsRef<Path>, axes: &AxesSpec) -> Result<Vec<Curve>> {
    let rows = results::read_rows(csv_path.as_ref())?;
    let cs = curves(&rows, axes.task.as_deref());
    if cs.is_empty() {
        return Err(Error::Parse(format!("{}: no result rows to plot", csv_path.as_ref().display())));
    }
    results::write_atomic(out_path, render_svg(&cs, axes).as_bytes())?;
    Ok(cs)
}
