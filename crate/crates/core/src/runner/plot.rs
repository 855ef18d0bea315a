//! Accuracy-versus-cost scatter as a standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, RunnerError};

/// One method's `(TFLOPs, MR@1)` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Axis range padded by 5% (or ±0.5 for a single value).
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Renders the figure to a string.
pub fn render_svg(title: &str, series: &[PlotSeries]) -> Result<String, RunnerError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(RunnerError::Config("nothing to plot".into()));
    }
    let (x0, x1) = range(all.iter().map(|p| p.0));
    let (y0, y1) = range(all.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{fx:.2}</text>"#, sx(fx), bottom + 16.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{fy:.3}</text>"#, left - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">TFLOPs</text>"#, WIDTH / 2.0, HEIGHT - 16.0);
    let _ = writeln!(svg, r#"<text x="16" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {})">MR@1</text>"#, HEIGHT / 2.0, HEIGHT / 2.0);

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(svg, r#"<g class="series" data-name="{}">"#, escape(&s.name));
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, path.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#, right - 110.0, escape(&s.name));
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `path` (SVG) for the given series.
pub fn plot(title: &str, series: &[PlotSeries], path: &Path) -> Result<(), RunnerError> {
    let svg = render_svg(title, series)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, svg).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> Vec<PlotSeries> {
        vec![
            PlotSeries {
                name: "spotem".into(),
                points: vec![(27.0, 0.31), (67.0, 0.35)],
            },
            PlotSeries {
                name: "uniform".into(),
                points: vec![(27.0, 0.2)],
            },
            PlotSeries {
                name: "all".into(),
                points: vec![(267.6, 0.4)],
            },
        ]
    }

    fn attr(svg: &str, name: &str) -> f64 {
        let key = format!("{name}=\"");
        let start = svg.find(&key).unwrap() + key.len();
        let end = start + svg[start..].find('"').unwrap();
        svg[start..end].parse().unwrap()
    }

    #[test]
    fn writes_one_group_per_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.svg");
        plot("synthetic", &series(), &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(!svg.is_empty());
        assert_eq!(svg.matches(r#"class="series""#).count(), 3);
    }

    #[test]
    fn axes_cover_data() {
        let svg = render_svg("t", &series()).unwrap();
        assert!(attr(&svg, "data-x-min") <= 27.0 && attr(&svg, "data-x-max") >= 267.6);
        assert!(attr(&svg, "data-y-min") <= 0.2 && attr(&svg, "data-y-max") >= 0.4);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(render_svg("t", &[]).is_err());
    }
}
