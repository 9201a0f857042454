//! Static SVG figures: ICE overplots, cluster maps with their mean curves,
//! and `Q` traces over the mixing parameter.
//!
//! Output is plain text built in a fixed order with coordinates rounded to
//! two decimals, so identical inputs give identical bytes.

use std::fmt::Write as _;

use thiserror::Error;

use crate::clustgeo::{AlphaReport, Partition};
use crate::ice::IceBundle;
use crate::smoothing::SmoothCurve;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("nothing to draw: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Cluster colors, indexed by cluster label.
pub const PALETTE: [&str; 8] =
    ["#e69f00", "#56b4e9", "#009e73", "#f0e442", "#0072b2", "#d55e00", "#cc79a7", "#000000"];

/// Dash pattern for each pass through the palette; the first pass is solid.
const DASHES: [&str; 4] = ["", "6 3", "2 2", "8 3 2 3"];

const STRATUM_COLORS: [&str; 10] = [
    "#3b4cc0", "#5977e3", "#7b9ff9", "#9ebeff", "#c0d4f5", "#f2cbb7", "#f7ac8e", "#ee8468", "#d65244", "#b40426",
];

pub fn cluster_color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

pub fn cluster_dash(label: usize) -> &'static str {
    DASHES[(label / PALETTE.len()) % DASHES.len()]
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x0) / (self.x1 - self.x0) * self.width
    }

    fn y(&self, v: f64) -> f64 {
        self.top + self.height - (v - self.y0) / (self.y1 - self.y0) * self.height
    }

    fn points(&self, xs: &[f64], ys: &[f64]) -> String {
        let mut s = String::with_capacity(xs.len() * 14);
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", self.x(x), self.y(y));
        }
        s
    }
}

/// Range padded so flat data still spans a visible interval.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        return (lo - pad, hi + pad);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Round-numbered tick positions (steps of 1, 2 or 5 times a power of ten)
/// and the number of decimals needed to print them.
fn ticks(lo: f64, hi: f64, target: usize) -> (Vec<f64>, usize) {
    let raw = (hi - lo) / target as f64;
    let magnitude = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * magnitude)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * magnitude);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), decimals)
}

fn axes(svg: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let bottom = f.top + f.height;
    let right = f.left + f.width;
    let _ = writeln!(
        svg,
        r##"<g class="axes" stroke="#333333" stroke-width="1"><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/></g>"##,
        f.left, bottom, right, bottom, f.left, f.top, f.left, bottom
    );
    let (xt, xd) = ticks(f.x0, f.x1, 6);
    let (yt, yd) = ticks(f.y0, f.y1, 5);
    svg.push_str(r##"<g class="ticks" font-family="sans-serif" font-size="11" fill="#333333">"##);
    svg.push('\n');
    for v in xt {
        let x = f.x(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.xd$}</text>"##,
            bottom + 5.0,
            bottom + 18.0,
        );
    }
    for v in yt {
        let y = f.y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#333333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.yd$}</text>"##,
            f.left - 5.0,
            f.left,
            f.left - 8.0,
            y + 4.0,
        );
    }
    svg.push_str("</g>\n");
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"##,
        f.left + f.width / 2.0,
        bottom + 38.0,
        escape(xlabel)
    );
    let (cx, cy) = (f.left - 48.0, f.top + f.height / 2.0);
    let _ = writeln!(
        svg,
        r##"<text x="{cx:.2}" y="{cy:.2}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 {cx:.2} {cy:.2})">{}</text>"##,
        escape(ylabel)
    );
}

fn open(svg: &mut String, width: u32, height: u32) {
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"##
    );
    let _ = writeln!(svg, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
}

/// One translucent polyline per ICE curve, colored by stratum when given,
/// with the PD curve drawn on top.
pub fn render_ice_svg(bundle: &IceBundle, pd: &[f64], strata: Option<&[usize]>) -> Result<String, RenderError> {
    if bundle.is_empty() {
        return Err(RenderError::Empty("ICE bundle has no curves"));
    }
    let xs = bundle.grid().values();
    if pd.len() != xs.len() {
        return Err(RenderError::Length(format!("PD has {} points for a {}-point grid", pd.len(), xs.len())));
    }
    if let Some(s) = strata {
        if s.len() != bundle.len() {
            return Err(RenderError::Length(format!("{} strata for {} curves", s.len(), bundle.len())));
        }
    }
    let all = bundle.curves().iter().flat_map(|c| c.values.iter().copied()).chain(pd.iter().copied());
    if all.clone().any(|v| !v.is_finite()) {
        return Err(RenderError::NonFinite("ICE values"));
    }
    let (y0, y1) = padded_range(all);
    let f = Frame { left: 80.0, top: 40.0, width: 690.0, height: 400.0, x0: xs[0], x1: xs[xs.len() - 1], y0, y1 };

    let mut svg = String::with_capacity(bundle.len() * xs.len() * 14 + 4096);
    open(&mut svg, 800, 500);
    let _ = writeln!(
        svg,
        r##"<text x="400" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">ICE curves for {} ({} observations)</text>"##,
        escape(bundle.feature()),
        bundle.len()
    );
    axes(&mut svg, &f, bundle.feature(), "prediction");
    svg.push_str(r##"<g class="ice" fill="none" stroke-opacity="0.3" stroke-width="1">"##);
    svg.push('\n');
    for (i, c) in bundle.curves().iter().enumerate() {
        let color = strata.map_or("#7f7f7f", |s| STRATUM_COLORS[s[i] % STRATUM_COLORS.len()]);
        let _ = writeln!(svg, r##"<polyline stroke="{color}" points="{}"/>"##, f.points(xs, &c.values));
    }
    svg.push_str("</g>\n");
    let _ = writeln!(
        svg,
        r##"<polyline class="pd" fill="none" stroke="#000000" stroke-width="3" points="{}"/>"##,
        f.points(xs, pd)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Two stacked panels: observation locations colored by cluster, and each
/// cluster's mean curve in the same color.
pub fn render_spice_svg(
    partition: &Partition,
    curves: &[SmoothCurve],
    coords: &[(f64, f64)],
    feature: &str,
) -> Result<String, RenderError> {
    if partition.is_empty() {
        return Err(RenderError::Empty("partition has no observations"));
    }
    if coords.len() != partition.len() {
        return Err(RenderError::Length(format!("{} coordinates for {} observations", coords.len(), partition.len())));
    }
    if curves.len() != partition.k() {
        return Err(RenderError::Length(format!("{} curves for {} clusters", curves.len(), partition.k())));
    }
    if coords.iter().any(|(a, b)| !(a.is_finite() && b.is_finite())) {
        return Err(RenderError::NonFinite("coordinates"));
    }
    if curves.iter().flat_map(|c| c.values.iter()).any(|v| !v.is_finite()) {
        return Err(RenderError::NonFinite("cluster curves"));
    }

    let mut svg = String::with_capacity(coords.len() * 80 + 8192);
    open(&mut svg, 800, 960);
    let _ = writeln!(
        svg,
        r##"<text x="400" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{} clusters</text>"##,
        partition.k()
    );

    // Map panel: longitude scaled by cos(mean latitude) so distances look right.
    let (lat0, lat1) = padded_range(coords.iter().map(|c| c.0));
    let (lon0, lon1) = padded_range(coords.iter().map(|c| c.1));
    let squash = ((lat0 + lat1) / 2.0).to_radians().cos().max(1e-6);
    let (box_w, box_h) = (690.0, 400.0);
    let aspect = ((lon1 - lon0) * squash) / (lat1 - lat0);
    let (w, h) = if aspect > box_w / box_h { (box_w, box_w / aspect) } else { (box_h * aspect, box_h) };
    let map = Frame {
        left: 80.0 + (box_w - w) / 2.0,
        top: 40.0 + (box_h - h) / 2.0,
        width: w,
        height: h,
        x0: lon0,
        x1: lon1,
        y0: lat0,
        y1: lat1,
    };
    axes(&mut svg, &map, "longitude", "latitude");
    svg.push_str(r##"<g class="map" stroke="none" fill-opacity="0.8">"##);
    svg.push('\n');
    for (i, &(lat, lon)) in coords.iter().enumerate() {
        let label = partition.labels()[i];
        let _ = writeln!(
            svg,
            r##"<circle class="c{}" cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"##,
            label + 1,
            map.x(lon),
            map.y(lat),
            cluster_color(label)
        );
    }
    svg.push_str("</g>\n");

    // Curve panel.
    let grid = curves[0].grid();
    let (y0, y1) = padded_range(curves.iter().flat_map(|c| c.values.iter().copied()));
    let panel = Frame { left: 80.0, top: 520.0, width: 690.0, height: 330.0, x0: grid[0], x1: grid[grid.len() - 1], y0, y1 };
    axes(&mut svg, &panel, feature, "mean prediction");
    svg.push_str(r##"<g class="curves" fill="none" stroke-width="2.5">"##);
    svg.push('\n');
    for (label, c) in curves.iter().enumerate() {
        let dash = cluster_dash(label);
        let dash = if dash.is_empty() { String::new() } else { format!(r##" stroke-dasharray="{dash}""##) };
        let _ = writeln!(
            svg,
            r##"<polyline class="c{}" stroke="{}"{dash} points="{}"/>"##,
            label + 1,
            cluster_color(label),
            panel.points(grid, &c.values)
        );
    }
    svg.push_str("</g>\n");

    svg.push_str(r##"<g class="legend" font-family="sans-serif" font-size="12">"##);
    svg.push('\n');
    for (label, size) in partition.sizes().into_iter().enumerate() {
        let (x, y) = (90.0 + 170.0 * (label % 4) as f64, 920.0 + 18.0 * (label / 4) as f64 - 18.0 * ((partition.k() - 1) / 4) as f64);
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{:.2}">cluster {} (n = {size})</text>"##,
            y - 10.0,
            cluster_color(label),
            x + 18.0,
            y,
            label + 1
        );
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

/// `Q_0` and `Q_1` against the mixing parameter, with a vertical rule at the
/// recommended value.
pub fn render_alpha_svg(report: &AlphaReport) -> Result<String, RenderError> {
    if report.alphas.is_empty() {
        return Err(RenderError::Empty("alpha report has no grid values"));
    }
    if report.q0.len() != report.alphas.len() || report.q1.len() != report.alphas.len() {
        return Err(RenderError::Length("Q traces and alpha grid differ in length".into()));
    }
    if report.q0.iter().chain(&report.q1).any(|v| !v.is_finite()) {
        return Err(RenderError::NonFinite("Q traces"));
    }
    let lo = report.q0.iter().chain(&report.q1).copied().fold(0.0, f64::min);
    let hi = report.q0.iter().chain(&report.q1).copied().fold(1.0, f64::max);
    let f = Frame { left: 80.0, top: 40.0, width: 490.0, height: 300.0, x0: 0.0, x1: 1.0, y0: lo, y1: hi };

    let mut svg = String::with_capacity(8192);
    open(&mut svg, 600, 420);
    let _ = writeln!(
        svg,
        r##"<text x="325" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">Explained inertia, K = {}</text>"##,
        report.k
    );
    axes(&mut svg, &f, "alpha", "explained inertia");
    let rx = f.x(report.recommended);
    let _ = writeln!(
        svg,
        r##"<line class="recommended" x1="{rx:.2}" y1="{:.2}" x2="{rx:.2}" y2="{:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
        f.top,
        f.top + f.height
    );
    for (name, q, color) in [("q0", &report.q0, PALETTE[4]), ("q1", &report.q1, PALETTE[5])] {
        let _ = writeln!(
            svg,
            r##"<polyline class="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##,
            f.points(&report.alphas, q)
        );
        let _ = write!(svg, r##"<g class="{name}-markers" fill="{color}">"##);
        for (&a, &v) in report.alphas.iter().zip(q.iter()) {
            if name == "q0" {
                let _ = write!(svg, r##"<circle cx="{:.2}" cy="{:.2}" r="3.5"/>"##, f.x(a), f.y(v));
            } else {
                let _ = write!(svg, r##"<rect x="{:.2}" y="{:.2}" width="7" height="7"/>"##, f.x(a) - 3.5, f.y(v) - 3.5);
            }
        }
        svg.push_str("</g>\n");
    }
    let _ = writeln!(
        svg,
        r##"<g class="legend" font-family="sans-serif" font-size="12"><rect x="470" y="360" width="12" height="12" fill="{}"/><text x="488" y="370">Q0 (curves)</text><rect x="470" y="380" width="12" height="12" fill="{}"/><text x="488" y="390">Q1 (space)</text><text x="80" y="390">recommended alpha = {}</text></g>"##,
        PALETTE[4],
        PALETTE[5],
        report.recommended
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
