//! Self-contained SVG line charts.

use std::fmt::Write;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 44.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#555555"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: &str, points: Vec<(f64, f64)>, color: &'static str) -> Self {
        Self { label: label.into(), points, color, dashed: false }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

/// Region between two curves sharing x values, drawn translucent.
#[derive(Debug, Clone)]
pub struct Band {
    pub label: String,
    pub x: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub color: &'static str,
}

#[derive(Debug, Clone, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub bands: Vec<Band>,
    /// keep one unit equal on both axes
    pub equal_aspect: bool,
}

/// Roughly `target` evenly spaced round tick values covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(c: &Chart) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut add = |x: f64, y: f64| {
        if x.is_finite() && y.is_finite() {
            b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
        }
    };
    for s in &c.series {
        for &(x, y) in &s.points {
            add(x, y);
        }
    }
    for band in &c.bands {
        for i in 0..band.x.len() {
            add(band.x[i], band.lo[i]);
            add(band.x[i], band.hi[i]);
        }
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = hi - lo;
        if span <= 1e-12 * (1.0 + lo.abs()) {
            let d = 0.5 * (1.0 + lo.abs()) * 1e-3;
            (lo - d, hi + d)
        } else {
            (lo - 0.04 * span, hi + 0.04 * span)
        }
    };
    let (x0, x1) = pad(b.0, b.1);
    let (y0, y1) = pad(b.2, b.3);
    (x0, x1, y0, y1)
}

fn panel(out: &mut String, c: &Chart, ox: f64, oy: f64) {
    let (mut x0, mut x1, mut y0, mut y1) = bounds(c);
    let pw = PANEL_W - MARGIN_L - MARGIN_R;
    let ph = PANEL_H - MARGIN_T - MARGIN_B;
    if c.equal_aspect {
        let scale = ((x1 - x0) / pw).max((y1 - y0) / ph);
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        (x0, x1) = (cx - 0.5 * scale * pw, cx + 0.5 * scale * pw);
        (y0, y1) = (cy - 0.5 * scale * ph, cy + 0.5 * scale * ph);
    }
    let sx = |x: f64| ox + MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| oy + MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let _ = writeln!(out, r#"<g font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, ox + PANEL_W / 2.0, oy + 18.0, escape(&c.title));
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#888"/>"##,
        ox + MARGIN_L,
        oy + MARGIN_T
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(out, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#eee"/>"##, oy + MARGIN_T, oy + MARGIN_T + ph);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, oy + MARGIN_T + ph + 14.0, fmt_tick(t));
    }
    for t in nice_ticks(y0, y1, 5) {
        let y = sy(t);
        let _ = writeln!(out, r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/>"##, ox + MARGIN_L, ox + MARGIN_L + pw);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ox + MARGIN_L - 4.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, ox + MARGIN_L + pw / 2.0, oy + PANEL_H - 8.0, escape(&c.x_label));
    let (lx, ly) = (ox + 14.0, oy + MARGIN_T + ph / 2.0);
    let _ = writeln!(out, r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#, escape(&c.y_label));

    let _ = writeln!(
        out,
        r#"<clipPath id="clip{0}_{1}"><rect x="{2:.1}" y="{3:.1}" width="{pw:.1}" height="{ph:.1}"/></clipPath><g clip-path="url(#clip{0}_{1})">"#,
        ox as i64,
        oy as i64,
        ox + MARGIN_L,
        oy + MARGIN_T
    );
    for b in &c.bands {
        let mut pts = String::new();
        let finite = |i: usize| b.x[i].is_finite() && b.lo[i].is_finite() && b.hi[i].is_finite();
        for i in (0..b.x.len()).filter(|&i| finite(i)) {
            let _ = write!(pts, "{:.2},{:.2} ", sx(b.x[i]), sy(b.hi[i]));
        }
        for i in (0..b.x.len()).rev().filter(|&i| finite(i)) {
            let _ = write!(pts, "{:.2},{:.2} ", sx(b.x[i]), sy(b.lo[i]));
        }
        let _ = writeln!(out, r#"<polygon points="{}" fill="{}" fill-opacity="0.15" stroke="none"/>"#, pts.trim_end(), b.color);
    }
    for s in &c.series {
        let mut pts = String::new();
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.4"{dash}/>"#, pts.trim_end(), s.color);
    }
    let _ = writeln!(out, "</g>");

    // legend, top right inside the frame
    let entries: Vec<(&str, &str, bool)> =
        c.bands.iter().map(|b| (b.label.as_str(), b.color, true)).chain(c.series.iter().map(|s| (s.label.as_str(), s.color, false))).collect();
    let mut y = oy + MARGIN_T + 14.0;
    let x = ox + MARGIN_L + pw - 150.0;
    for (label, color, filled) in entries {
        if filled {
            let _ = writeln!(out, r#"<rect x="{x:.1}" y="{:.1}" width="18" height="8" fill="{color}" fill-opacity="0.3"/>"#, y - 7.0);
        } else {
            let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#, y - 3.0, x + 18.0, y - 3.0);
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 24.0, escape(label));
        y += 14.0;
    }
    let _ = writeln!(out, "</g>");
}

/// Charts laid out on a grid with `cols` columns.
pub fn render_grid(charts: &[Chart], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = charts.len().div_ceil(cols).max(1);
    let (w, h) = (PANEL_W * cols.min(charts.len().max(1)) as f64, PANEL_H * rows as f64);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, c) in charts.iter().enumerate() {
        panel(&mut out, c, PANEL_W * (i % cols) as f64, PANEL_H * (i / cols) as f64);
    }
    out.push_str("</svg>\n");
    out
}

pub fn render(chart: &Chart) -> String {
    render_grid(std::slice::from_ref(chart), 1)
}
