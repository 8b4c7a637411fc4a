//! Static SVG line plots. Output is a pure function of the data, numbers are
//! printed with fixed precision so files are byte-stable.

use std::fmt::Write;

const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 52.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub enum Panel {
    /// Time histories; `guides` are dashed horizontal lines (bounds).
    Lines {
        title: String,
        x_label: String,
        series: Vec<Series>,
        guides: Vec<f64>,
    },
    /// A 3-D polyline drawn in a fixed oblique projection, inside the box
    /// `[lo, hi]` per axis.
    Box3d {
        title: String,
        labels: [String; 3],
        lo: [f64; 3],
        hi: [f64; 3],
        path: Vec<[f64; 3]>,
    },
}

/// Lays `panels` out two per row.
pub fn render(panels: &[Panel]) -> String {
    let cols = panels.len().clamp(1, 2);
    let rows = panels.len().div_ceil(2).max(1);
    let mut svg = String::new();
    let (w, h) = (PANEL_W * cols as f64, PANEL_H * rows as f64);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let ox = PANEL_W * (i % 2) as f64;
        let oy = PANEL_H * (i / 2) as f64;
        let _ = writeln!(svg, r#"<g transform="translate({ox:.0},{oy:.0})">"#);
        match panel {
            Panel::Lines {
                title,
                x_label,
                series,
                guides,
            } => lines(&mut svg, title, x_label, series, guides),
            Panel::Box3d {
                title,
                labels,
                lo,
                hi,
                path,
            } => box3d(&mut svg, title, labels, lo, hi, path),
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * lo.abs().max(1e-300) {
        let pad = lo.abs().max(1e-12) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn lines(svg: &mut String, title: &str, x_label: &str, series: &[Series], guides: &[f64]) {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(guides.iter().copied()),
    );
    let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * ph;
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        PANEL_W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN:.1}" y="{MARGIN:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    for (v, anchor_y) in [(y0, MARGIN + ph), (y1, MARGIN + 8.0)] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{anchor_y:.1}" text-anchor="end">{v:.3e}</text>"#,
            MARGIN - 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN:.1}" y="{:.1}">{x0:.4}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{x1:.4}</text>"#,
        MARGIN + ph + 14.0,
        MARGIN + pw,
        MARGIN + ph + 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN + pw / 2.0,
        MARGIN + ph + 30.0,
        escape(x_label)
    );
    for g in guides {
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
            MARGIN,
            sy(*g),
            MARGIN + pw,
            sy(*g)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.4" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + 12.0 + 13.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
            MARGIN + pw - 70.0,
            escape(&s.name)
        );
    }
}

fn box3d(svg: &mut String, title: &str, labels: &[String; 3], lo: &[f64; 3], hi: &[f64; 3], path: &[[f64; 3]]) {
    // normalize each axis to [0, 1] over the union of box and path
    let mut a = *lo;
    let mut b = *hi;
    for p in path {
        for d in 0..3 {
            if p[d].is_finite() {
                a[d] = a[d].min(p[d]);
                b[d] = b[d].max(p[d]);
            }
        }
    }
    let norm = |p: [f64; 3]| -> [f64; 3] {
        let mut q = [0.0; 3];
        for d in 0..3 {
            let span = (b[d] - a[d]).max(1e-300);
            q[d] = (p[d] - a[d]) / span;
        }
        q
    };
    let size = PANEL_H - 2.0 * MARGIN;
    let project = |q: [f64; 3]| -> (f64, f64) {
        let x = MARGIN + 40.0 + size * (0.8 * q[0] + 0.45 * q[1]);
        let y = MARGIN + size * (1.0 - 0.8 * q[2] - 0.3 * q[1]) + 10.0;
        (x, y)
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        PANEL_W / 2.0,
        escape(title)
    );
    let corner = |i: usize| [if i & 1 == 0 { lo[0] } else { hi[0] }, if i & 2 == 0 { lo[1] } else { hi[1] }, if i & 4 == 0 { lo[2] } else { hi[2] }];
    for i in 0..8usize {
        for bit in [1usize, 2, 4] {
            let j = i | bit;
            if j != i {
                let (x1, y1) = project(norm(corner(i)));
                let (x2, y2) = project(norm(corner(j)));
                let _ = writeln!(
                    svg,
                    r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#888" stroke-dasharray="4 3"/>"##
                );
            }
        }
    }
    let pts: Vec<String> = path
        .iter()
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .map(|&p| {
            let (x, y) = project(norm(p));
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="{}" stroke-width="1.4" points="{}"/>"#,
        COLORS[0],
        pts.join(" ")
    );
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (d, label) in labels.iter().enumerate() {
        let (x, y) = project(axes[d]);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 4.0, y + 12.0, escape(label));
    }
}
