//! Minimal SVG charts: cell maps, line and interval plots, forest plots and bar charts.
//!
//! Numbers are printed with fixed precision so identical inputs give identical files.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub const BLUE: &str = "#2b6cb0";
pub const RED: &str = "#c53030";
pub const GREY: &str = "#718096";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear map from a data range onto a pixel range.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64) -> Self {
        let (lo, hi) = if (hi - lo).abs() < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        Axis { lo, hi, p0, p1 }
    }

    fn at(&self, v: f64) -> f64 {
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

fn pad((lo, hi): (f64, f64), frac: f64) -> (f64, f64) {
    let d = (hi - lo).max(1e-9) * frac;
    (lo - d, hi + d)
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        Canvas { out }
    }

    fn axes(&mut self, x: Axis, y: Axis, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let _ = writeln!(
            self.out,
            r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x.lo + f * (x.hi - x.lo);
            let yv = y.lo + f * (y.hi - y.lo);
            let _ = writeln!(
                self.out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x.at(xv),
                y0 + 16.0,
                tick(xv)
            );
            let _ = writeln!(
                self.out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                y.at(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            self.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 12.0,
            esc(xlabel)
        );
        let _ = writeln!(
            self.out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
    }

    fn legend(&mut self, items: &[(&str, &str)]) {
        for (i, (label, color)) in items.iter().enumerate() {
            let y = TOP + 6.0 + 16.0 * i as f64;
            let x = W - RIGHT - 150.0;
            let _ = writeln!(self.out, r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{color}"/>"#);
            let _ = writeln!(self.out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 14.0, y + 9.0, esc(label));
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(0.01..10_000.0).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Square cells of side `cell` coloured by class; `classes` gives label and colour per class.
pub fn cell_map(title: &str, cells: &[(f64, f64, usize)], cell: f64, classes: &[(&str, &str)]) -> String {
    let mut c = Canvas::new(title);
    let (xlo, xhi) = pad(range(cells.iter().map(|p| p.1)), 0.05);
    let (ylo, yhi) = pad(range(cells.iter().map(|p| p.0)), 0.05);
    let span = (xhi - xlo).max(yhi - ylo);
    let side = (W - LEFT - RIGHT).min(H - TOP - BOTTOM);
    let x = Axis::new(xlo, xlo + span, LEFT, LEFT + side);
    let y = Axis::new(ylo, ylo + span, H - BOTTOM, H - BOTTOM - side);
    c.axes(x, y, "longitude offset (deg)", "latitude offset (deg)");
    let px = side / span * cell;
    for &(u, v, k) in cells {
        let color = classes.get(k).map_or(GREY, |c| c.1);
        let _ = writeln!(
            c.out,
            r#"<rect x="{:.2}" y="{:.2}" width="{px:.2}" height="{px:.2}" fill="{color}"/>"#,
            x.at(v),
            y.at(u) - px
        );
    }
    let origin = (x.at(0.0), y.at(0.0));
    let _ = writeln!(
        c.out,
        r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="none" stroke="black" stroke-width="2"/>"#,
        origin.0, origin.1
    );
    c.legend(classes);
    c.finish()
}

/// One polyline per series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, &str, Vec<(f64, f64)>)]) -> String {
    let mut c = Canvas::new(title);
    let x = range(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)));
    let y = pad(range(series.iter().flat_map(|s| s.2.iter().map(|p| p.1))), 0.05);
    let x = Axis::new(x.0, x.1, LEFT, W - RIGHT);
    let y = Axis::new(y.0, y.1, H - BOTTOM, TOP);
    c.axes(x, y, xlabel, ylabel);
    for (_, color, pts) in series {
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.2},{:.2}", if i == 0 { 'M' } else { 'L' }, x.at(p.0), y.at(p.1)))
            .collect();
        let _ = writeln!(c.out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
    }
    let items: Vec<(&str, &str)> = series.iter().map(|s| (s.0, s.1)).collect();
    c.legend(&items);
    c.finish()
}

/// Point estimates with vertical intervals and a dashed zero line.
pub fn interval_plot(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64, f64, f64)]) -> String {
    let mut c = Canvas::new(title);
    let xr = pad(range(points.iter().map(|p| p.0)), 0.1);
    let yr = pad(range(points.iter().flat_map(|p| [p.2, p.3, 0.0])), 0.05);
    let x = Axis::new(xr.0, xr.1, LEFT, W - RIGHT);
    let y = Axis::new(yr.0, yr.1, H - BOTTOM, TOP);
    c.axes(x, y, xlabel, ylabel);
    let _ = writeln!(
        c.out,
        r#"<line x1="{LEFT:.1}" x2="{:.1}" y1="{:.2}" y2="{:.2}" stroke="{GREY}" stroke-dasharray="4 3"/>"#,
        W - RIGHT,
        y.at(0.0),
        y.at(0.0)
    );
    for &(px, est, lo, hi) in points {
        let _ = writeln!(
            c.out,
            r#"<line x1="{0:.2}" x2="{0:.2}" y1="{1:.2}" y2="{2:.2}" stroke="{BLUE}" stroke-width="2"/>"#,
            x.at(px),
            y.at(lo),
            y.at(hi)
        );
        let _ = writeln!(c.out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{BLUE}"/>"#, x.at(px), y.at(est));
    }
    c.finish()
}

/// Horizontal intervals on a log axis with a reference line at 1.
pub fn forest_plot(title: &str, rows: &[(String, f64, f64, f64, bool)]) -> String {
    let mut c = Canvas::new(title);
    let lr = pad(range(rows.iter().flat_map(|r| [r.2.ln(), r.3.ln(), 0.0])), 0.05);
    let left = LEFT + 60.0;
    let x = Axis::new(lr.0, lr.1, left, W - RIGHT);
    let step = (H - TOP - BOTTOM) / rows.len().max(1) as f64;
    let (y0, y1) = (H - BOTTOM, TOP);
    let _ = writeln!(c.out, r#"<path d="M{left:.1},{y0:.1} L{:.1},{y0:.1}" stroke="black"/>"#, W - RIGHT);
    for i in 0..=4 {
        let v = x.lo + (x.hi - x.lo) * i as f64 / 4.0;
        let _ = writeln!(
            c.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x.at(v),
            y0 + 16.0,
            tick(v.exp())
        );
    }
    let _ = writeln!(
        c.out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">odds ratio (log scale)</text>"#,
        (left + W - RIGHT) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        c.out,
        r#"<line x1="{0:.2}" x2="{0:.2}" y1="{y0:.1}" y2="{y1:.1}" stroke="{GREY}" stroke-dasharray="4 3"/>"#,
        x.at(0.0)
    );
    for (i, (label, est, lo, hi, pooled)) in rows.iter().enumerate() {
        let y = TOP + step * (i as f64 + 0.5);
        let color = if *pooled { RED } else { BLUE };
        let _ = writeln!(
            c.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="{}">{}</text>"#,
            left - 6.0,
            y + 4.0,
            if rows.len() > 30 { 8 } else { 11 },
            esc(label)
        );
        let _ = writeln!(
            c.out,
            r#"<line x1="{:.2}" x2="{:.2}" y1="{y:.2}" y2="{y:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            x.at(lo.ln()),
            x.at(hi.ln())
        );
        let r = if *pooled { 5.0 } else { 3.0 };
        let _ = writeln!(c.out, r#"<rect x="{:.2}" y="{:.2}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
            x.at(est.ln()) - r / 2.0, y - r / 2.0, r, r);
    }
    c.finish()
}

/// Horizontal bars with optional error whiskers, in the given order from the top.
pub fn bar_chart(title: &str, xlabel: &str, rows: &[(String, f64, f64)]) -> String {
    let mut c = Canvas::new(title);
    let left = LEFT + 130.0;
    let xr = pad(range(rows.iter().flat_map(|r| [r.1 - r.2, r.1 + r.2, 0.0])), 0.05);
    let x = Axis::new(xr.0, xr.1, left, W - RIGHT);
    let step = (H - TOP - BOTTOM) / rows.len().max(1) as f64;
    let y0 = H - BOTTOM;
    let _ = writeln!(c.out, r#"<path d="M{left:.1},{y0:.1} L{:.1},{y0:.1}" stroke="black"/>"#, W - RIGHT);
    for i in 0..=4 {
        let v = x.lo + (x.hi - x.lo) * i as f64 / 4.0;
        let _ = writeln!(
            c.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x.at(v),
            y0 + 16.0,
            tick(v)
        );
    }
    let _ = writeln!(
        c.out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (left + W - RIGHT) / 2.0,
        H - 12.0,
        esc(xlabel)
    );
    for (i, (label, v, err)) in rows.iter().enumerate() {
        let y = TOP + step * i as f64 + step * 0.15;
        let h = step * 0.7;
        let (a, b) = (x.at(0.0).min(x.at(*v)), x.at(0.0).max(x.at(*v)));
        let color = if *v >= 0.0 { BLUE } else { RED };
        let _ = writeln!(
            c.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 6.0,
            y + h / 2.0 + 4.0,
            esc(label)
        );
        let _ = writeln!(c.out, r#"<rect x="{a:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#, b - a);
        if *err > 0.0 {
            let _ = writeln!(
                c.out,
                r#"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
                x.at(v - err),
                x.at(v + err),
                y + h / 2.0,
                y + h / 2.0
            );
        }
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_stable() {
        let a = line_chart("t", "x", "y", &[("s", BLUE, vec![(0.0, 1.0), (1.0, 2.0)])]);
        let b = line_chart("t", "x", "y", &[("s", BLUE, vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        let f = forest_plot("or", &[("c<1>".into(), 1.5, 1.1, 2.0, false)]);
        assert!(f.contains("c&lt;1&gt;"));
        assert!(!interval_plot("e", "x", "y", &[]).is_empty());
    }
}
