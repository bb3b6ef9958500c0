//! Minimal SVG heatmaps and line charts.

use std::fmt::Write;

const CELL: f64 = 36.0;
const MARGIN: f64 = 60.0;
const MISSING_FILL: &str = "#d9d9d9";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Diverging blue–white–red ramp over `[lo, hi]`.
fn colour(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let s = t / 0.5;
        (59.0 + s * 196.0, 76.0 + s * 179.0, 192.0 + s * 63.0)
    } else {
        let s = (t - 0.5) / 0.5;
        (255.0 - s * 75.0, 255.0 - s * 251.0, 255.0 - s * 217.0)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

/// One `<rect class="cell">` per matrix entry; missing entries are grey.
pub fn heatmap(
    title: &str,
    row_label: &str,
    col_label: &str,
    values: &[Vec<Option<f64>>],
) -> String {
    let rows = values.len();
    let cols = values.iter().map(Vec::len).max().unwrap_or(0);
    let present = values.iter().flatten().flatten().copied();
    let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let width = 2.0 * MARGIN + cols as f64 * CELL;
    let height = 2.0 * MARGIN + rows as f64 * CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, row) in values.iter().enumerate() {
        let y = MARGIN + i as f64 * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{i}</text>"#,
            MARGIN - 6.0,
            y + CELL / 2.0 + 3.0
        );
        for (j, v) in row.iter().enumerate() {
            let x = MARGIN + j as f64 * CELL;
            let (fill, tip) = match v {
                Some(v) => (colour(*v, lo, hi), format!("{v:.4}")),
                None => (MISSING_FILL.to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"><title>({i},{j}) {tip}</title></rect>"#
            );
        }
    }
    for j in 0..cols {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#,
            MARGIN + j as f64 * CELL + CELL / 2.0,
            MARGIN - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        width / 2.0,
        height - MARGIN / 2.0,
        escape(col_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        height / 2.0,
        height / 2.0,
        escape(row_label)
    );
    if lo.is_finite() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">range [{lo:.4}, {hi:.4}]</text>"#,
            width - 6.0,
            height - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<Option<f64>>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart over integer x positions `0..n`; `None` points break the line.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (480.0, 320.0);
    let n = series.iter().map(|s| s.points.len()).max().unwrap_or(0);
    let present = series.iter().flat_map(|s| s.points.iter().flatten().copied());
    let (mut lo, mut hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5e-3;
        hi += 0.5e-3;
    }
    let px = |i: usize| MARGIN + if n > 1 { i as f64 * (w - 2.0 * MARGIN) / (n - 1) as f64 } else { 0.0 };
    let py = |v: f64| h - MARGIN - (v - lo) / (hi - lo) * (h - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{MARGIN} {MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        h - MARGIN,
        w - MARGIN
    );
    for i in 0..n {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{i}</text>"#,
            px(i),
            h - MARGIN + 14.0
        );
    }
    for (v, anchor) in [(lo, h - MARGIN), (hi, MARGIN)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.4}</text>"#,
            MARGIN - 4.0,
            anchor + 3.0
        );
    }
    for (k, ser) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, p) in ser.points.iter().enumerate() {
            match p {
                Some(v) => {
                    let _ = write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, px(i), py(*v));
                    pen_down = true;
                    let _ = writeln!(
                        s,
                        r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"><title>{} {i}: {v:.4}</title></circle>"#,
                        px(i),
                        py(*v),
                        escape(ser.name)
                    );
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, d.trim_end());
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            w - MARGIN + 4.0,
            MARGIN + 12.0 * k as f64,
            escape(ser.name)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}
