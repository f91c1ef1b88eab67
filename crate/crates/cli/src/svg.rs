//! Minimal SVG output: line charts and heatmaps.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

pub struct Line<'a> {
    pub label: &'a str,
    pub color: &'a str,
    /// `NaN` marks a gap.
    pub values: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_chart(title: &str, lines: &[Line]) -> String {
    let finite = lines.iter().flat_map(|l| l.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let n = lines.iter().map(|l| l.values.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut s = header(WIDTH, HEIGHT, title);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="grey"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="4" y="{:.1}" font-size="10">{hi:.3}</text>"#, MARGIN + 4.0);
    let _ = writeln!(s, r#"<text x="4" y="{:.1}" font-size="10">{lo:.3}</text>"#, HEIGHT - MARGIN);
    for (k, line) in lines.iter().enumerate() {
        let mut d = String::new();
        let mut pen_down = false;
        for (i, v) in line.values.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, x(i), y(*v));
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#, d.trim_end(), line.color);
        let ly = MARGIN + 14.0 * k as f64 + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            line.color,
            escape(line.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One or more heatmaps side by side; values are shaded between each
/// panel's own min and max.
pub fn heatmaps(title: &str, panels: &[(String, Vec<Vec<f64>>)]) -> String {
    let cell = 18.0;
    let gap = 36.0;
    let widths: Vec<f64> = panels.iter().map(|(_, m)| m.first().map_or(0, Vec::len) as f64 * cell).collect();
    let heights: Vec<f64> = panels.iter().map(|(_, m)| m.len() as f64 * cell).collect();
    let total_w = MARGIN * 2.0 + widths.iter().sum::<f64>() + gap * panels.len().saturating_sub(1) as f64;
    let total_h = MARGIN * 2.0 + heights.iter().cloned().fold(0.0, f64::max) + 16.0;
    let mut s = header(total_w, total_h, title);
    let mut x0 = MARGIN;
    for ((label, m), w) in panels.iter().zip(&widths) {
        let vals = m.iter().flatten().copied().filter(|v| v.is_finite());
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}" font-size="11">{}</text>"#, MARGIN - 6.0, escape(label));
        for (r, row) in m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let t = if v.is_finite() { (v - lo) / span } else { 0.0 };
                let shade = (255.0 * (1.0 - t)).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb(255,{shade},{shade})"><title>{v:.4}</title></rect>"#,
                    x0 + c as f64 * cell,
                    MARGIN + r as f64 * cell
                );
            }
        }
        x0 += w + gap;
    }
    s.push_str("</svg>\n");
    s
}

fn header(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ =
        writeln!(s, r#"<text x="{MARGIN}" y="20" font-size="14" font-family="sans-serif">{}</text>"#, escape(title));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed() {
        let s = line_chart("a<b", &[Line { label: "truth", color: "black", values: &[1.0, f64::NAN, 3.0] }]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches(" M").count() + s.matches("\"M").count(), 2);
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let s = heatmaps("t", &[("p".into(), vec![vec![0.0, 1.0], vec![0.5, 0.25]])]);
        assert_eq!(s.matches("<rect x=").count(), 4);
    }
}
