//! SVG heatmaps of per-layer attributions.
//!
//! Each row is one probe layer and each column one sequence position. Colour
//! runs linearly from white to a saturated blue, normalized per row by the
//! row's largest value. Every cell carries a `<title>` with the exact value,
//! formatted the same way as the CSV output.

use std::fmt::Write as _;

const CELL: usize = 48;
const LABEL_WIDTH: usize = 56;
const HEADER: usize = 28;

/// One row of the heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub label: String,
    pub values: Vec<f64>,
}

fn shade(value: f64, max: f64) -> (u8, u8, u8) {
    let t = if max > 0.0 { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |from: f64, to: f64| (from + (to - from) * t).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 81.0), lerp(255.0, 156.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `rows` over the column labels `columns` (for example the digits).
pub fn render_svg(title: &str, columns: &[String], rows: &[HeatmapRow]) -> String {
    let width = LABEL_WIDTH + CELL * columns.len();
    let height = HEADER * 2 + CELL * rows.len();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="14">"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="18">{}</text>"#, escape(title));
    for (j, c) in columns.iter().enumerate() {
        let x = LABEL_WIDTH + j * CELL + CELL / 2;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            HEADER * 2 - 8,
            escape(c)
        );
    }
    for (i, row) in rows.iter().enumerate() {
        let y = HEADER * 2 + i * CELL;
        let max = row.values.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{}">{}</text>"#,
            y + CELL / 2 + 5,
            escape(&row.label)
        );
        for (j, &v) in row.values.iter().enumerate() {
            let (r, g, b) = shade(v, max);
            let _ = writeln!(
                svg,
                r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#cccccc"><title>{}</title></rect>"##,
                LABEL_WIDTH + j * CELL,
                v
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
