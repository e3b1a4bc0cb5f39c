//! Games-by-instructions heatmap drawn as plain SVG rectangles.

use std::fmt::Write as _;

const CELL: usize = 14;
const LABEL_W: usize = 260;
const TOP: usize = 40;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One row per game; darker cells carry more importance. Intensity is scaled
/// by the largest score in the whole grid.
pub fn heatmap(rows: &[(String, Vec<f64>)], title: &str) -> String {
    let cols = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let peak = rows.iter().flat_map(|r| r.1.iter().copied()).fold(0.0f64, f64::max);
    let width = LABEL_W + cols * CELL + 20;
    let height = TOP + rows.len() * CELL + 30;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="13">{} (max {peak:.4})</text>"#, escape(title));
    for (r, (game, scores)) in rows.iter().enumerate() {
        let y = TOP + r * CELL;
        let _ = writeln!(s, r#"<text x="10" y="{}">{}</text>"#, y + CELL - 3, escape(game));
        for (c, &v) in scores.iter().enumerate() {
            let level = if peak > 0.0 { (255.0 * (1.0 - v / peak)).round().clamp(0.0, 255.0) as u8 } else { 255 };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({level},{level},{level})" stroke="rgb(204,204,204)" stroke-width="0.5"><title>{} #{c}: {v:.6}</title></rect>"#,
                LABEL_W + c * CELL,
                escape(game)
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{LABEL_W}" y="{}">instruction index 0..{}</text>"#, TOP + rows.len() * CELL + 18, cols.saturating_sub(1));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_score() {
        let rows = vec![("a<b".to_string(), vec![0.5, 0.25, 0.25]), ("c".to_string(), vec![1.0 / 3.0; 3])];
        let svg = heatmap(&rows, "t");
        assert_eq!(svg.matches("<rect x=").count(), 6);
        assert!(svg.contains("a&lt;b") && svg.contains("rgb(0,0,0)"));
    }
}
