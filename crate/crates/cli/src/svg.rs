use std::fmt::Write as _;

use maskgraph::topology::Level;
use maskgraph::{LabelMask, Point};

const PALETTE: [&str; 6] = ["#d8e6f3", "#f6dcc8", "#d9ecd0", "#eadcf0", "#f3efc4", "#d6eeee"];

fn hue(i: usize, n: usize) -> String {
    format!("hsl({:.1},80%,45%)", 300.0 * i as f64 / n.max(1) as f64)
}

/// Landmark graph over an optional mask. One `<circle class="node">` per
/// node, coloured by index along its first organ's cycle; nodes shared by
/// several organs get a thick black outline.
pub fn render(level: &Level, points: &[Point], mask: Option<&LabelMask>, size: usize) -> String {
    let scale = 8.0;
    let side = size as f64 * scale;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{side}" height="{side}" fill="white"/>"#).unwrap();
    if let Some(m) = mask {
        s.push_str("<g class=\"mask\" stroke=\"none\">\n");
        for y in 0..m.height() {
            for x in 0..m.width() {
                let l = *m.get(x, y);
                if l > 0 {
                    writeln!(
                        s,
                        r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="{}"/>"#,
                        x as f64 * scale,
                        y as f64 * scale,
                        PALETTE[(l as usize - 1) % PALETTE.len()]
                    )
                    .unwrap();
                }
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("<g class=\"edges\" stroke=\"#555\" stroke-width=\"1.5\">\n");
    for &(a, b) in &level.edges {
        let (p, q) = (points[a], points[b]);
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
            p[0] * scale,
            p[1] * scale,
            q[0] * scale,
            q[1] * scale
        )
        .unwrap();
    }
    s.push_str("</g>\n<g class=\"nodes\">\n");
    let mut colour = vec![String::from("#000"); level.num_nodes];
    for cyc in level.organ_cycles.iter().rev() {
        for (k, &v) in cyc.iter().enumerate() {
            colour[v] = hue(k, cyc.len());
        }
    }
    for (v, p) in points.iter().enumerate() {
        let shared = level.membership[v].len() > 1;
        let (r, stroke) = if shared { (5.0, r#" stroke="black" stroke-width="2.5""#) } else { (3.5, "") };
        writeln!(
            s,
            r#"<circle class="node" data-index="{v}" cx="{:.2}" cy="{:.2}" r="{r}" fill="{}"{stroke}/>"#,
            p[0] * scale,
            p[1] * scale,
            colour[v]
        )
        .unwrap();
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskgraph::topology::build_independent;

    #[test]
    fn one_circle_per_node() {
        let topo = build_independent(&[(1, 6), (2, 5)], 1).unwrap();
        let pts: Vec<Point> = (0..11).map(|i| [i as f64, 3.0]).collect();
        let svg = render(topo.finest(), &pts, None, 16);
        assert_eq!(svg.matches("class=\"node\"").count(), 11);
        assert_eq!(svg.matches("<line").count(), 11);
    }
}
