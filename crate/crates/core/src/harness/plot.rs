//! Static BEV plot: ground-truth boxes and scored predictions as SVG.

use std::fmt::Write as _;

use crate::losses::GtBox;
use crate::metrics::Detection;
use crate::world::BevExtent;

const PX: f64 = 600.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn corners(p: &[f64; 9]) -> [(f64, f64); 4] {
    let (c, s) = (p[6].cos(), p[6].sin());
    let (hl, hw) = (p[4] / 2.0, p[3] / 2.0);
    [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].map(|(a, b)| (p[0] + a * c - b * s, p[1] + a * s + b * c))
}

/// Renders `gts` (solid) and the predictions scoring at least `min_score`
/// (dashed, opacity by score) with a velocity arrow each. World +y points up.
pub fn bev_svg(extent: &BevExtent, gts: &[GtBox], preds: &[Detection], min_score: f64) -> String {
    let sx = PX / extent.width();
    let sy = PX / extent.height();
    let to_px = |x: f64, y: f64| ((x - extent.x_min) * sx, (extent.y_max - y) * sy);
    let poly = |p: &[f64; 9]| {
        corners(p)
            .iter()
            .map(|&(x, y)| {
                let (u, v) = to_px(x, y);
                format!("{u:.1},{v:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let arrow = |p: &[f64; 9], color: &str| {
        let (u0, v0) = to_px(p[0], p[1]);
        let (u1, v1) = to_px(p[0] + p[7], p[1] + p[8]);
        format!(r#"<line x1="{u0:.1}" y1="{v0:.1}" x2="{u1:.1}" y2="{v1:.1}" stroke="{color}" stroke-width="1.5"/>"#)
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PX}" height="{PX}" viewBox="0 0 {PX} {PX}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#fafafa" stroke="#888"/>"##);
    let (ex, ey) = to_px(0.0, 0.0);
    let _ = writeln!(s, r##"<circle cx="{ex:.1}" cy="{ey:.1}" r="4" fill="#000"><title>ego</title></circle>"##);
    for g in gts {
        let color = PALETTE[g.class_id % PALETTE.len()];
        let _ = writeln!(s, r#"<polygon points="{}" fill="none" stroke="{color}" stroke-width="2"><title>gt class {}</title></polygon>"#, poly(&g.params), g.class_id);
        let _ = writeln!(s, "{}", arrow(&g.params, color));
    }
    for d in preds.iter().filter(|d| d.score >= min_score) {
        let color = PALETTE[d.class_id % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="none" stroke="{color}" stroke-dasharray="4 3" stroke-opacity="{:.2}"><title>pred class {} score {:.2}</title></polygon>"#,
            poly(&d.params),
            d.score.clamp(0.2, 1.0),
            d.class_id,
            d.score
        );
        let _ = writeln!(s, "{}", arrow(&d.params, color));
    }
    s.push_str("</svg>\n");
    s
}
