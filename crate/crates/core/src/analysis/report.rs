use std::fmt::Write;

use super::probe::ProbeMeasurement;
use super::ConditionalPmf;

/// One row per pmf: label, sample count, entropy and the modal code.
pub fn pmf_csv(pmfs: &[ConditionalPmf]) -> String {
    let mut s = String::from("label,count,entropy_nats,top_code,top_prob\n");
    for p in pmfs {
        let (top, prob) = p
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, &v)| (i, v))
            .unwrap_or((0, 0.0));
        let _ = writeln!(s, "{},{},{:.6},{},{:.6}", csv_field(&p.label), p.count, p.entropy(), top, prob);
    }
    s
}

pub fn probes_csv(rows: &[ProbeMeasurement]) -> String {
    let mut s = String::from("speaker,code,f0_hz,rms,pc1,pc2,voiced\n");
    for r in rows {
        let f0 = r.f0.map(|v| format!("{v:.3}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            r.speaker,
            r.code,
            f0,
            r.rms,
            r.pc1,
            r.pc2,
            r.voiced()
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Standalone SVG scatter plot. `groups` selects a colour per point.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[String], groups: Option<&[usize]>, title: &str) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let fold = |f: fn(f64, f64) -> f64, init: f64, k: usize| points.iter().map(|p| p[k]).fold(init, f);
    let (x0, x1) = (fold(f64::min, f64::INFINITY, 0), fold(f64::max, f64::NEG_INFINITY, 0));
    let (y0, y1) = (fold(f64::min, f64::INFINITY, 1), fold(f64::max, f64::NEG_INFINITY, 1));
    let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
    let sx = |x: f64| pad + (x - x0) / span(x0, x1) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / span(y0, y1) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    for (i, p) in points.iter().enumerate() {
        let color = PALETTE[groups.map(|g| g[i]).unwrap_or(0) % PALETTE.len()];
        let (x, y) = (sx(p[0]), sy(p[1]));
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
        if let Some(l) = labels.get(i) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
                x + 5.0,
                y - 5.0,
                xml_escape(l)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
