//! Standalone SVG line chart of brain-age-gap densities, one curve per
//! cohort.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use wmage_core::experiment::Cohort;
use wmage_core::stats::DensityCurve;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const TICKS: usize = 5;

fn colour(c: Cohort) -> &'static str {
    match c {
        Cohort::Normal => "#1f77b4",
        Cohort::Impaired => "#d62728",
        Cohort::Mci => "#ff7f0e",
        Cohort::Dementia => "#9467bd",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn kde_chart(title: &str, curves: &BTreeMap<Cohort, DensityCurve>) -> String {
    let xs = curves.values().flat_map(|c| c.x.iter().copied());
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if !(x0.is_finite() && x1 > x0) {
        (x0, x1) = (-1.0, 1.0);
    }
    let y1 = curves
        .values()
        .flat_map(|c| c.density.iter().copied())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.05;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - y / y1 * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (bx, by) = (py(0.0), px(x0));
    let _ = writeln!(
        s,
        r#"<path d="M{by:.1} {TOP} V{bx:.1} H{:.1}" fill="none" stroke="black"/>"#,
        W - RIGHT
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), f * y1);
        let (tx, ty) = (px(xv), py(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.1}" y1="{bx:.1}" x2="{tx:.1}" y2="{:.1}" stroke="black"/><text x="{tx:.1}" y="{:.1}" text-anchor="middle">{xv:.1}</text>"#,
            bx + 4.0,
            bx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ty:.1}" x2="{by:.1}" y2="{ty:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            by - 4.0,
            by - 6.0,
            ty + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">brain-age gap (years)</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">density</text>"#,
        (TOP + H - BOTTOM) / 2.0
    );
    for (i, (cohort, curve)) in curves.iter().enumerate() {
        let pts: Vec<String> = curve
            .x
            .iter()
            .zip(&curve.density)
            .map(|(&x, &d)| format!("{:.2},{:.2}", px(x), py(d)))
            .collect();
        let c = colour(*cohort);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 8.0 + 18.0 * i as f64;
        let lx = W - RIGHT - 120.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{cohort}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
