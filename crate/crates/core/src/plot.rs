//! Static SVG of gap against ego position over the delay profile.

use std::fmt::Write;

use crate::channel::ChannelField;
use crate::sim::ScenarioTrace;

const W: f64 = 800.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One polyline per labelled trace, with the field's mean delay along the
/// road drawn as a shaded profile behind them.
pub fn gap_svg(field: &ChannelField, traces: &[(&str, &ScenarioTrace)]) -> String {
    let pts = traces.iter().flat_map(|(_, t)| t.records.iter());
    let (mut x0, mut x1, mut g1) = (f64::INFINITY, f64::NEG_INFINITY, 1.0f64);
    for r in pts {
        x0 = x0.min(r.ego.position);
        x1 = x1.max(r.ego.position);
        g1 = g1.max(r.gap);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |g: f64| H - PAD - g / (1.1 * g1) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);

    // delay profile as opacity bands
    let peak = (0..=200)
        .map(|i| field.mean_delay_at(x0 + (x1 - x0) * i as f64 / 200.0))
        .fold(f64::MIN_POSITIVE, f64::max);
    let bands = 100;
    for i in 0..bands {
        let a = x0 + (x1 - x0) * i as f64 / bands as f64;
        let b = x0 + (x1 - x0) * (i + 1) as f64 / bands as f64;
        let d = field.mean_delay_at(0.5 * (a + b)) / peak;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{PAD}" width="{:.2}" height="{:.2}" fill="orange" fill-opacity="{:.3}"/>"#,
            sx(a),
            sx(b) - sx(a),
            H - 2.0 * PAD,
            0.35 * d
        );
    }

    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, H - PAD, W - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">ego position [m]</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {0})" text-anchor="middle">gap [m]</text>"#, H / 2.0);
    for (i, v) in [x0, 0.5 * (x0 + x1), x1].iter().enumerate() {
        let anchor = ["start", "middle", "end"][i];
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="{anchor}">{v:.0}</text>"#, sx(*v), H - PAD + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{:.0}</text>"#, PAD - 4.0, sy(g1), g1);

    for (i, (label, t)) in traces.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> =
            t.records.iter().map(|r| format!("{:.2},{:.2}", sx(r.ego.position), sy(r.gap))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{label}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * (i + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
