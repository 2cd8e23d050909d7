//! Static SVG scatter of search observations: accuracy loss against latency,
//! Pareto front and selected configuration highlighted.

use std::fmt::Write;

use blocksurgeon::profile::PenaltyScale;
use blocksurgeon::search::Observation;

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 56.0;
const BOTTOM: f64 = 60.0;

fn nice_step(span: f64) -> f64 {
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    let f = if m < 1.5 {
        1.0
    } else if m < 3.5 {
        2.0
    } else if m < 7.5 {
        5.0
    } else {
        10.0
    };
    f * mag
}

/// Padded axis range and its tick positions.
fn axis(values: impl Iterator<Item = f64>) -> (f64, f64, Vec<f64>) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let step = nice_step(hi - lo);
    let mut ticks = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + 1e-12 {
        ticks.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    (lo, hi, ticks)
}

fn label(v: f64, step: f64) -> String {
    let digits = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    format!("{v:.digits$}")
}

pub fn scatter(
    log: &[Observation],
    front: &[Observation],
    selected: &Observation,
    scale: &PenaltyScale,
    base_latency_ms: f64,
    title: &str,
) -> String {
    let (x0, x1, xt) = axis(log.iter().map(|o| o.latency_ms).chain([base_latency_ms]));
    let (y0, y1, yt) = axis(log.iter().map(|o| o.f1).chain([0.0]));
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);
    let xstep = if xt.len() > 1 { xt[1] - xt[0] } else { 1.0 };
    let ystep = if yt.len() > 1 { yt[1] - yt[0] } else { 1.0 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);

    let (bl, br, bt, bb) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r##"<rect x="{bl:.1}" y="{bt:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333333"/>"##, br - bl, bb - bt);
    for &t in &xt {
        let x = px(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{bb:.1}" x2="{x:.2}" y2="{:.1}" stroke="#333333"/>"##, bb + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, bb + 17.0, label(t, xstep));
        // penalty is affine in latency, so it shares the tick positions
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{bt:.1}" x2="{x:.2}" y2="{:.1}" stroke="#333333"/>"##, bt - 4.0);
        let _ = writeln!(s, r##"<text x="{x:.2}" y="{:.1}" text-anchor="middle" fill="#555555">{:.3}</text>"##, bt - 8.0, scale.penalty(t));
    }
    for &t in &yt {
        let y = py(t);
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.2}" x2="{bl:.1}" y2="{y:.2}" stroke="#333333"/>"##, bl - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, bl - 7.0, y + 4.0, label(t, ystep));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">latency (ms)</text>"#, (bl + br) / 2.0, H - 18.0);
    let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#555555">latency penalty</text>"##, (bl + br) / 2.0, bt - 24.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">PSNR loss (dB)</text>"#,
        (bt + bb) / 2.0,
        (bt + bb) / 2.0
    );
    if (y0..=y1).contains(&0.0) {
        let _ = writeln!(s, r##"<line x1="{bl:.1}" y1="{:.2}" x2="{br:.1}" y2="{:.2}" stroke="#bbbbbb" stroke-dasharray="3 3"/>"##, py(0.0), py(0.0));
    }
    let bx = px(base_latency_ms);
    let _ = writeln!(s, r##"<line x1="{bx:.2}" y1="{bt:.1}" x2="{bx:.2}" y2="{bb:.1}" stroke="#bbbbbb" stroke-dasharray="3 3"/>"##);
    let _ = writeln!(s, r##"<text x="{:.2}" y="{:.1}" fill="#777777">all-base</text>"##, bx - 44.0, bb - 6.0);

    let _ = writeln!(s, r##"<g fill="#9aa5b1">"##);
    for o in log {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, px(o.latency_ms), py(o.f1));
    }
    let _ = writeln!(s, "</g>");

    let mut pts: Vec<&Observation> = front.iter().collect();
    pts.sort_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms).then(a.order.cmp(&b.order)));
    let mut path = String::new();
    for (i, o) in pts.iter().enumerate() {
        let _ = write!(path, "{}{:.2},{:.2}", if i == 0 { "" } else { " " }, px(o.latency_ms), py(o.f1));
    }
    let _ = writeln!(s, r##"<polyline points="{path}" fill="none" stroke="#d1495b" stroke-width="1.5"/>"##);
    let _ = writeln!(s, r##"<g fill="#d1495b">"##);
    for o in &pts {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4"/>"#, px(o.latency_ms), py(o.f1));
    }
    let _ = writeln!(s, "</g>");

    let (sx, sy) = (px(selected.latency_ms), py(selected.f1));
    let _ = writeln!(s, r##"<circle cx="{sx:.2}" cy="{sy:.2}" r="8" fill="none" stroke="#00798c" stroke-width="2.5"/>"##);
    let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" fill="#00798c">selected</text>"##, sx + 11.0, sy - 9.0);

    let lx = br - 150.0;
    let _ = writeln!(s, r##"<circle cx="{lx:.1}" cy="{:.1}" r="3" fill="#9aa5b1"/>"##, bt + 14.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">evaluated ({})</text>"#, lx + 9.0, bt + 18.0, log.len());
    let _ = writeln!(s, r##"<circle cx="{lx:.1}" cy="{:.1}" r="4" fill="#d1495b"/>"##, bt + 30.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">Pareto front ({})</text>"#, lx + 9.0, bt + 34.0, front.len());
    s.push_str("</svg>\n");
    s
}
