//! Static SVG bar chart of per-layer std; selected layers get a star.

use std::fmt::Write as _;

use saft_core::SensitivityReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 72.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Five-pointed star centred at `(cx, cy)`.
fn star(cx: f64, cy: f64, r: f64) -> String {
    let mut pts = Vec::with_capacity(10);
    for i in 0..10 {
        let radius = if i % 2 == 0 { r } else { r * 0.45 };
        let a = std::f64::consts::PI * (i as f64) / 5.0 - std::f64::consts::FRAC_PI_2;
        pts.push(format!("{:.2},{:.2}", cx + radius * a.cos(), cy + radius * a.sin()));
    }
    format!(r##"<polygon class="star" points="{}" fill="#d62728"/>"##, pts.join(" "))
}

/// Renders bars for the noise-eligible layers in layer order.
pub fn sensitivity_svg(report: &SensitivityReport, title: &str) -> String {
    let layers: Vec<_> = report.layers().iter().filter(|l| l.eligible).collect();
    let max = layers.iter().map(|l| l.std).fold(0.0_f64, f64::max);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base_y = MARGIN_TOP + plot_h;
    let slot = plot_w / layers.len().max(1) as f64;
    let bar_w = slot * 0.6;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{base_y:.2}" x2="{:.2}" y2="{base_y:.2}" stroke="black"/>"#,
        WIDTH - MARGIN_RIGHT
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{base_y:.2}" stroke="black"/>"#
    );
    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let y = base_y - frac * plot_h;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            max * frac
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">std of output difference</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    for (i, l) in layers.iter().enumerate() {
        let h = if max > 0.0 { l.std / max * plot_h } else { 0.0 };
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let cx = x + bar_w / 2.0;
        let selected = report.selected().contains(&l.id);
        let fill = if selected { "#1f77b4" } else { "#aec7e8" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{fill}"><title>{} (layer {}): {}</title></rect>"#,
            base_y - h,
            escape(&l.id),
            l.index,
            l.std
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="end" transform="rotate(-45 {cx:.2} {:.2})">{}</text>"#,
            base_y + 14.0,
            base_y + 14.0,
            escape(&l.id)
        );
        if selected {
            let _ = writeln!(s, "{}", star(cx, base_y - h - 10.0, 7.0));
        }
    }
    s.push_str("</svg>\n");
    s
}
