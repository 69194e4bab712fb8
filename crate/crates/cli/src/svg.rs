//! Minimal hand-written SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_lo: &str, y_hi: &str) {
    let _ = write!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    let _ = write!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_lo}</text>"#, PAD - 4.0, H - PAD);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_hi}</text>"#, PAD - 4.0, PAD + 4.0);
}

/// Line chart of `(x, y)` points; with `log_y`, nonpositive values are
/// clamped to the smallest positive one.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], log_y: bool) -> String {
    let mut s = header(title);
    let tf = |y: f64, floor: f64| if log_y { y.max(floor).log10() } else { y };
    let floor = points
        .iter()
        .map(|p| p.1)
        .filter(|&y| y > 0.0)
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    let floor = if floor.is_finite() { floor } else { 1e-300 };
    let ys: Vec<f64> = points.iter().map(|p| tf(p.1, floor)).collect();
    let (x_min, x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y_min, y_max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let label = |v: f64| if log_y { format!("1e{v:.0}") } else { format!("{v:.3}") };
    if points.is_empty() {
        axes(&mut s, x_label, y_label, "", "");
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, W / 2.0, H / 2.0);
    } else {
        axes(&mut s, x_label, y_label, &label(y_min), &label(y_max));
        let xr = if x_max > x_min { x_max - x_min } else { 1.0 };
        let yr = if y_max > y_min { y_max - y_min } else { 1.0 };
        let coords: Vec<String> = points
            .iter()
            .zip(&ys)
            .map(|(p, &y)| {
                let px = PAD + (p.0 - x_min) / xr * (W - 2.0 * PAD);
                let py = H - PAD - (y - y_min) / yr * (H - 2.0 * PAD);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = write!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, coords.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart with one bar per `(label, value)`.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    axes(&mut s, x_label, y_label, "0", &format!("{max}"));
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = if max > 0.0 { v / max * (H - 2.0 * PAD) } else { 0.0 };
        let x = PAD + i as f64 * slot;
        let _ = write!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="steelblue"><title>{}: {v}</title></rect>"#,
            x + 1.0,
            H - PAD - h,
            (slot - 2.0).max(1.0),
            escape(label)
        );
    }
    if let (Some(first), Some(last)) = (bars.first(), bars.last()) {
        let _ = write!(s, r#"<text x="{PAD}" y="{}">{}</text>"#, H - PAD + 14.0, escape(&first.0));
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, W - PAD, H - PAD + 14.0, escape(&last.0));
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of a square matrix of nonnegative entries, scaled to its max.
pub fn heatmap(title: &str, labels: &[String], values: &[Vec<f64>]) -> String {
    let mut s = header(title);
    let n = values.len().max(1) as f64;
    let side = (H - 2.0 * PAD).min(W - 2.0 * PAD) / n;
    let max = values.iter().flatten().copied().fold(0.0f64, f64::max);
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let shade = (255.0 * (1.0 - t)).round() as u8;
            let _ = write!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{side:.2}" height="{side:.2}" fill="rgb({shade},{shade},255)"><title>{} / {}: {v:e}</title></rect>"#,
                PAD + j as f64 * side,
                PAD + i as f64 * side,
                labels.get(i).map_or("", String::as_str),
                labels.get(j).map_or("", String::as_str)
            );
        }
    }
    let _ = write!(s, r#"<text x="{PAD}" y="{}">max {max:e}</text>"#, H - 16.0);
    s.push_str("</svg>\n");
    s
}
