//! Static SVG histograms.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlaid histograms of every series over `[lo, hi]` with `bins` bins.
pub fn histogram(title: &str, x_label: &str, series: &[Series], lo: f64, hi: f64, bins: usize) -> String {
    let counts: Vec<Vec<usize>> = series.iter().map(|s| wsl_core::downstream::histogram(s.values, lo, hi, bins)).collect();
    let ymax = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let bw = pw / bins.max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    for (k, c) in counts.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (i, &n) in c.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let h = n as f64 / ymax * ph;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5" stroke="{color}"/>"#,
                LEFT + i as f64 * bw,
                TOP + ph - h,
                bw,
                h
            );
        }
    }
    let (x0, y0) = (LEFT, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, LEFT + pw);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    for t in 0..=5 {
        let f = t as f64 / 5.0;
        let x = LEFT + f * pw;
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{:.2}</text>"#, y0 + 18.0, lo + f * (hi - lo));
        let y = y0 - f * ph;
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{:.1}</text>"#, x0 - 8.0, y + 4.0, f * ymax);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, esc(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">count</text>"#, TOP + ph / 2.0, TOP + ph / 2.0);
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let y = TOP + 8.0 + 18.0 * k as f64;
        let x = LEFT + pw - 150.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{color}" fill-opacity="0.5" stroke="{color}"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{} (n={})</text>"#, x + 18.0, y + 10.0, esc(ser.label), ser.values.len());
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_bars_and_legend() {
        let a = [0.1, 0.2, 0.2, 0.9];
        let b = [0.5];
        let svg = histogram("acc <test>", "accuracy", &[Series { label: "original", values: &a }, Series { label: "generated", values: &b }], 0.0, 1.0, 10);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("original (n=4)") && svg.contains("generated (n=1)"));
        assert!(svg.contains("acc &lt;test&gt;"));
        assert_eq!(svg.matches("fill-opacity=\"0.5\"").count(), 4 + 2);
    }
}
