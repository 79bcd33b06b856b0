//! Minimal SVG line charts: a median polyline over a shaded min-max band.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

pub struct Band<'a> {
    pub x: &'a [f64],
    pub median: &'a [f64],
    pub lo: &'a [f64],
    pub hi: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn band_chart(title: &str, x_label: &str, y_label: &str, band: &Band) -> String {
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = band.x.iter().filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (y0, y1) = band
        .lo
        .iter()
        .chain(band.hi)
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let sx = |v: f64| PAD + (v - x0) / span(x0, x1) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / span(y0, y1) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), H - PAD + 16.0),
        (x1, "end", sx(x1), H - PAD + 16.0),
        (y0, "end", PAD - 4.0, sy(y0)),
        (y1, "end", PAD - 4.0, sy(y1) + 10.0),
    ] {
        if v.is_finite() {
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="10">{v:.4}</text>"#);
        }
    }
    let idx: Vec<usize> = (0..band.x.len())
        .filter(|i| band.x[*i].is_finite() && band.lo[*i].is_finite() && band.hi[*i].is_finite() && band.median[*i].is_finite())
        .collect();
    if !idx.is_empty() {
        let mut poly = String::new();
        for i in &idx {
            let _ = write!(poly, "{:.2},{:.2} ", sx(band.x[*i]), sy(band.hi[*i]));
        }
        for i in idx.iter().rev() {
            let _ = write!(poly, "{:.2},{:.2} ", sx(band.x[*i]), sy(band.lo[*i]));
        }
        let _ = writeln!(s, r#"<polygon points="{}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#, poly.trim_end());
        let line: Vec<String> = idx.iter().map(|i| format!("{:.2},{:.2}", sx(band.x[*i]), sy(band.median[*i]))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, line.join(" "));
    }
    s.push_str("</svg>\n");
    s
}
