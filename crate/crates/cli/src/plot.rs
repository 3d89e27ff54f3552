//! Static plot files: PR curves as SVG, attention maps as PNG.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use mgnm::autograd::Mat;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One step-shaped polyline per `(label, [(recall, precision)])` curve.
pub fn pr_curves_svg(title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (520.0, 400.0, 50.0);
    let (pw, ph) = (w - 2.0 * m - 110.0, h - 2.0 * m);
    let x = |r: f64| m + r.clamp(0.0, 1.0) * pw;
    let y = |p: f64| m + (1.0 - p.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, m + pw / 2.0, escape(title));
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#e5e5e5"/>"##,
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        );
        if i % 2 == 0 {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x(0.0) - 6.0, y(v) + 4.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, x(v), y(0.0) + 16.0);
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, m + pw / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {}) rotate(-90)" text-anchor="middle">precision</text>"#,
        m + ph / 2.0
    );

    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        let mut prev: Option<(f64, f64)> = None;
        for &(r, p) in pts {
            match prev {
                None => {
                    let _ = write!(path, "{:.2},{:.2}", x(r), y(p));
                }
                Some((pr, _)) => {
                    let _ = write!(path, " {:.2},{:.2} {:.2},{:.2}", x(pr), y(p), x(r), y(p));
                }
            }
            prev = Some((r, p));
        }
        let _ = writeln!(s, r#"<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        let ly = m + 14.0 * i as f64 + 6.0;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, m + pw + 12.0, ly - 8.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, m + pw + 26.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Perceptually ordered dark-to-bright ramp.
fn ramp(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 } * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders `values` with min-max normalisation, each cell a `scale`-pixel
/// square.
pub fn heatmap(values: &Mat, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = values.dim();
    RgbImage::from_fn(cols as u32 * scale, rows as u32 * scale, |px, py| {
        let v = values[((py / scale) as usize, (px / scale) as usize)];
        ramp((v - lo) / span)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let curves = vec![
            ("hold cup".to_string(), vec![(0.0, 1.0), (0.5, 1.0), (0.5, 0.5), (1.0, 0.5)]),
            ("<kick>".to_string(), vec![(0.0, 1.0), (1.0, 1.0)]),
        ];
        let svg = pr_curves_svg("test", &curves);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("&lt;kick&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn heatmap_scales_and_normalises() {
        let m = Mat::from_shape_vec((2, 3), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let img = heatmap(&m, 4);
        assert_eq!(img.dimensions(), (12, 8));
        assert_eq!(*img.get_pixel(0, 0), ramp(0.0));
        assert_eq!(*img.get_pixel(11, 7), ramp(1.0));
        assert_eq!(*img.get_pixel(3, 3), *img.get_pixel(0, 0));
        // constant input does not divide by zero
        let flat = heatmap(&Mat::from_elem((2, 2), 3.0), 1);
        assert_eq!(*flat.get_pixel(1, 1), ramp(0.0));
    }
}
