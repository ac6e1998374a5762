//! Minimal SVG line charts with shaded ±std bands.

use std::fmt::Write as _;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub mean: Vec<f64>,
    pub std: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub x: Vec<f64>,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Values are drawn on a log10 axis when every plotted value is positive and
/// they span more than two decades.
fn y_transform(panel: &Panel) -> (bool, f64, f64) {
    let mut all = Vec::new();
    for s in &panel.series {
        for (i, &m) in s.mean.iter().enumerate() {
            let d = s.std.as_ref().map_or(0.0, |v| v[i]);
            all.push(m);
            all.push(m + d);
            if m - d > 0.0 {
                all.push(m - d);
            }
        }
    }
    let finite: Vec<f64> = all.into_iter().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (false, 0.0, 1.0);
    }
    let log = lo > 0.0 && hi / lo > 100.0;
    let (lo, hi) = if log { (lo.log10(), hi.log10()) } else { (lo, hi) };
    if hi - lo < 1e-12 {
        (log, lo - 0.5, hi + 0.5)
    } else {
        (log, lo, hi)
    }
}

fn draw_panel(out: &mut String, panel: &Panel, f: &Frame) {
    let (log, ylo, yhi) = y_transform(panel);
    let xlo = panel.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut xhi = panel.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if xhi <= xlo {
        xhi = xlo + 1.0;
    }
    let floor = if log { 10f64.powf(ylo) } else { f64::NEG_INFINITY };
    let px = |x: f64| f.left + (x - xlo) / (xhi - xlo) * f.width;
    let py = |y: f64| {
        let y = if log { y.max(floor).log10() } else { y };
        f.top + f.height - (y - ylo) / (yhi - ylo) * f.height
    };

    writeln!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        f.left, f.top, f.width, f.height
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="15">{}</text>"#,
        f.left + f.width / 2.0,
        f.top - 12.0,
        escape(&panel.title)
    )
    .unwrap();
    for k in 0..=4 {
        let v = ylo + (yhi - ylo) * k as f64 / 4.0;
        let label = if log { format!("{:.2e}", 10f64.powf(v)) } else { format!("{v:.3}") };
        let y = f.top + f.height - f.height * k as f64 / 4.0;
        writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{label}</text>"##,
            f.left,
            f.left + f.width,
            f.left - 4.0,
            y + 4.0
        )
        .unwrap();
        let xv = xlo + (xhi - xlo) * k as f64 / 4.0;
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{:.0}</text>"#,
            px(xv),
            f.top + f.height + 16.0,
            xv
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        f.left + f.width / 2.0,
        f.top + f.height + 36.0,
        escape(&panel.x_label)
    )
    .unwrap();
    let (yx, yy) = (f.left - 58.0, f.top + f.height / 2.0);
    writeln!(
        out,
        r#"<text x="{yx:.1}" y="{yy:.1}" text-anchor="middle" font-size="13" transform="rotate(-90 {yx:.1} {yy:.1})">{}{}</text>"#,
        escape(&panel.y_label),
        if log { " (log)" } else { "" }
    )
    .unwrap();

    for (si, s) in panel.series.iter().enumerate() {
        if let Some(std) = &s.std {
            let mut d = String::new();
            for (i, &x) in panel.x.iter().enumerate() {
                write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(s.mean[i] + std[i])).unwrap();
            }
            for (i, &x) in panel.x.iter().enumerate().rev() {
                write!(d, "L{:.2},{:.2} ", px(x), py(s.mean[i] - std[i])).unwrap();
            }
            writeln!(out, r#"<path d="{}Z" fill="{}" fill-opacity="0.18" stroke="none"/>"#, d, s.color).unwrap();
        }
        let pts: Vec<String> = panel
            .x
            .iter()
            .zip(&s.mean)
            .map(|(&x, &m)| format!("{:.2},{:.2}", px(x), py(m)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            s.color
        )
        .unwrap();
        let ly = f.top + 16.0 + 18.0 * si as f64;
        writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="3"/><text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
            f.left + 10.0,
            f.left + 30.0,
            s.color,
            f.left + 36.0,
            ly + 4.0,
            escape(&s.label)
        )
        .unwrap();
    }
}

/// Renders panels side by side in a fixed 800×500 view box.
pub fn render(panels: &[Panel]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let n = panels.len().max(1) as f64;
    let slot = WIDTH / n;
    for (i, p) in panels.iter().enumerate() {
        let frame = Frame {
            left: slot * i as f64 + 80.0,
            top: 40.0,
            width: slot - 100.0,
            height: HEIGHT - 110.0,
        };
        draw_panel(&mut out, p, &frame);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(mean: Vec<f64>) -> Panel {
        Panel {
            title: "a < b".into(),
            x: (0..mean.len()).map(|i| i as f64).collect(),
            x_label: "t".into(),
            y_label: "MSE".into(),
            series: vec![Series {
                label: "train".into(),
                color: "#1f77b4",
                std: Some(vec![0.1; mean.len()]),
                mean,
            }],
        }
    }

    #[test]
    fn well_formed_document() {
        let svg = render(&[panel(vec![1.0, 2.0, 3.0])]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"viewBox="0 0 800 500""#));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<path").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn log_axis_for_wide_ranges() {
        let svg = render(&[panel(vec![1e-3, 1.0, 1e3]), panel(vec![5.0, 5.0])]);
        assert!(svg.contains("(log)"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
