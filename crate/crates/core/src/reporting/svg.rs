//! Static SVG charts. No scripting, fixed size, deterministic output.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

/// Axes plus `ticks` horizontal gridlines from 0 to `y_max`.
fn axes(out: &mut String, y_max: f64, y_label: &str, x_label: &str) {
    let (x0, y0, y1) = (LEFT, H - BOTTOM, TOP);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            W - RIGHT,
            x0 - 6.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>",
        W - RIGHT
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    if !x_label.is_empty() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            (LEFT + W - RIGHT) / 2.0,
            H - 14.0,
            escape(x_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn nice_max(m: f64) -> f64 {
    if !(m > 0.0) || !m.is_finite() {
        1.0
    } else {
        m * 1.1
    }
}

/// One bar per `(label, value)`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let y_max = nice_max(bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max));
    axes(&mut out, y_max, y_label, "");
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    let plot_h = H - BOTTOM - TOP;
    for (i, (label, v)) in bars.iter().enumerate() {
        let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
        let h = plot_h * v / y_max;
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            H - BOTTOM - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()],
            x + slot * 0.35,
            H - BOTTOM + 16.0,
            escape(label),
            x + slot * 0.35,
            H - BOTTOM - h - 4.0,
            tick(v)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Polylines sharing one pair of axes; `y` starts at zero.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let points = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (x_min, x_max, y_max) = points.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(a, b, c), p| {
        (a.min(p.0), b.max(p.0), c.max(p.1))
    });
    let (x_min, x_max) = if x_min.is_finite() && x_max > x_min { (x_min, x_max) } else { (0.0, 1.0) };
    let y_max = nice_max(y_max);
    axes(&mut out, y_max, y_label, x_label);
    let sx = |x: f64| LEFT + (W - LEFT - RIGHT) * (x - x_min) / (x_max - x_min);
    let sy = |y: f64| H - BOTTOM - (H - BOTTOM - TOP) * y / y_max;
    for (x, label) in [(x_min, tick(x_min)), (x_max, tick(x_max))] {
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{label}</text>", sx(x), H - BOTTOM + 16.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>",
            path.join(" "),
            LEFT + 10.0,
            TOP + 14.0 * (i + 1) as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_has_one_rect_per_bar() {
        let svg = bar_chart("MSE <median>", "mse", &[("sft".into(), 0.2), ("ift".into(), 0.1), ("nan".into(), f64::NAN)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 4, "background plus three bars");
        assert!(svg.contains("MSE &lt;median&gt;"));
        assert_eq!(svg, bar_chart("MSE <median>", "mse", &[("sft".into(), 0.2), ("ift".into(), 0.1), ("nan".into(), f64::NAN)]));
    }

    #[test]
    fn line_chart_handles_degenerate_input() {
        let svg = line_chart("loss", "epoch", "loss", &[("a".into(), vec![(1.0, 2.0), (2.0, 1.0)]), ("b".into(), vec![])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        let empty = line_chart("x", "", "", &[]);
        assert!(empty.contains("</svg>"));
    }
}
