//! Minimal deterministic SVG emission: loss curves and metric bars.

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Polyline chart; one series per (label, points) pair.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let width = 720.0;
    let height = 400.0;
    let margin = 50.0;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (_, points) in series {
        for &(x, y) in points {
            xs.push(x);
            ys.push(y);
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let sx = |x: f64| margin + (x - x_min) / (x_max - x_min).max(1e-12) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - y_min) / (y_max - y_min).max(1e-12) * (height - 2.0 * margin);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        title
    ));
    out.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        width - 2.0 * margin,
        height - 2.0 * margin
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"start\">{}</text>\n",
        margin,
        height - margin + 16.0,
        fmt(x_min)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        width - margin,
        height - margin + 16.0,
        fmt(x_max)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        margin - 6.0,
        height - margin,
        fmt(y_min)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        margin - 6.0,
        margin + 10.0,
        fmt(y_max)
    ));
    for (i, (label, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> =
            points.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            width - margin + 4.0,
            margin + 16.0 * i as f64 + 12.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart with error whiskers: one panel per metric, one bar per
/// arm. `panels` holds (metric name, [(arm, mean, sd)]).
pub fn bar_panels(title: &str, panels: &[(String, Vec<(String, f64, f64)>)]) -> String {
    let panel_h = 180.0;
    let width = 720.0;
    let height = 40.0 + panel_h * panels.len() as f64;
    let margin = 60.0;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        title
    ));
    for (p, (metric, bars)) in panels.iter().enumerate() {
        let top = 40.0 + panel_h * p as f64;
        let plot_h = panel_h - 50.0;
        let max_val = bars
            .iter()
            .map(|&(_, m, s)| m + s)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        out.push_str(&format!(
            "<text x=\"{margin}\" y=\"{}\" font-size=\"13\">{metric}</text>\n",
            top + 14.0
        ));
        let bar_w = ((width - 2.0 * margin) / bars.len() as f64 * 0.6).min(80.0);
        for (i, (arm, mean, sd)) in bars.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let cx = margin + (width - 2.0 * margin) * (i as f64 + 0.5) / bars.len() as f64;
            let h = mean / max_val * plot_h;
            let y = top + 20.0 + (plot_h - h);
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>\n",
                fmt(cx - bar_w / 2.0),
                fmt(y),
                fmt(bar_w),
                fmt(h)
            ));
            if *sd > 0.0 {
                let e_top = top + 20.0 + (plot_h - (mean + sd) / max_val * plot_h);
                let e_bot = top + 20.0 + (plot_h - (mean - sd).max(0.0) / max_val * plot_h);
                out.push_str(&format!(
                    "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#333\"/>\n",
                    fmt(cx),
                    fmt(e_top),
                    fmt(e_bot)
                ));
            }
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{arm}</text>\n",
                fmt(cx),
                top + 20.0 + plot_h + 14.0
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
                fmt(cx),
                fmt(y - 4.0),
                format!("{mean:.4}")
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_well_formed() {
        let series = vec![
            ("a".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)]),
            ("b".to_string(), vec![(0.0, 0.9), (1.0, 0.7)]),
        ];
        let a = line_chart("loss", &series);
        let b = line_chart("loss", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("polyline"));
        assert!(a.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bar_panels_render_every_arm() {
        let panels = vec![(
            "rsna_score".to_string(),
            vec![("scratch".to_string(), 0.9, 0.05), ("voco".to_string(), 0.7, 0.03)],
        )];
        let svg = bar_panels("metrics", &panels);
        assert!(svg.contains("scratch"));
        assert!(svg.contains("voco"));
        assert!(svg.contains("rect"));
    }
}
