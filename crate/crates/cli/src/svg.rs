//! Minimal static SVG line charts: axes, ticks, one or two curves, a small
//! legend. The output is deterministic — fixed canvas, fixed formatting —
//! so repeated runs with the same data are byte-identical.

/// One curve to draw.
pub struct Series<'a> {
    pub label: &'a str,
    pub times: &'a [f64],
    pub values: &'a [f64],
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 52.0;
const TICKS: usize = 5;
const COLORS: [&str; 2] = ["#1f6feb", "#d1242f"];

fn finite_bounds<'a>(
    series: &'a [Series<'a>],
    pick: impl Fn(&'a Series<'a>) -> &'a [f64],
) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &x in pick(s) {
            if x.is_finite() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    if lo > hi {
        // No finite data at all; draw an empty frame.
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 1.0, hi + 1.0);
    }
    (lo, hi)
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs();
    let text = if !(1e-3..1e5).contains(&magnitude) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    };
    // Trim trailing zeros of plain decimals ("1.500" → "1.5", "2.000" → "2").
    if text.contains('.') && !text.contains('e') {
        text.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        text
    }
}

/// Renders a complete SVG document for the given curves.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = finite_bounds(series, |s| s.times);
    let (mut y_lo, mut y_hi) = finite_bounds(series, |s| s.values);
    let pad = (y_hi - y_lo) * 0.05;
    y_lo -= pad;
    y_hi += pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let to_x = |t: f64| MARGIN_LEFT + (t - x_lo) / (x_hi - x_lo) * plot_w;
    let to_y = |v: f64| MARGIN_TOP + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    ));

    // Axes.
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;
    svg.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n",
        x0 + plot_w
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{:.1}\" x2=\"{x0:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n",
        MARGIN_TOP
    ));

    // Ticks and grid labels.
    for i in 0..TICKS {
        let frac = i as f64 / (TICKS - 1) as f64;
        let xv = x_lo + frac * (x_hi - x_lo);
        let xp = to_x(xv);
        svg.push_str(&format!(
            "  <line x1=\"{xp:.1}\" y1=\"{y0:.1}\" x2=\"{xp:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            y0 + 18.0,
            tick_label(xv)
        ));
        let yv = y_lo + frac * (y_hi - y_lo);
        let yp = to_y(yv);
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{yp:.1}\" x2=\"{x0:.1}\" y2=\"{yp:.1}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            x0 - 8.0,
            yp + 4.0,
            tick_label(yv)
        ));
    }

    // Axis labels.
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    ));

    // Curves.
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = s
            .times
            .iter()
            .zip(s.values)
            .filter(|(t, v)| t.is_finite() && v.is_finite())
            .map(|(&t, &v)| format!("{:.2},{:.2}", to_x(t), to_y(v)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
    }

    // Legend (only worth the ink with more than one curve).
    if series.len() > 1 {
        for (k, s) in series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let y = MARGIN_TOP + 14.0 + 16.0 * k as f64;
            let x = MARGIN_LEFT + plot_w - 150.0;
            svg.push_str(&format!(
                "  <line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
                 stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                x + 22.0
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>\n",
                x + 28.0,
                y + 4.0,
                escape(s.label)
            ));
        }
    }

    svg.push_str("</svg>\n");
    svg
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_wellformed_and_deterministic() {
        let times = [0.5, 1.0, 2.0, 4.0];
        let values = [10.0, 5.0, 7.0, 9.0];
        let series = [Series {
            label: "predicted",
            times: &times,
            values: &values,
        }];
        let a = line_chart("response", "time (s)", "value", &series);
        let b = line_chart("response", "time (s)", "value", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("<polyline"));
        assert!(a.matches("<text").count() >= 13);
    }

    #[test]
    fn two_series_get_distinct_colors_and_a_legend() {
        let times = [1.0, 2.0];
        let a = [1.0, 2.0];
        let b = [2.0, 1.0];
        let chart = line_chart(
            "cmp",
            "x",
            "y",
            &[
                Series {
                    label: "observed",
                    times: &times,
                    values: &a,
                },
                Series {
                    label: "predicted",
                    times: &times,
                    values: &b,
                },
            ],
        );
        assert!(chart.contains(COLORS[0]) && chart.contains(COLORS[1]));
        assert!(chart.contains("observed") && chart.contains("predicted"));
    }

    #[test]
    fn non_finite_samples_are_dropped_not_rendered() {
        let times = [1.0, 2.0, 3.0];
        let values = [1.0, f64::NAN, 3.0];
        let chart = line_chart(
            "gap",
            "x",
            "y",
            &[Series {
                label: "s",
                times: &times,
                values: &values,
            }],
        );
        assert!(!chart.contains("NaN"));
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(2.0), "2");
        assert_eq!(tick_label(1.5), "1.5");
        assert_eq!(tick_label(0.30000000000000004), "0.3");
        assert_eq!(tick_label(1.0e6), "1.00e6");
        assert!(tick_label(1.0e-5).contains('e'));
    }
}
