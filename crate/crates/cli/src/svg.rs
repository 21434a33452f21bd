//! Minimal SVG charts: grouped bars, heatmap grids and scatter/line plots.

use std::fmt::Write as _;

const PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];
const FONT: &str = "font-family=\"sans-serif\" font-size=\"11\"";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        w / 2.0,
        esc(title)
    );
    s
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) || !v.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * mag >= v {
            return m * mag;
        }
    }
    10.0 * mag
}

fn legend(s: &mut String, x: f64, y: f64, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\" {FONT}>{}</text>",
            yy - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            yy,
            esc(name)
        );
    }
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (left, top, bottom, right) = (60.0, 30.0, 70.0, 150.0);
    let group_w = (36.0 * series.len().max(1) as f64).max(60.0);
    let plot_w = group_w * categories.len().max(1) as f64;
    let plot_h = 260.0;
    let (w, h) = (left + plot_w + right, top + plot_h + bottom);
    let ymax = nice_max(
        series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max),
    );
    let y = |v: f64| top + plot_h * (1.0 - v / ymax);
    let mut s = open(w, h, title);
    axes(&mut s, left, top, plot_w, plot_h, y_label);
    for t in 0..=4 {
        let v = ymax * t as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" {FONT}>{}</text>",
            left - 4.0,
            y(v) + 4.0,
            fmt_tick(v)
        );
    }
    let bar_w = (group_w - 12.0) / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = left + group_w * c as f64 + 6.0;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                gx + bar_w * k as f64,
                y(v),
                bar_w,
                top + plot_h - y(v),
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-30 {:.1} {:.1})\" {FONT}>{}</text>",
            gx + group_w / 2.0,
            top + plot_h + 14.0,
            gx + group_w / 2.0,
            top + plot_h + 14.0,
            esc(cat)
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, left + plot_w + 16.0, top + 12.0, &names);
    s.push_str("</svg>\n");
    s
}

fn axes(s: &mut String, left: f64, top: f64, w: f64, h: f64, y_label: &str) {
    let _ = writeln!(
        s,
        "<path d=\"M{left:.1} {top:.1} V{:.1} H{:.1}\" stroke=\"black\" fill=\"none\"/>",
        top + h,
        left + w
    );
    let _ = writeln!(
        s,
        "<text transform=\"translate(14 {:.1}) rotate(-90)\" text-anchor=\"middle\" {FONT}>{}</text>",
        top + h / 2.0,
        esc(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Colour ramp from white to dark blue over `[lo, hi]`.
fn ramp(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(247.0, 8.0), mix(251.0, 48.0), mix(255.0, 107.0))
}

/// Grid of coloured cells with the value printed inside; `None` is blank.
pub fn heatmap(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<Option<f64>>],
) -> String {
    let cell = 44.0;
    let (left, top) = (80.0, 40.0);
    let (w, h) = (
        left + cell * col_labels.len() as f64 + 20.0,
        top + cell * row_labels.len() as f64 + 40.0,
    );
    let flat: Vec<f64> = values.iter().flatten().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = open(w, h, title);
    for (r, label) in row_labels.iter().enumerate() {
        let y = top + cell * r as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" {FONT}>{}</text>",
            left - 6.0,
            y + cell / 2.0 + 4.0,
            esc(label)
        );
        for (c, v) in values.get(r).into_iter().flatten().enumerate() {
            let x = left + cell * c as f64;
            let Some(v) = v.filter(|v| v.is_finite()) else {
                continue;
            };
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"white\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{}\" {FONT}>{v:.2}</text>",
                ramp(v, lo, hi),
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                if t > 0.55 { "white" } else { "black" }
            );
        }
    }
    for (c, label) in col_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" {FONT}>{}</text>",
            left + cell * c as f64 + cell / 2.0,
            top + cell * row_labels.len() as f64 + 16.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter plot with optional connecting lines per series. With `log_x`
/// the x axis is logarithmic and non-positive x values are dropped.
pub fn scatter(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    lines: bool,
    log_x: bool,
) -> String {
    let (left, top, plot_w, plot_h) = (60.0, 30.0, 420.0, 280.0);
    let (w, h) = (left + plot_w + 170.0, top + plot_h + 50.0);
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, p)| p.iter().copied())
        .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!log_x || x > 0.0))
        .collect();
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(x, _)| (a.min(tx(x)), b.max(tx(x))));
    if !(x1 > x0) {
        x0 = if x0.is_finite() { x0 - 0.5 } else { 0.0 };
        x1 = x0 + 1.0;
    }
    let ymax = nice_max(pts.iter().map(|p| p.1).fold(0.0, f64::max));
    let sx = |x: f64| left + plot_w * (tx(x) - x0) / (x1 - x0);
    let sy = |y: f64| top + plot_h * (1.0 - y / ymax);
    let mut s = open(w, h, title);
    axes(&mut s, left, top, plot_w, plot_h, y_label);
    for t in 0..=4 {
        let v = ymax * t as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" {FONT}>{}</text>",
            left - 4.0,
            sy(v) + 4.0,
            fmt_tick(v)
        );
    }
    for t in 0..=4 {
        let u = x0 + (x1 - x0) * t as f64 / 4.0;
        let v = if log_x { 10f64.powf(u) } else { u };
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" {FONT}>{}</text>",
            left + plot_w * t as f64 / 4.0,
            top + plot_h + 16.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" {FONT}>{}</text>",
        left + plot_w / 2.0,
        top + plot_h + 36.0,
        esc(x_label)
    );
    for (k, (_, p)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let p: Vec<(f64, f64)> = p
            .iter()
            .copied()
            .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!log_x || x > 0.0))
            .collect();
        if lines && p.len() > 1 {
            let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\"/>",
                d.join(" ")
            );
        }
        for &(x, y) in &p {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{colour}\"/>",
                sx(x),
                sy(y)
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, left + plot_w + 16.0, top + 12.0, &names);
    s.push_str("</svg>\n");
    s
}
