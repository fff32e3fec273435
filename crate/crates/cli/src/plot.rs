use std::fmt::Write as _;

/// Loss components drawn by `report`.
pub const CURVE_COLUMNS: [&str; 5] = ["adv_g", "recon", "cycle", "intra", "ce"];

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 36.0;

/// One panel per series, stacked horizontally. Each series is `(name, xs, ys)`.
pub fn loss_curves_svg(title: &str, series: &[(&str, Vec<f64>, Vec<f64>)]) -> String {
    let width = series.len() as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 20.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<text x="{MARGIN}" y="18">{}</text>"#, escape(title)).unwrap();
    for (i, (name, xs, ys)) in series.iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN + 10.0;
        writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x0 + 4.0, y0 - 4.0, escape(name)).unwrap();
        if xs.is_empty() {
            continue;
        }
        let (xmin, xmax) = bounds(xs);
        let (ymin, ymax) = bounds(ys);
        let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin).max(1e-12) * PANEL_W;
        let sy = |y: f64| y0 + PANEL_H - (y - ymin) / (ymax - ymin).max(1e-12) * PANEL_H;
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}">{ymax:.4}</text><text x="{}" y="{}">{ymin:.4}</text>"#,
            x0 + 4.0,
            y0 + 14.0,
            x0 + 4.0,
            y0 + PANEL_H - 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Number of points in the `i`-th polyline of an SVG produced above.
#[cfg(test)]
pub fn polyline_points(svg: &str, i: usize) -> Option<usize> {
    let line = svg.lines().filter(|l| l.starts_with("<polyline")).nth(i)?;
    let start = line.find("points=\"")? + 8;
    let end = line[start..].find('"')? + start;
    Some(line[start..end].split_whitespace().count())
}
