//! Minimal SVG line charts with shaded bands.

use std::fmt::Write as _;

/// One curve: mean per epoch and an optional half-width for the band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub mean: Vec<f64>,
    pub band: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 420.0;
const H: f64 = 300.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 45.0); // left, right, top, bottom

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|s| span / s <= count as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

fn render_panel(svg: &mut String, panel: &Panel, x0: f64) {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (W - ml - mr, H - mt - mb);
    let epochs = panel.series.iter().map(|s| s.mean.len()).max().unwrap_or(0).max(2);
    let finite = |v: f64| v.is_finite().then_some(v);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &panel.series {
        for (i, &m) in s.mean.iter().enumerate() {
            let b = s.band.as_ref().and_then(|b| b.get(i).copied().and_then(finite)).unwrap_or(0.0);
            if let Some(m) = finite(m) {
                lo = lo.min(m - b);
                hi = hi.max(m + b);
            }
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let px = |e: usize| x0 + ml + pw * e as f64 / (epochs - 1) as f64;
    let py = |v: f64| mt + ph * (1.0 - (v - lo) / (hi - lo));

    let _ = writeln!(svg, r#"<g class="panel">"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{:.2}" y="{mt:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#444"/>"##,
        x0 + ml
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        x0 + ml + pw / 2.0,
        escape(&panel.title)
    );
    for t in nice_ticks(lo, hi, 5) {
        let y = py(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"##,
            x0 + ml,
            x0 + ml + pw,
            x0 + ml - 4.0,
            y + 3.0,
            format_tick(t)
        );
    }
    for e in nice_ticks(1.0, epochs as f64, 6) {
        let x = px(e as usize - 1);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            mt + ph + 14.0,
            e
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">epoch</text>"#,
        x0 + ml + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 + 14.0,
        mt + ph / 2.0,
        x0 + 14.0,
        mt + ph / 2.0,
        escape(&panel.y_label)
    );

    for (k, s) in panel.series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<(usize, f64, f64)> = s
            .mean
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| {
                let b = s.band.as_ref().map_or(Some(0.0), |b| b.get(i).copied().and_then(finite))?;
                finite(m).map(|m| (i, m, b))
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        if s.band.is_some() {
            let upper = points.iter().map(|&(i, m, b)| format!("{:.2},{:.2}", px(i), py(m + b)));
            let lower = points.iter().rev().map(|&(i, m, b)| format!("{:.2},{:.2}", px(i), py(m - b)));
            let all: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
                all.join(" ")
            );
        }
        let line: Vec<String> = points.iter().map(|&(i, m, _)| format!("{:.2},{:.2}", px(i), py(m))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = mt + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="10" fill="{colour}" text-anchor="end">{}</text>"#,
            x0 + ml + pw - 6.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</g>");
}

fn format_tick(t: f64) -> String {
    if t == 0.0 {
        "0".into()
    } else if t.abs() >= 1e4 || t.abs() < 1e-3 {
        format!("{t:.1e}")
    } else {
        let s = format!("{t:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Panels laid out left to right in one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let width = W * panels.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{H}" viewBox="0 0 {width} {H}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut svg, p, W * i as f64);
    }
    svg.push_str("</svg>\n");
    svg
}
