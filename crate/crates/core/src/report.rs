//! Static SVG plots of loss curves, precision-recall curves and the method
//! grid.

use std::fmt::Write as _;

use crate::eval::{match_detections, GtTriplet, ScoredTriplet};
use crate::experiment::AblationRow;
use crate::losses::LoggedStep;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn axes(out: &mut String, (x0, x1, y0, y1): (f64, f64, f64, f64)) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0 + 8.0, HEIGHT - MARGIN);
    let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = l + f * (r - l);
        let y = b - f * (b - t);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, b + 16.0, tick(x0 + f * (x1 - x0)));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, y + 4.0, tick(y0 + f * (y1 - y0)));
        let _ = writeln!(out, r##"<path d="M{l} {y:.1} L{r} {y:.1}" stroke="#ddd"/>"##);
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn project((x0, x1, y0, y1): (f64, f64, f64, f64), (x, y): (f64, f64)) -> (f64, f64) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0 + 8.0, HEIGHT - MARGIN);
    (l + (x - x0) / (x1 - x0) * (r - l), b - (y - y0) / (y1 - y0) * (b - t))
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN / 2.0 + 20.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN / 2.0 - 150.0;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{c}"/>"#, y - 9.0);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

/// Line chart with fixed axis ranges when `fixed` is given.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], fixed: Option<(f64, f64, f64, f64)>) -> String {
    let b = fixed.unwrap_or_else(|| bounds(series));
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel);
    axes(&mut out, b);
    for (i, s) in series.iter().enumerate() {
        let mut d = String::new();
        for (k, &p) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).enumerate() {
            let (x, y) = project(b, p);
            let _ = write!(d, "{}{x:.1} {y:.1} ", if k == 0 { "M" } else { "L" });
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#,
            d.trim_end(),
            COLORS[i % COLORS.len()]
        );
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Averages consecutive blocks so that at most `max_points` remain.
pub fn block_means(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    let block = points.len().div_ceil(max_points.max(1)).max(1);
    points
        .chunks(block)
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

/// Original, re-composed and batch loss per step, block-averaged.
pub fn loss_plot(rows: &[LoggedStep]) -> String {
    let pick = |f: fn(&LoggedStep) -> f64, name: &str| Series {
        name: name.into(),
        points: block_means(&rows.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>(), 200),
    };
    let series = vec![pick(|r| r.original, "L_orig"), pick(|r| r.recomposed, "L_compo"), pick(|r| r.batch, "L_batch")];
    line_chart("Training loss", "step", "loss", &series, None)
}

/// Precision-recall curve over all categories pooled, one point per
/// detection in descending score order.
pub fn pooled_pr_curve(dets: &[ScoredTriplet], gts: &[GtTriplet], num_categories: usize) -> Vec<(f64, f64)> {
    let mut flagged: Vec<(f64, bool)> = Vec::with_capacity(dets.len());
    for c in 0..num_categories {
        let mut d: Vec<ScoredTriplet> = dets.iter().filter(|t| t.category == c).cloned().collect();
        let g: Vec<GtTriplet> = gts.iter().filter(|t| t.category == c).cloned().collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        let flags = match_detections(&d, &g);
        flagged.extend(d.iter().zip(flags).map(|(t, f)| (t.score, f)));
    }
    flagged.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = gts.iter().filter(|g| g.category < num_categories).count().max(1) as f64;
    let mut tp = 0usize;
    flagged
        .iter()
        .enumerate()
        .map(|(i, &(_, f))| {
            tp += f as usize;
            (tp as f64 / n, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

pub fn pr_plot(curves: Vec<Series>) -> String {
    let curves: Vec<Series> = curves
        .into_iter()
        .map(|s| Series {
            name: s.name,
            points: block_means(&s.points, 400),
        })
        .collect();
    line_chart("Precision-recall (all categories)", "recall", "precision", &curves, Some((0.0, 1.0, 0.0, 1.0)))
}

/// Grouped bars of Full / Rare / Non-Rare mAP per method with ±1 std whiskers.
pub fn ablation_plot(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    header(&mut out, "mAP per method", "method", "mAP (%)");
    let top = rows
        .iter()
        .flat_map(|r| [r.full, r.rare, r.nonrare])
        .flatten()
        .map(|m| 100.0 * (m.mean + m.std))
        .fold(1.0, f64::max);
    let b = (0.0, rows.len().max(1) as f64, 0.0, top * 1.1);
    axes(&mut out, b);
    for (i, r) in rows.iter().enumerate() {
        for (j, m) in [r.full, r.rare, r.nonrare].into_iter().enumerate() {
            let Some(m) = m else { continue };
            let x = i as f64 + 0.15 + 0.25 * j as f64;
            let (px, py) = project(b, (x, 100.0 * m.mean));
            let (px2, base) = project(b, (x + 0.22, 0.0));
            let _ = writeln!(
                out,
                r#"<rect x="{px:.1}" y="{py:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                px2 - px,
                base - py,
                COLORS[j]
            );
            let (cx, hi) = project(b, (x + 0.11, 100.0 * (m.mean + m.std)));
            let (_, lo) = project(b, (x + 0.11, 100.0 * (m.mean - m.std).max(0.0)));
            let _ = writeln!(out, r#"<path d="M{cx:.1} {lo:.1} L{cx:.1} {hi:.1}" stroke="black"/>"#);
        }
        let (lx, ly) = project(b, (i as f64 + 0.5, 0.0));
        let _ = writeln!(
            out,
            r#"<text x="{lx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            ly + 30.0,
            escape(&r.method.label())
        );
    }
    legend(&mut out, &["Full", "Rare", "Non-Rare"]);
    out.push_str("</svg>\n");
    out
}
