//! Minimal SVG charts for training curves and per-level scores.

use std::fmt::Write;

use crate::metrics::MetricsReport;
use crate::train::TrainReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, WIDTH / 2.0);
    let _ = writeln!(
        out,
        r#"<path d="M{MARGIN} {MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        HEIGHT - MARGIN,
        WIDTH - MARGIN
    );
}

/// Log-scale loss curves, one polyline per series. Non-positive values are
/// dropped from the plot.
pub fn loss_curve_svg(report: &TrainReport) -> String {
    let series: [(&str, &[f64]); 4] = [
        ("total", &report.total),
        ("l_h", &report.l_h),
        ("l_ins", &report.l_ins),
        ("l_part", &report.l_part),
    ];
    let positive = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|v| *v > 0.0 && v.is_finite());
    let (lo, hi) = positive.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.log10()), hi.max(v.log10())));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = report.total.len().max(2) as f64 - 1.0;
    let mut out = String::new();
    header(&mut out, "training loss (log10)");
    for (k, (name, values)) in series.iter().enumerate() {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0 && v.is_finite())
            .map(|(i, v)| {
                let x = MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / n;
                let y = HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v.log10() - lo) / span;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        if !points.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}"/>"#,
                points.join(" "),
                COLORS[k]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{}">{name}</text>"#,
            WIDTH - MARGIN - 60.0,
            MARGIN + 16.0 * k as f64,
            COLORS[k]
        );
    }
    if lo.is_finite() {
        let _ = writeln!(out, r#"<text x="4" y="{}">{hi:.1}</text>"#, MARGIN + 4.0);
        let _ = writeln!(out, r#"<text x="4" y="{}">{lo:.1}</text>"#, HEIGHT - MARGIN);
    }
    out.push_str("</svg>\n");
    out
}

/// Bars of mIoU per level on a 0..1 axis.
pub fn level_miou_svg(report: &MetricsReport) -> String {
    let mut out = String::new();
    header(&mut out, "mIoU per level");
    let slots = report.levels.len().max(1) as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / slots;
    for (k, level) in report.levels.iter().enumerate() {
        let h = (HEIGHT - 2.0 * MARGIN) * level.miou.clamp(0.0, 1.0);
        let x = MARGIN + slot * k as f64 + slot * 0.2;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            HEIGHT - MARGIN - h,
            slot * 0.6,
            COLORS[k % COLORS.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">level {} ({:.3})</text>"#,
            x + slot * 0.3,
            HEIGHT - MARGIN + 16.0,
            level.level,
            level.miou
        );
    }
    out.push_str("</svg>\n");
    out
}
