//! Minimal SVG rendering of one scored target window.

use std::fmt::Write;

use crate::anomaly::{region_for, AnomalyReport};
use crate::conformal::ConformalModel;
use crate::error::Result;
use crate::forecaster::Forecaster;
use crate::series::MultivariateSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub title: String,
    pub y: Vec<f64>,
    pub eqr_lower: Vec<f64>,
    pub eqr_upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub a_gaussian: f64,
    pub a_student: f64,
    pub threshold: f64,
}

impl PlotData {
    pub fn for_report(
        series: &MultivariateSeries,
        channel_name: &str,
        forecaster: &dyn Forecaster,
        cp: &ConformalModel,
        report: &AnomalyReport,
    ) -> Result<Self> {
        let (y, region, (eqr_lower, eqr_upper)) = region_for(series, forecaster.spec(), forecaster, cp)?;
        Ok(Self {
            title: format!("{} / {}", series.series_id(), channel_name),
            y,
            eqr_lower,
            eqr_upper,
            lower: region.lower,
            upper: region.upper,
            a_gaussian: report.a_gaussian,
            a_student: report.a_student,
            threshold: report.threshold,
        })
    }
}

const W: f64 = 820.0;
const H: f64 = 340.0;
const PAD: f64 = 40.0;
const PANEL_W: f64 = 600.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(xs: &[f64], ys: &[f64]) -> String {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Target values, the raw quantile band (dashed), the conformalised band
/// and two score bars against the threshold.
pub fn render_svg(p: &PlotData) -> String {
    let t = p.y.len();
    let all = p.y.iter().chain(&p.eqr_lower).chain(&p.eqr_upper).chain(&p.lower).chain(&p.upper);
    let (mut lo, mut hi) = all
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let margin = 0.05 * (hi - lo);
    let (lo, hi) = (lo - margin, hi + margin);
    let sx = |i: usize| PAD + PANEL_W * i as f64 / (t.max(2) - 1) as f64;
    let sy = |v: f64| {
        let v = v.clamp(lo, hi);
        H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo)
    };
    let xs: Vec<f64> = (0..t).map(sx).collect();
    let map = |v: &[f64]| v.iter().map(|&x| sy(x)).collect::<Vec<_>>();
    let band = |l: &[f64], u: &[f64]| {
        let mut pts = polyline(&xs, &map(u));
        let rev_x: Vec<f64> = xs.iter().rev().copied().collect();
        let rev_l: Vec<f64> = l.iter().rev().map(|&x| sy(x)).collect();
        pts.push(' ');
        pts.push_str(&polyline(&rev_x, &rev_l));
        pts
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="22" font-size="14">{}</text>"#, escape(&p.title));
    let _ = writeln!(
        s,
        r##"<polygon points="{}" fill="#4c78a8" fill-opacity="0.25" stroke="none"/>"##,
        band(&p.lower, &p.upper)
    );
    for v in [&p.eqr_lower, &p.eqr_upper] {
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#555" stroke-dasharray="5,4"/>"##,
            polyline(&xs, &map(v))
        );
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="1.5"/>"##,
        polyline(&xs, &map(&p.y))
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{PANEL_W}" height="{}" fill="none" stroke="#999"/>"##,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{lo:.3}</text>"#, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{hi:.3}</text>"#, PAD - 4.0);

    let bx = PAD + PANEL_W + 40.0;
    let bh = H - 2.0 * PAD;
    let by = |a: f64| H - PAD - bh * a.clamp(0.0, 1.0);
    for (i, (label, a)) in [("a_G", p.a_gaussian), ("a_S", p.a_student)].into_iter().enumerate() {
        let x = bx + 50.0 * i as f64;
        let color = if a > p.threshold { "#d62728" } else { "#4c78a8" };
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{:.2}" width="30" height="{:.2}" fill="{color}"/>"#,
            by(a),
            H - PAD - by(a)
        );
        let _ = writeln!(s, r#"<text x="{x}" y="{}">{label}</text>"#, H - PAD + 14.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{:.2}">{a:.3}</text>"#, by(a) - 4.0);
    }
    let ty = by(p.threshold);
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{ty:.2}" x2="{}" y2="{ty:.2}" stroke="black" stroke-dasharray="3,3"/>"##,
        bx - 6.0,
        bx + 86.0
    );
    s.push_str("</svg>\n");
    s
}
