//! Self-contained SVG output: trajectory frames and a per-floe PCC chart.

use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::dem::{FloeSystem, SimState, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("step range {start}..{end} outside trajectory of {len} states")]
    RangeOutOfBounds { start: usize, end: usize, len: usize },
    #[error("stride must be positive")]
    ZeroStride,
}

/// Colours cycle through this list by floe index.
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn floe_color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStyle {
    pub width_px: f64,
    pub height_px: f64,
    pub margin_px: f64,
    pub wall_px: f64,
}

impl Default for FrameStyle {
    fn default() -> Self {
        Self {
            width_px: 800.0,
            height_px: 160.0,
            margin_px: 20.0,
            wall_px: 6.0,
        }
    }
}

/// Pixel geometry of one frame, shared by the SVG writer and audits.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGeometry {
    pub scale: f64,
    pub baseline_y: f64,
    pub left_wall_x: f64,
    pub right_wall_x: f64,
    /// `(centre x, radius)` per floe, in pixels.
    pub circles: Vec<(f64, f64)>,
}

impl FrameGeometry {
    pub fn new(state: &SimState, system: &FloeSystem, style: &FrameStyle) -> Self {
        let scale = (style.width_px - 2.0 * style.margin_px) / system.domain_width();
        let to_px = |x: f64| style.margin_px + (x - system.domain_left()) * scale;
        Self {
            scale,
            baseline_y: style.height_px / 2.0,
            left_wall_x: to_px(system.domain_left()),
            right_wall_x: to_px(system.domain_right()),
            circles: state
                .x
                .iter()
                .zip(system.radius())
                .map(|(x, r)| (to_px(*x), r * scale))
                .collect(),
        }
    }

    /// Largest pixel overlap between neighbouring circles or a circle and a wall.
    pub fn max_overlap_px(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for w in self.circles.windows(2) {
            worst = worst.max(w[0].0 + w[0].1 - (w[1].0 - w[1].1));
        }
        if let (Some(first), Some(last)) = (self.circles.first(), self.circles.last()) {
            worst = worst.max(self.left_wall_x - (first.0 - first.1));
            worst = worst.max(last.0 + last.1 - self.right_wall_x);
        }
        worst
    }
}

pub fn render_frame(state: &SimState, system: &FloeSystem, dt: f64, style: &FrameStyle) -> String {
    let g = FrameGeometry::new(state, system, style);
    let (w, h) = (style.width_px, style.height_px);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#eef4fb"/>"##);
    for x in [g.left_wall_x - style.wall_px, g.right_wall_x] {
        let _ = writeln!(
            s,
            r##"<rect x="{x:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#333333"/>"##,
            style.margin_px,
            style.wall_px,
            h - 2.0 * style.margin_px
        );
    }
    for (i, (cx, r)) in g.circles.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.3}" cy="{:.3}" r="{r:.3}" fill="{}" fill-opacity="0.85"/>"#,
            g.baseline_y,
            floe_color(i)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="12">step {} t={:.6}</text>"#,
        style.margin_px,
        style.margin_px - 6.0,
        state.time_index,
        state.time_index as f64 * dt
    );
    s.push_str("</svg>\n");
    s
}

/// Frames for states `range` sampled every `stride`, keyed by state index.
pub fn render_frames(
    traj: &Trajectory,
    range: Range<usize>,
    stride: usize,
    style: &FrameStyle,
) -> Result<Vec<(usize, String)>, RenderError> {
    if stride == 0 {
        return Err(RenderError::ZeroStride);
    }
    if range.start >= range.end || range.end > traj.len() {
        return Err(RenderError::RangeOutOfBounds {
            start: range.start,
            end: range.end,
            len: traj.len(),
        });
    }
    Ok(range
        .step_by(stride)
        .map(|k| (k, render_frame(&traj.states[k], &traj.system, traj.dt, style)))
        .collect())
}

/// Bar chart of per-floe correlations on a [-1, 1] axis.
pub fn pcc_bar_chart(pcc: &[f64]) -> String {
    let (w, h, m) = (60.0 * pcc.len().max(1) as f64 + 80.0, 260.0, 40.0);
    let zero_y = m + (h - 2.0 * m) / 2.0;
    let unit = (h - 2.0 * m) / 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m:.1}" y1="{zero_y:.1}" x2="{:.1}" y2="{zero_y:.1}" stroke="black"/>"#,
        w - m / 2.0
    );
    for (label, v) in [("1", 1.0), ("-1", -1.0)] {
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-family="monospace" font-size="11">{label}</text>"#,
            zero_y - v * unit + 4.0
        );
    }
    for (i, p) in pcc.iter().enumerate() {
        let x = m + 10.0 + 60.0 * i as f64;
        let v = p.clamp(-1.0, 1.0);
        let (y, bh) = if v >= 0.0 { (zero_y - v * unit, v * unit) } else { (zero_y, -v * unit) };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y:.3}" width="40" height="{bh:.3}" fill="{}"/>"#,
            floe_color(i)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-family="monospace" font-size="10">{i}: {p:.3}</text>"#,
            h - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}
