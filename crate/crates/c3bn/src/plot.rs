//! Static SVG rendering of one video's T-CAS, ground truth, and proposals.

use std::fmt::Write as _;

use c3bn_core::infer::Proposal;
use c3bn_core::synth::GroundTruthSegment;
use c3bn_core::Tensor2D;

const LEFT: f64 = 60.0;
const TOP: f64 = 20.0;
const PLOT_W: f64 = 800.0;
const PLOT_H: f64 = 200.0;
const LANE_H: f64 = 14.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Pixel mapping shared by every element of one figure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mapping {
    pub px_per_second: f64,
}

impl Mapping {
    pub fn for_duration(duration: f64) -> Self {
        Self {
            px_per_second: PLOT_W / duration.max(1e-9),
        }
    }

    pub fn x(&self, seconds: f64) -> f64 {
        LEFT + seconds * self.px_per_second
    }

    pub fn y(&self, score: f64) -> f64 {
        TOP + (1.0 - score.clamp(0.0, 1.0)) * PLOT_H
    }
}

fn color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `tcas` is `T × C`; only `classes` are drawn. Curves are sampled at snippet
/// centres.
pub fn render(
    video_id: &str,
    tcas: &Tensor2D,
    snippet_duration: f64,
    classes: &[usize],
    gts: &[GroundTruthSegment],
    proposals: &[Proposal],
) -> String {
    let duration = tcas.rows() as f64 * snippet_duration;
    let m = Mapping::for_duration(duration);
    let lanes = classes.len().max(1) as f64;
    let gt_top = TOP + PLOT_H + 20.0;
    let prop_top = gt_top + lanes * LANE_H + 20.0;
    let height = prop_top + lanes * LANE_H + 20.0;
    let width = LEFT + PLOT_W + 20.0;
    let lane = |c: usize| classes.iter().position(|&k| k == c);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = writeln!(
        s,
        "<!-- pixel mapping: x_px = {LEFT} + t_seconds * {:.6}; y_px = {TOP} + (1 - score) * {PLOT_H}; duration = {duration:.6} s -->",
        m.px_per_second
    );
    let _ = writeln!(s, "<title>T-CAS of {}</title>", escape(video_id));
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"none\" stroke=\"#888\"/>"
    );
    for (i, &c) in classes.iter().enumerate() {
        let pts: Vec<String> = (0..tcas.rows())
            .map(|t| {
                let centre = (t as f64 + 0.5) * snippet_duration;
                format!("{:.3},{:.3}", m.x(centre), m.y(tcas.get(t, c)))
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline class=\"tcas\" data-class=\"{c}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            color(c),
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"4\" y=\"{:.3}\" font-size=\"10\">class {c}</text>",
            gt_top + i as f64 * LANE_H + 10.0
        );
    }
    for g in gts {
        let Some(l) = lane(g.class_id) else { continue };
        let (x0, x1) = (m.x(g.t_start), m.x(g.t_end));
        let _ = writeln!(
            s,
            "<rect class=\"gt\" data-class=\"{}\" x=\"{x0:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\" fill-opacity=\"0.35\"/>",
            g.class_id,
            gt_top + l as f64 * LANE_H,
            x1 - x0,
            LANE_H - 2.0,
            color(g.class_id)
        );
    }
    for p in proposals {
        let Some(l) = lane(p.class_id) else { continue };
        let (x0, x1) = (m.x(p.t_start), m.x(p.t_end));
        let _ = writeln!(
            s,
            "<rect class=\"proposal\" data-class=\"{}\" x=\"{x0:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\" fill-opacity=\"{:.3}\"/>",
            p.class_id,
            prop_top + l as f64 * LANE_H,
            x1 - x0,
            LANE_H - 2.0,
            color(p.class_id),
            p.score.clamp(0.05, 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
