//! Minimal SVG rendering for loss traces, dominance plots, factor heatmaps
//! and course overlays. Output is a pure function of the input.

use std::fmt::Write;

use subgoal_core::datagen::{Course, TaskPath};
use subgoal_core::{Matrix, Tensor3};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Svg {
            body: String::new(),
            width,
            height,
        }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            escape(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dash: bool) {
        let dash = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"{dash}/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        let mut p = String::new();
        for (x, y) in pts {
            let _ = write!(p, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
            p.trim_end()
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn frame(&mut self, x: f64, y: f64, w: f64, h: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panel geometry: data ranges mapped into a pixel box.
struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        let span = (self.xr.1 - self.xr.0).max(f64::MIN_POSITIVE);
        self.x0 + (x - self.xr.0) / span * self.w
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.yr.1 - self.yr.0).max(f64::MIN_POSITIVE);
        self.y0 + self.h - (y - self.yr.0) / span * self.h
    }
}

/// Line chart of several series over the iteration index. Values are drawn
/// on a log10 axis when `log_y` is set (non-positive values are skipped).
pub fn line_chart(title: &str, series: &[(&str, Vec<f64>)], log_y: bool) -> String {
    let mut svg = Svg::new(720.0, 420.0);
    let tf = |v: f64| if log_y { v.log10() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, ys)| {
            ys.iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite() && (!log_y || **v > 0.0))
                .map(|(i, v)| (i as f64, tf(*v)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut lo, mut hi) = all
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let xmax = series
        .iter()
        .map(|(_, v)| v.len())
        .max()
        .unwrap_or(1)
        .saturating_sub(1)
        .max(1) as f64;
    let panel = Panel {
        x0: 70.0,
        y0: 40.0,
        w: 500.0,
        h: 330.0,
        xr: (0.0, xmax),
        yr: (lo, hi),
    };
    svg.text(360.0, 24.0, 15.0, "middle", title);
    svg.frame(panel.x0, panel.y0, panel.w, panel.h);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let label = if log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
        svg.text(panel.x0 - 6.0, panel.py(v) + 4.0, 10.0, "end", &label);
        let x = xmax * k as f64 / 4.0;
        svg.text(
            panel.px(x),
            panel.y0 + panel.h + 16.0,
            10.0,
            "middle",
            &format!("{x:.0}"),
        );
    }
    svg.text(
        panel.x0 + panel.w / 2.0,
        panel.y0 + panel.h + 32.0,
        11.0,
        "middle",
        "iteration",
    );
    for (i, ((name, _), p)) in series.iter().zip(&pts).enumerate() {
        let mapped: Vec<(f64, f64)> = p.iter().map(|&(x, y)| (panel.px(x), panel.py(y))).collect();
        if !mapped.is_empty() {
            svg.polyline(&mapped, color(i), 1.5);
        }
        let ly = 50.0 + 18.0 * i as f64;
        svg.line(585.0, ly, 605.0, ly, color(i), false);
        svg.text(610.0, ly + 4.0, 11.0, "start", name);
    }
    svg.finish()
}

/// Stacked per-step factor shares of one trajectory, with true boundaries
/// dashed and predicted ones solid.
pub fn dominance(title: &str, g: &Matrix, truth: &[usize], predicted: &[usize]) -> String {
    let (j, t) = g.shape();
    let mut svg = Svg::new(760.0, 260.0);
    let panel = Panel {
        x0: 50.0,
        y0: 35.0,
        w: 600.0,
        h: 180.0,
        xr: (0.0, t.max(1) as f64),
        yr: (0.0, 1.0),
    };
    svg.text(380.0, 22.0, 14.0, "middle", title);
    let bar = panel.w / t.max(1) as f64;
    for c in 0..t {
        let mut acc = 0.0;
        for f in 0..j {
            let v = g[(f, c)];
            if v > 0.0 {
                let top = panel.py(acc + v);
                svg.rect(panel.px(c as f64), top, bar, panel.py(acc) - top, color(f));
            }
            acc += v;
        }
    }
    for &b in truth {
        svg.line(
            panel.px(b as f64),
            panel.y0,
            panel.px(b as f64),
            panel.y0 + panel.h,
            "black",
            true,
        );
    }
    for &b in predicted {
        svg.line(
            panel.px(b as f64),
            panel.y0 + panel.h,
            panel.px(b as f64),
            panel.y0 + panel.h + 8.0,
            "black",
            false,
        );
    }
    svg.frame(panel.x0, panel.y0, panel.w, panel.h);
    svg.text(
        panel.x0 + panel.w / 2.0,
        panel.y0 + panel.h + 26.0,
        11.0,
        "middle",
        "step",
    );
    for f in 0..j {
        let ly = 45.0 + 16.0 * f as f64;
        svg.rect(665.0, ly - 9.0, 12.0, 12.0, color(f));
        svg.text(682.0, ly + 1.0, 11.0, "start", &format!("factor {f}"));
    }
    svg.finish()
}

fn heat(v: f64, max: f64) -> String {
    let s = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let c = (255.0 * (1.0 - s)).round() as u8;
    format!("rgb({c},{c},255)")
}

fn heatmap(svg: &mut Svg, m: &Matrix, x0: f64, y0: f64, w: f64, h: f64, label: &str) {
    let (rows, cols) = m.shape();
    let max = m.max();
    let (cw, rh) = (w / cols.max(1) as f64, h / rows.max(1) as f64);
    for r in 0..rows {
        for c in 0..cols {
            svg.rect(x0 + c as f64 * cw, y0 + r as f64 * rh, cw, rh, &heat(m[(r, c)], max));
        }
    }
    svg.frame(x0, y0, w, h);
    svg.text(x0, y0 - 5.0, 11.0, "start", label);
}

/// Three panels: `H` for a window, each factor's pattern `O_j`, and the data
/// next to its reconstruction.
pub fn composite(title: &str, h: &Matrix, o: &Tensor3, x: &Matrix, xt: &Matrix) -> String {
    let j = o.factors();
    let mut svg = Svg::new(900.0, 520.0);
    svg.text(450.0, 20.0, 14.0, "middle", title);
    heatmap(&mut svg, h, 40.0, 50.0, 820.0, 24.0 * j as f64, "H (activations)");
    let top = 70.0 + 24.0 * j as f64;
    let pw = (820.0 - 10.0 * (j as f64 - 1.0)) / j as f64;
    for f in 0..j {
        heatmap(
            &mut svg,
            &o.factor_pattern(f),
            40.0 + f as f64 * (pw + 10.0),
            top,
            pw,
            120.0,
            &format!("O{f}"),
        );
    }
    let bottom = top + 150.0;
    let half = (520.0 - bottom - 30.0) / 2.0;
    heatmap(&mut svg, x, 40.0, bottom, 820.0, half, "X");
    heatmap(&mut svg, xt, 40.0, bottom + half + 20.0, 820.0, half, "X̃ = O ∗ H");
    svg.finish()
}

/// Reference paths with rollout traces on top.
pub fn course_overlay(course: &Course, rollouts: &[(&str, &[[f64; 3]])]) -> String {
    let mut svg = Svg::new(760.0, 420.0);
    let a = course.amplitude * 2.5;
    let panel = Panel {
        x0: 50.0,
        y0: 35.0,
        w: 600.0,
        h: 340.0,
        xr: (-5.0, course.width + 5.0),
        yr: (-a, a),
    };
    svg.text(380.0, 22.0, 14.0, "middle", "Driving course and rollouts");
    svg.frame(panel.x0, panel.y0, panel.w, panel.h);
    for (k, path) in [TaskPath::Yellow, TaskPath::Blue].into_iter().enumerate() {
        let pts: Vec<(f64, f64)> = (0..=200)
            .map(|i| {
                let x = course.width * i as f64 / 200.0;
                (panel.px(x), panel.py(course.path_y(path, x)))
            })
            .collect();
        svg.polyline(&pts, ["#e0c000", "#4060ff"][k], 6.0);
    }
    for c in course.crossings() {
        svg.line(panel.px(c), panel.y0, panel.px(c), panel.y0 + panel.h, "gray", true);
    }
    svg.line(
        panel.px(course.width),
        panel.y0,
        panel.px(course.width),
        panel.y0 + panel.h,
        "black",
        false,
    );
    for (i, (name, states)) in rollouts.iter().enumerate() {
        let pts: Vec<(f64, f64)> = states
            .iter()
            .map(|s| {
                (
                    panel.px(s[0].clamp(panel.xr.0, panel.xr.1)),
                    panel.py(s[1].clamp(-a, a)),
                )
            })
            .collect();
        svg.polyline(&pts, color(i + 3), 1.5);
        let ly = 50.0 + 18.0 * i as f64;
        svg.line(660.0, ly, 680.0, ly, color(i + 3), false);
        svg.text(684.0, ly + 4.0, 11.0, "start", name);
    }
    svg.finish()
}
