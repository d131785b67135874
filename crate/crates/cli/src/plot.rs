//! Static SVG figures: stacked line panels for prediction traces, a bar
//! chart of per-bin median errors and per-axis quartile boxes.

use std::fmt::Write as _;

use snn_angvel::metrics::MetricsReport;

const WIDTH: f64 = 720.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub dashed: bool,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.x0 + (v - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h - (v - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn axes(&self, out: &mut String, y_label: &str) {
        writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>",
            self.x0, self.y0, self.w, self.h
        )
        .unwrap();
        for i in 0..=4 {
            let v = self.yr.0 + (self.yr.1 - self.yr.0) * i as f64 / 4.0;
            let y = self.y(v);
            writeln!(
                out,
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
                self.x0,
                self.x0 + self.w,
                self.x0 - 4.0,
                y + 4.0,
                format_tick(v)
            )
            .unwrap();
        }
        writeln!(
            out,
            "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{}</text>",
            self.y0 + self.h / 2.0,
            self.y0 + self.h / 2.0,
            escape(y_label)
        )
        .unwrap();
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Vertically stacked panels sharing the x axis.
pub fn line_panels(title: &str, x_label: &str, y_label: &str, panels: &[Panel]) -> String {
    let panel_h = 150.0;
    let gap = 34.0;
    let height = 40.0 + panels.len() as f64 * (panel_h + gap) + 20.0;
    let mut out = header(height);
    writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", WIDTH / 2.0, escape(title)).unwrap();
    let xr = span(panels.iter().flat_map(|p| p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0))));
    let xr = (xr.0 + 0.05 * (xr.1 - xr.0) / 1.1, xr.1 - 0.05 * (xr.1 - xr.0) / 1.1);
    for (i, panel) in panels.iter().enumerate() {
        let frame = Frame {
            x0: MARGIN_LEFT,
            y0: 40.0 + i as f64 * (panel_h + gap),
            w: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            h: panel_h,
            xr,
            yr: span(panel.series.iter().flat_map(|s| s.points.iter().map(|q| q.1))),
        };
        frame.axes(&mut out, y_label);
        writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", frame.x0, frame.y0 - 6.0, escape(&panel.title)).unwrap();
        for (j, s) in panel.series.iter().enumerate() {
            let mut d = String::new();
            for (k, &(x, y)) in s.points.iter().filter(|p| p.1.is_finite()).enumerate() {
                write!(d, "{}{:.2},{:.2}", if k == 0 { "M" } else { " L" }, frame.x(x), frame.y(y)).unwrap();
            }
            let dash = if s.dashed { " stroke-dasharray=\"5,3\"" } else { "" };
            writeln!(out, "<path d=\"{d}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.3\"{dash}/>", s.color).unwrap();
            let lx = frame.x0 + frame.w - 150.0 + 75.0 * j as f64;
            writeln!(
                out,
                "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{}\"{dash}/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                frame.y0 - 9.0,
                lx + 16.0,
                frame.y0 - 9.0,
                s.color,
                lx + 20.0,
                frame.y0 - 5.0,
                escape(&s.label)
            )
            .unwrap();
        }
        if i + 1 == panels.len() {
            for t in 0..=5 {
                let v = xr.0 + (xr.1 - xr.0) * t as f64 / 5.0;
                writeln!(
                    out,
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                    frame.x(v),
                    frame.y0 + frame.h + 14.0,
                    format_tick(v)
                )
                .unwrap();
            }
            writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                frame.x0 + frame.w / 2.0,
                frame.y0 + frame.h + 30.0,
                escape(x_label)
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

fn bin_label(lower: f64, upper: f64) -> String {
    format!("{:.0}-{:.0}", lower.to_degrees(), upper.to_degrees())
}

/// Median norm relative error per speed bin; empty bins are marked.
pub fn error_bars(report: &MetricsReport, title: &str) -> String {
    let height = 320.0;
    let mut out = header(height);
    writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", WIDTH / 2.0, escape(title)).unwrap();
    let top = report
        .bins
        .iter()
        .filter_map(|b| b.median_norm_relative_error)
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let frame = Frame {
        x0: MARGIN_LEFT,
        y0: 40.0,
        w: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        h: height - 100.0,
        xr: (0.0, report.bins.len().max(1) as f64),
        yr: (0.0, top * 1.1),
    };
    frame.axes(&mut out, "median relative error");
    for (i, b) in report.bins.iter().enumerate() {
        let cx = frame.x(i as f64 + 0.5);
        let bw = frame.w / report.bins.len() as f64 * 0.6;
        match b.median_norm_relative_error {
            Some(m) => writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{}\"/><text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{m:.2}</text>",
                cx - bw / 2.0,
                frame.y(m),
                frame.y(0.0) - frame.y(m),
                PALETTE[0],
                frame.y(m) - 4.0
            )
            .unwrap(),
            None => writeln!(
                out,
                "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#999\">empty</text>",
                frame.y(0.0) - 6.0
            )
            .unwrap(),
        }
        writeln!(
            out,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text><text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#666\">n={}</text>",
            frame.y0 + frame.h + 14.0,
            bin_label(b.lower, b.upper),
            frame.y0 + frame.h + 28.0,
            b.count
        )
        .unwrap();
    }
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">angular speed (deg/s)</text>",
        frame.x0 + frame.w / 2.0,
        height - 14.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

/// Per-axis relative difference quartiles per speed bin.
pub fn quartile_boxes(report: &MetricsReport, title: &str) -> String {
    let height = 340.0;
    let mut out = header(height);
    writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", WIDTH / 2.0, escape(title)).unwrap();
    let values = report
        .bins
        .iter()
        .flat_map(|b| b.axis_quartiles.iter().flatten().flat_map(|q| [q.q25, q.q75]));
    let yr = span(values.chain([0.0]));
    let frame = Frame {
        x0: MARGIN_LEFT,
        y0: 40.0,
        w: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        h: height - 110.0,
        xr: (0.0, report.bins.len().max(1) as f64),
        yr,
    };
    frame.axes(&mut out, "relative difference");
    let zero = frame.y(0.0);
    writeln!(out, "<line x1=\"{:.1}\" y1=\"{zero:.1}\" x2=\"{:.1}\" y2=\"{zero:.1}\" stroke=\"#999\"/>", frame.x0, frame.x0 + frame.w).unwrap();
    let slot = frame.w / report.bins.len().max(1) as f64;
    for (i, b) in report.bins.iter().enumerate() {
        for (a, q) in b.axis_quartiles.iter().enumerate() {
            let Some(q) = q else { continue };
            let x = frame.x(i as f64) + slot * (0.2 + 0.2 * a as f64);
            let w = slot * 0.16;
            writeln!(
                out,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{:.1}\" fill=\"{}\" fill-opacity=\"0.5\" stroke=\"{}\"/><line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
                frame.y(q.q75),
                (frame.y(q.q25) - frame.y(q.q75)).max(0.5),
                PALETTE[a],
                PALETTE[a],
                frame.y(q.median),
                x + w,
                frame.y(q.median)
            )
            .unwrap();
        }
        writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            frame.x(i as f64 + 0.5),
            frame.y0 + frame.h + 14.0,
            bin_label(b.lower, b.upper)
        )
        .unwrap();
    }
    for (a, name) in ["x (tilt)", "y (pan)", "z (roll)"].iter().enumerate() {
        let lx = frame.x0 + 90.0 * a as f64;
        writeln!(
            out,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{name}</text>",
            height - 30.0,
            PALETTE[a],
            lx + 14.0,
            height - 21.0
        )
        .unwrap();
    }
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">angular speed (deg/s)</text>",
        frame.x0 + frame.w / 2.0 + 120.0,
        height - 21.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use snn_angvel::metrics::{compute_metrics, Sequence};

    #[test]
    fn figures_are_well_formed_and_mark_empty_bins() {
        let t = vec![[1.0, 0.5, 0.0], [10.0, 0.0, 2.0]];
        let r = compute_metrics(&[Sequence::new(vec![[0.0; 3]; 2], t)], 0).unwrap();
        let bars = error_bars(&r, "errors");
        assert!(bars.starts_with("<svg") && bars.trim_end().ends_with("</svg>"));
        assert_eq!(bars.matches("empty").count(), 4);
        let boxes = quartile_boxes(&r, "quartiles");
        assert!(boxes.contains("z (roll)"));
        let lines = line_panels(
            "trace",
            "time (ms)",
            "rad/s",
            &[Panel {
                title: "x".into(),
                series: vec![Series {
                    label: "a<b".into(),
                    color: "#000",
                    dashed: false,
                    points: vec![(0.0, 1.0), (1.0, 2.0)],
                }],
            }],
        );
        assert!(lines.contains("a&lt;b"));
        assert!(!lines.contains("NaN"));
    }
}
