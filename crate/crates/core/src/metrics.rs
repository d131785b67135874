//! Evaluation metrics: RMSE, norm and per-axis relative errors, and their
//! distribution over angular speed bins.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_BINS: usize = 6;

/// Samples whose target speed is below this (rad/s) are left out of
/// relative-error statistics.
pub const MIN_RELATIVE_SPEED: f64 = 1e-3;

/// Prediction and ground truth of one sequence on a common bin grid, rad/s.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub prediction: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
}

impl Sequence {
    pub fn new(prediction: Vec<[f64; 3]>, target: Vec<[f64; 3]>) -> Self {
        Sequence { prediction, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedBin {
    /// Target speed range in rad/s; the last bin includes its upper edge.
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub median_norm_relative_error: Option<f64>,
    /// Relative difference quartiles for the x, y and z axes.
    pub axis_quartiles: [Option<Quartiles>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Evaluated bins across all sequences (after the settling period).
    pub samples: usize,
    /// Samples excluded from relative statistics for near-zero target speed.
    pub excluded: usize,
    /// √(mean over samples of ‖ω − ω̂‖²), deg/s.
    pub rmse_deg_s: f64,
    /// Median of ‖ω − ω̂‖/‖ω̂‖ over all samples (not over bins).
    pub median_norm_relative_error: Option<f64>,
    pub axis_quartiles: [Option<Quartiles>; 3],
    pub bins: Vec<SpeedBin>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn quartiles(values: Vec<f64>) -> Option<Quartiles> {
    let s = sorted(values);
    Some(Quartiles {
        q25: quantile_sorted(&s, 0.25)?,
        median: quantile_sorted(&s, 0.5)?,
        q75: quantile_sorted(&s, 0.75)?,
    })
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

struct Sample {
    speed: f64,
    norm_rel: f64,
    axis_rel: [Option<f64>; 3],
}

fn relative_stats(samples: &[&Sample]) -> (Option<f64>, [Option<Quartiles>; 3]) {
    let median = quantile_sorted(&sorted(samples.iter().map(|s| s.norm_rel).collect()), 0.5);
    let axes = std::array::from_fn(|a| quartiles(samples.iter().filter_map(|s| s.axis_rel[a]).collect()));
    (median, axes)
}

/// Metrics over bins `first_bin..` of every sequence.
pub fn compute_metrics(sequences: &[Sequence], first_bin: usize) -> Result<MetricsReport> {
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    let mut samples = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        if s.prediction.len() != s.target.len() {
            return Err(Error::Shape(format!(
                "sequence {i}: {} predictions for {} targets",
                s.prediction.len(),
                s.target.len()
            )));
        }
        for (p, t) in s.prediction.iter().zip(&s.target).skip(first_bin) {
            let e = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
            let en = norm(&e);
            sq_sum += en * en;
            count += 1;
            let speed = norm(t);
            if speed < MIN_RELATIVE_SPEED {
                continue;
            }
            samples.push(Sample {
                speed,
                norm_rel: en / speed,
                axis_rel: std::array::from_fn(|a| (t[a].abs() >= MIN_RELATIVE_SPEED).then(|| e[a] / t[a].abs())),
            });
        }
    }
    if count == 0 {
        return Err(Error::Empty(format!("no samples at or after bin {first_bin}")));
    }
    let rmse_deg_s = (sq_sum / count as f64).sqrt().to_degrees();
    let all: Vec<&Sample> = samples.iter().collect();
    let (median, axis_quartiles) = relative_stats(&all);

    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s.speed), h.max(s.speed)));
    let width = if samples.is_empty() { 0.0 } else { (hi - lo) / SPEED_BINS as f64 };
    let mut members: Vec<Vec<&Sample>> = vec![Vec::new(); SPEED_BINS];
    for s in &samples {
        let b = if width > 0.0 {
            (((s.speed - lo) / width).floor() as usize).min(SPEED_BINS - 1)
        } else {
            0
        };
        members[b].push(s);
    }
    let bins = members
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let (median, axis_quartiles) = relative_stats(m);
            let (lower, upper) = if samples.is_empty() {
                (0.0, 0.0)
            } else {
                (lo + b as f64 * width, if b + 1 == SPEED_BINS { hi } else { lo + (b + 1) as f64 * width })
            };
            SpeedBin {
                lower,
                upper,
                count: m.len(),
                median_norm_relative_error: median,
                axis_quartiles,
            }
        })
        .collect();

    Ok(MetricsReport {
        samples: count,
        excluded: count - samples.len(),
        rmse_deg_s,
        median_norm_relative_error: median,
        axis_quartiles,
        bins,
    })
}

/// Component-wise mean of all training targets.
pub fn mean_baseline<'a>(targets: impl IntoIterator<Item = &'a [[f64; 3]]>) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for seq in targets {
        for v in seq {
            for a in 0..3 {
                sum[a] += v[a];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no training targets for the mean baseline".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per speed bin; empty statistics are left blank.
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,lower_deg_s,upper_deg_s,count,median_norm_rel");
        for axis in ["x", "y", "z"] {
            write!(out, ",{axis}_q25,{axis}_median,{axis}_q75").unwrap();
        }
        out.push('\n');
        for (i, b) in self.bins.iter().enumerate() {
            write!(
                out,
                "{i},{:.6},{:.6},{},{}",
                b.lower.to_degrees(),
                b.upper.to_degrees(),
                b.count,
                opt(b.median_norm_relative_error)
            )
            .unwrap();
            for q in &b.axis_quartiles {
                write!(
                    out,
                    ",{},{},{}",
                    opt(q.map(|q| q.q25)),
                    opt(q.map(|q| q.median)),
                    opt(q.map(|q| q.q75))
                )
                .unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "samples {} rmse {:.3} deg/s median norm relative error (all samples) {}",
            self.samples,
            self.rmse_deg_s,
            self.median_norm_relative_error
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "n/a".into())
        )
    }
}
