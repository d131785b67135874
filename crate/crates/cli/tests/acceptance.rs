//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snn_angvel::datagen::{
    crossings_to_stream, log_crossings, render_log_frames, sample_trajectory, CameraIntrinsics, Scene,
    TrajectoryConfig,
};
use snn_angvel::metrics::MetricsReport;
use snn_angvel::network::{readout, OUTPUTS};
use snn_angvel::srm::{discretize_kernel, refractory, spike_response, KernelKind, KernelParams};
use snn_angvel::training::{loss, loss_and_output_grad, LossConfig};
use snn_angvel::{AngularVelocitySignal, Polarity, PredictionSignal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_snn-angvel")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("{stdout}{}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Every file below `root` keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut reset_exact = true;
    for _ in 0..100 {
        let tau_s: f64 = rng.gen_range(0.1..50.0);
        let tau_r: f64 = rng.gen_range(0.1..50.0);
        let theta: f64 = rng.gen_range(0.01..10.0);
        worst = worst.max((spike_response(tau_s, tau_s) - 1.0).abs());
        reset_exact &= refractory(0.0, tau_r, theta) == -2.0 * theta;
        let p = KernelParams::new(tau_s, tau_r, theta).unwrap();
        let nu = discretize_kernel(KernelKind::Refractory, &p, 1.0).unwrap();
        reset_exact &= nu.values[0] == -2.0 * theta;
    }
    Outcome {
        passed: worst <= 1e-12 && reset_exact,
        detail: format!("max |eps(tau_s) - 1| = {worst:.2e} (tol 1e-12), nu(0) = -2*theta exactly: {reset_exact}"),
    }
}

fn criterion_2() -> Outcome {
    let config = configs().join("tiny.toml");
    match cli(&["grad-check", "--config", path_str(&config)]) {
        Ok(stdout) => {
            let lines: Vec<&str> = stdout.lines().collect();
            let pass = ["readout-exact", "adjoint-frozen", "descent-probe"]
                .iter()
                .all(|m| lines.iter().any(|l| l.starts_with(&format!("PASS {m} "))));
            Outcome {
                passed: pass,
                detail: lines.join(" | "),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: e.replace('\n', " | "),
        },
    }
}

/// Crossings found by sampling the frame-interpolated log intensity every
/// 10 µs; within a step the signal is linear, so crossing times are exact.
fn dense_oracle(frames: &[Vec<f64>], contrast: f64, pixel: usize) -> Vec<(f64, Polarity)> {
    let step_us = 10.0;
    let frame_us = 1000.0;
    let steps = ((frames.len() - 1) as f64 * frame_us / step_us).round() as usize;
    let level_at = |t: f64| {
        let j = ((t / frame_us).floor() as usize).min(frames.len() - 2);
        let f = t / frame_us - j as f64;
        frames[j][pixel] + f * (frames[j + 1][pixel] - frames[j][pixel])
    };
    let mut reference = frames[0][pixel];
    let mut out = Vec::new();
    for i in 0..steps {
        let (ta, tb) = (i as f64 * step_us, (i + 1) as f64 * step_us);
        let (la, lb) = (level_at(ta), level_at(tb));
        loop {
            if lb >= reference + contrast && lb > la {
                reference += contrast;
                out.push((ta + (reference - la) / (lb - la) * step_us, Polarity::Positive));
            } else if lb <= reference - contrast && lb < la {
                reference -= contrast;
                out.push((ta + (reference - la) / (lb - la) * step_us, Polarity::Negative));
            } else {
                break;
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let cam = CameraIntrinsics::from_hfov(8, 8, 75.0);
    let contrast = 0.3;
    let mut total = 0usize;
    let mut worst_dt = 0.0f64;
    let mut mismatches = 0usize;
    for trial in 0..5u64 {
        let scene = Scene::procedural(1000 + trial, 512).unwrap();
        let traj = sample_trajectory(2000 + trial, 100.0, &TrajectoryConfig::default());
        let frames = render_log_frames(&scene, &traj, &cam, 1000.0);
        let stream = crossings_to_stream(&log_crossings(&frames, 1000.0, contrast), 8, 8, 100_000).unwrap();
        let mut generated: BTreeMap<(usize, bool), Vec<u32>> = BTreeMap::new();
        for e in stream.events() {
            generated
                .entry((e.y as usize * 8 + e.x as usize, e.polarity == Polarity::Positive))
                .or_default()
                .push(e.t_us);
        }
        let mut oracle: BTreeMap<(usize, bool), Vec<f64>> = BTreeMap::new();
        for p in 0..64 {
            for (t, pol) in dense_oracle(&frames, contrast, p) {
                oracle.entry((p, pol == Polarity::Positive)).or_default().push(t);
            }
        }
        let keys: std::collections::BTreeSet<_> = generated.keys().chain(oracle.keys()).copied().collect();
        for k in keys {
            let g = generated.get(&k).cloned().unwrap_or_default();
            let o = oracle.get(&k).cloned().unwrap_or_default();
            if g.len() != o.len() {
                mismatches += 1;
                continue;
            }
            total += g.len();
            for (a, b) in g.iter().zip(&o) {
                worst_dt = worst_dt.max((*a as f64 - b).abs());
            }
        }
    }
    Outcome {
        passed: mismatches == 0 && worst_dt <= 1.0 && total > 0,
        detail: format!(
            "{total} events over 5 trajectories, (pixel, polarity) count mismatches {mismatches}, max |dt| {worst_dt:.3} us (tol 1 us)"
        ),
    }
}

fn read_report(dir: &Path) -> Result<MetricsReport, String> {
    let text = fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_4(data: &Path, work: &Path) -> Outcome {
    let out = work.join("eval-mean");
    let start = Instant::now();
    let result = cli(&[
        "eval",
        "--config",
        path_str(&configs().join("desk.toml")),
        "--data",
        path_str(data),
        "--baseline",
        "mean",
        "--out",
        path_str(&out),
    ])
    .and_then(|_| read_report(&out));
    let elapsed = start.elapsed();
    match result {
        Ok(r) => {
            let med = r.median_norm_relative_error.unwrap_or(f64::NAN);
            let rmse_ok = (r.rmse_deg_s - 226.9).abs() <= 0.2 * 226.9;
            Outcome {
                passed: (med - 1.0).abs() <= 0.01 && rmse_ok && elapsed < Duration::from_secs(60),
                detail: format!(
                    "median norm relative error {med:.4} (1.00 +/- 0.01), RMSE {:.1} deg/s (226.9 +/- 20%), {} samples, eval {:.1} s",
                    r.rmse_deg_s,
                    r.samples,
                    elapsed.as_secs_f64()
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: e.replace('\n', " | "),
        },
    }
}

fn criterion_5(data: &Path, work: &Path) -> Outcome {
    let out = work.join("train-desk");
    let start = Instant::now();
    let result = cli(&[
        "train",
        "--config",
        path_str(&configs().join("desk.toml")),
        "--data",
        path_str(data),
        "--out",
        path_str(&out),
    ]);
    let elapsed = start.elapsed();
    if let Err(e) = result {
        return Outcome {
            passed: false,
            detail: e.replace('\n', " | "),
        };
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap_or_default()).unwrap_or_default();
    let med = summary["validation"]
        .as_array()
        .and_then(|v| v.last())
        .and_then(|v| v["median_relative_error"].as_f64())
        .unwrap_or(f64::NAN);
    Outcome {
        passed: med < 0.6 && elapsed < Duration::from_secs(2 * 3600),
        detail: format!(
            "final validation median norm relative error {med:.4} (< 0.6), final training loss {}, {:.1} min (< 120)",
            summary["final_loss"],
            elapsed.as_secs_f64() / 60.0
        ),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = LossConfig { t0_ms: 50.0, dt_ms: 1.0 };
    let mut worst = 0.0f64;
    let mut grad_zero = true;
    for _ in 0..20 {
        let target: Vec<[f64; 3]> = (0..120).map(|_| std::array::from_fn(|_| rng.gen_range(-4.0..4.0))).collect();
        let pred: Vec<[f64; 3]> = (0..120).map(|_| std::array::from_fn(|_| rng.gen_range(-4.0..4.0))).collect();
        let mut perturbed = pred.clone();
        for v in perturbed.iter_mut().take(50) {
            *v = std::array::from_fn(|_| rng.gen_range(-1e3..1e3));
        }
        let gt = AngularVelocitySignal::new(1000, target);
        let p = |values| PredictionSignal {
            dt_ms: 1.0,
            settling_ms: 50.0,
            values,
        };
        let a = loss(&p(pred), &gt, &cfg).unwrap();
        let b = loss(&p(perturbed.clone()), &gt, &cfg).unwrap();
        worst = worst.max((a - b).abs());
        let (_, g) = loss_and_output_grad(&p(perturbed), &gt, &cfg).unwrap();
        grad_zero &= g[..50].iter().all(|v| *v == [0.0; OUTPUTS]);
    }
    Outcome {
        passed: worst == 0.0 && grad_zero,
        detail: format!("max loss change {worst:e} (must be exactly 0), zero gradient on [0, 50 ms): {grad_zero}"),
    }
}

fn criterion_7() -> Outcome {
    use snn_angvel::network::gasp;
    use snn_angvel::SpikeTensor;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, h, w, bins) = (8, 5, 6, 60);
    let weights: Vec<f64> = (0..OUTPUTS * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = KernelParams::new(8.0, 1.0, 1.0).unwrap();
    let table = discretize_kernel(KernelKind::SpikeResponse, &params, 1.0).unwrap();
    let mut worst = 0.0f64;
    for factor in [2usize, 3] {
        let mut small = SpikeTensor::zeros(c, h, w, bins, 1.0);
        let mut large = SpikeTensor::zeros(c, h * factor, w * factor, bins, 1.0);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..bins {
                        if rng.gen_bool(0.2) {
                            small.set(ch, y, x, k, true);
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    large.set(ch, y * factor + dy, x * factor + dx, k, true);
                                }
                            }
                        }
                    }
                }
            }
        }
        let run = |s: &SpikeTensor| {
            let g = gasp(s);
            let pooled: Vec<f64> = g.counts.iter().map(|&v| v as f64).collect();
            readout(&pooled, c, bins, &weights, g.neurons_per_channel, &table)
        };
        let (a, b) = (run(&small), run(&large));
        let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    Outcome {
        passed: worst <= 1e-6,
        detail: format!("max relative readout difference under 2x2 and 3x3 replication {worst:.2e} (tol 1e-6)"),
    }
}

fn criterion_8(work: &Path) -> Outcome {
    let cfg = work.join("det.toml");
    fs::write(
        &cfg,
        "seed = 3\n[data]\nsequences = 12\nsplit = [10.0, 1.0, 1.0]\nwidth = 32\nheight = 24\nduration_ms = 60.0\npanorama_width = 256\n\
         [training]\nbatch_size = 4\niterations = 4\nt0_ms = 20.0\ncheckpoint_every = 0\n",
    )
    .unwrap();
    let cfg = path_str(&cfg).to_string();
    let mut problems = Vec::new();
    let mut data_dirs = Vec::new();
    let mut train_dirs = Vec::new();
    for (i, threads) in ["1", "1", "3"].iter().enumerate() {
        let d = work.join(format!("det-data-{i}"));
        let t = work.join(format!("det-train-{i}"));
        if let Err(e) = cli(&["gen-data", "--config", &cfg, "--threads", threads, "--out", path_str(&d)]) {
            problems.push(e);
        }
        if let Err(e) = cli(&[
            "train",
            "--config",
            &cfg,
            "--threads",
            threads,
            "--data",
            path_str(&work.join("det-data-0")),
            "--out",
            path_str(&t),
        ]) {
            problems.push(e);
        }
        data_dirs.push(d);
        train_dirs.push(t);
    }
    let data_equal = data_dirs.windows(2).all(|p| tree(&p[0]) == tree(&p[1]));
    let train_equal = train_dirs.windows(2).all(|p| {
        ["checkpoint.snn", "train_log.csv", "validation.csv", "provenance.json"]
            .iter()
            .all(|f| fs::read(p[0].join(f)).ok() == fs::read(p[1].join(f)).ok() && p[0].join(f).exists())
    });
    Outcome {
        passed: problems.is_empty() && data_equal && train_equal,
        detail: format!(
            "gen-data identical across runs and thread counts (1, 1, 3): {data_equal}; train outputs identical: {train_equal}{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; errors: {}", problems.join(" | ").replace('\n', " "))
            }
        ),
    }
}

fn main() {
    // `cargo test -- <filter>` passes arguments through; keep only criterion numbers
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.parse::<u32>().is_ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.iter().any(|a| a == &n.to_string());

    let work = tempfile::tempdir().expect("temp dir");
    let desk_data = work.path().join("desk-data");
    let mut desk_ready: Option<Result<(), String>> = None;
    let mut ensure_desk = || {
        desk_ready
            .get_or_insert_with(|| {
                cli(&[
                    "gen-data",
                    "--config",
                    path_str(&configs().join("desk.toml")),
                    "--out",
                    path_str(&desk_data),
                ])
                .map(|_| ())
            })
            .clone()
    };

    let names = [
        "kernel identities",
        "gradient correctness",
        "event generator matches dense oracle",
        "mean baseline",
        "desk-scale learning signal",
        "settling mask",
        "GASP resolution invariance",
        "determinism",
    ];
    let mut failed = 0;
    for n in 1..=8u32 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 | 5 => match ensure_desk() {
                Ok(()) if n == 4 => criterion_4(&desk_data, work.path()),
                Ok(()) => criterion_5(&desk_data, work.path()),
                Err(e) => Outcome {
                    passed: false,
                    detail: format!("dataset generation failed: {}", e.replace('\n', " | ")),
                },
            },
            6 => criterion_6(),
            7 => criterion_7(),
            _ => criterion_8(work.path()),
        };
        if !outcome.passed {
            failed += 1;
        }
        println!(
            "{} criterion {n} ({}): {} [{:.1} s]",
            if outcome.passed { "PASS" } else { "FAIL" },
            names[n as usize - 1],
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
