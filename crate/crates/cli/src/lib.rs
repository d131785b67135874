//! Command-line front end: data generation, training, evaluation, gradient
//! checks, single-sequence simulation and plotting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use snn_angvel::dataset::{Dataset, Split};
use snn_angvel::datagen::build_dataset;
use snn_angvel::gradcheck::run_grad_check;
use snn_angvel::metrics::{self, MetricsReport, Sequence};
use snn_angvel::network::{build_network, load_checkpoint, save_checkpoint};
use snn_angvel::training::{loss, train_loop_with_progress};
use snn_angvel::{Network32, VERSION};

pub mod config;
pub mod plot;

use config::RunConfig;

/// A failure reported as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: String,
    pub location: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.into(),
            location: String::new(),
            message: message.into(),
        }
    }

    pub fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            kind: "config".into(),
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<snn_angvel::Error> for CliError {
    fn from(e: snn_angvel::Error) -> Self {
        let location = match &e {
            snn_angvel::Error::Config { location, .. } => location.clone(),
            snn_angvel::Error::Data { path, .. } | snn_angvel::Error::Io { path, .. } => path.display().to_string(),
            _ => String::new(),
        };
        CliError {
            kind: e.kind().into(),
            location,
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "snn-angvel", version, about = "Spiking networks for event-based angular velocity regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override, e.g. `--set training.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Component-wise mean of the training targets.
    Mean,
    /// Always predicts zero.
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into `--out`.
    GenData {
        /// Number of sequences (overrides `data.sequences`).
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Train a network on a dataset; writes checkpoint and logs to `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Verify the surrogate gradient on a tiny network.
    GradCheck,
    /// Run a checkpoint on one sequence and plot prediction against truth.
    Simulate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence id; defaults to the first sequence of the evaluation split.
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Re-render figures from a saved `report.json`.
    Plot {
        #[arg(long)]
        report: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::GradCheck => "grad-check",
            Command::Simulate { .. } => "simulate",
            Command::Plot { .. } => "plot",
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        kind: "io".into(),
        location: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::config("--out", format!("`{}` needs an output directory", cli.command.name())))?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir)
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    inputs: Vec<(&'static str, String)>,
    config: &'a RunConfig,
}

/// Records everything needed to repeat the run. Output paths are left out so
/// that identical runs into different directories produce identical files.
fn write_provenance(dir: &Path, cli: &Cli, cfg: &RunConfig, inputs: Vec<(&'static str, String)>) -> Result<()> {
    let p = Provenance {
        tool: "snn-angvel",
        version: VERSION,
        command: cli.command.name(),
        seed: cfg.seed,
        inputs,
        config: cfg,
    };
    write_file(&dir.join("provenance.json"), serde_json::to_string_pretty(&p).expect("provenance serializes"))
}

/// Parses arguments and runs the selected subcommand.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads", "must be positive"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut overrides = cli.overrides.clone();
    if let Command::GenData { sequences: Some(n) } = &cli.command {
        overrides.push(format!("data.sequences={n}"));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides, cli.seed)?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&cli, &cfg),
        Command::Train { data, init } => train(&cli, &cfg, data, init.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            baseline,
        } => eval(&cli, &cfg, data, checkpoint.as_deref(), *baseline),
        Command::GradCheck => grad_check(&cli, &cfg),
        Command::Simulate {
            data,
            checkpoint,
            sequence,
        } => simulate(&cli, &cfg, data, checkpoint, sequence.as_deref()),
        Command::Plot { report } => plot_report(&cli, report),
    }
}

fn gen_data(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cli)?;
    let start = Instant::now();
    let manifest = build_dataset(&cfg.data, cfg.seed, dir)?;
    write_provenance(dir, cli, cfg, Vec::new())?;
    let events: usize = manifest.sequences.iter().map(|s| s.events).sum();
    println!(
        "generated {} sequences ({events} events) in {:.1} s",
        manifest.sequences.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig, data_dir: &Path, init: Option<&Path>) -> Result<()> {
    let dir = out_dir(cli)?;
    let data = Dataset::open(data_dir)?;
    let mut training = cfg.training.clone();
    let mut net: Network32 = match init {
        Some(path) => {
            training.calibrate = false;
            load_checkpoint(path)?
        }
        None => build_network(&cfg.network, cfg.seed)?,
    };
    let m = data.manifest();
    let nc = net.config();
    if (nc.input_width, nc.input_height) != (m.width as usize, m.height as usize) {
        return Err(CliError::config(
            "network.input_width",
            format!(
                "network input {}x{} does not match the {}x{} dataset",
                nc.input_width, nc.input_height, m.width, m.height
            ),
        ));
    }
    let mut inputs = vec![("data", data_dir.display().to_string())];
    if let Some(p) = init {
        inputs.push(("init", p.display().to_string()));
    }
    write_provenance(dir, cli, cfg, inputs)?;

    let every = (training.iterations / 20).max(1);
    let start = Instant::now();
    let report = train_loop_with_progress(&mut net, &data, &training, &cfg.loss(), Some(dir), |e| {
        if e.iteration % every == 0 || e.iteration == 1 {
            eprintln!(
                "iteration {:>7}  loss {:.5}  elapsed {:.0} s",
                e.iteration,
                e.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if !report.initial_rates.is_empty() {
        eprintln!("calibrated firing rates {:.3?}", report.initial_rates);
    }
    let summary = serde_json::json!({
        "iterations": training.iterations,
        "final_loss": report.log.last().map(|e| e.loss),
        "calibrated_rates": report.initial_rates,
        "validation": report.validation,
    });
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    if let Some(v) = report.validation.last() {
        println!(
            "validation loss {:.5} median norm relative error {}",
            v.loss,
            v.median_relative_error
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}

enum Predictor {
    Net(Network32),
    Constant([f64; 3]),
}

fn eval(cli: &Cli, cfg: &RunConfig, data_dir: &Path, checkpoint: Option<&Path>, baseline: Option<Baseline>) -> Result<()> {
    let dir = out_dir(cli)?;
    let data = Dataset::open(data_dir)?;
    let (predictor, dt_ms, label) = match (checkpoint, baseline) {
        (Some(path), _) => {
            let net: Network32 = load_checkpoint(path)?;
            let dt = net.config().dt_ms;
            (Predictor::Net(net), dt, format!("checkpoint {}", path.display()))
        }
        (None, Some(Baseline::Mean)) => {
            let targets: Vec<Vec<[f64; 3]>> = data
                .split(Split::Train)
                .iter()
                .map(|e| {
                    snn_angvel::AngularVelocitySignal::read_csv(data.ground_truth_path(e)).map(|g| g.values)
                })
                .collect::<snn_angvel::Result<_>>()?;
            let mean = metrics::mean_baseline(targets.iter().map(Vec::as_slice))?;
            (Predictor::Constant(mean), cfg.network.dt_ms, format!("mean baseline {mean:.6?}"))
        }
        (None, Some(Baseline::Zero)) => (Predictor::Constant([0.0; 3]), cfg.network.dt_ms, "zero baseline".into()),
        (None, None) => return Err(CliError::config("--checkpoint", "give a checkpoint or --baseline")),
    };
    let mut entries = data.split(cfg.eval.split);
    if cfg.eval.max_sequences > 0 {
        entries.truncate(cfg.eval.max_sequences);
    }
    let sequences: Vec<Sequence> = entries
        .par_iter()
        .map(|e| {
            let (x, gt) = data.load(e, dt_ms)?;
            let pred = match &predictor {
                Predictor::Net(net) => net.predict(&x)?.to_f64(),
                Predictor::Constant(c) => vec![*c; gt.len()],
            };
            Ok(Sequence::new(pred, gt.values))
        })
        .collect::<snn_angvel::Result<_>>()?;
    let loss_cfg = snn_angvel::training::LossConfig {
        t0_ms: cfg.training.t0_ms,
        dt_ms,
    };
    let report = metrics::compute_metrics(&sequences, loss_cfg.first_bin())?;

    let mut inputs = vec![("data", data_dir.display().to_string()), ("predictor", label.clone())];
    inputs.push(("split", cfg.eval.split.to_string()));
    write_provenance(dir, cli, cfg, inputs)?;
    write_report(dir, &report, &format!("{} split, {label}", cfg.eval.split))?;
    println!("{} sequences: {}", sequences.len(), report.summary());
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport, title: &str) -> Result<()> {
    write_file(&dir.join("report.json"), report.to_json())?;
    write_file(&dir.join("bins.csv"), report.bins_csv())?;
    write_file(
        &dir.join("relative_error_bins.svg"),
        plot::error_bars(report, &format!("Median norm relative error per speed bin ({title})")),
    )?;
    write_file(
        &dir.join("axis_quartiles.svg"),
        plot::quartile_boxes(report, &format!("Per-axis relative difference quartiles ({title})")),
    )
}

fn grad_check(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let mut gc = cfg.grad_check.clone();
    if cli.seed.is_some() {
        gc.seed = cfg.seed;
    }
    let report = run_grad_check(&gc)?;
    for c in &report.checks {
        println!(
            "{} {} value={:.3e} tolerance={:.3e} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            c.detail
        );
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("grad_check.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
        write_provenance(dir, cli, cfg, Vec::new())?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::new("check", format!("failed: {}", failed.join(", "))))
    }
}

fn simulate(cli: &Cli, cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, sequence: Option<&str>) -> Result<()> {
    let dir = out_dir(cli)?;
    let data = Dataset::open(data_dir)?;
    let net: Network32 = load_checkpoint(checkpoint)?;
    let entry = match sequence {
        Some(id) => data
            .find(id)
            .ok_or_else(|| CliError::config("--sequence", format!("no sequence `{id}` in {}", data_dir.display())))?,
        None => *data
            .split(cfg.eval.split)
            .first()
            .ok_or_else(|| CliError::new("empty", format!("{} split is empty", cfg.eval.split)))?,
    };
    let dt = net.config().dt_ms;
    let (x, gt) = data.load(entry, dt)?;
    let pred = net.predict(&x)?;
    let loss_cfg = snn_angvel::training::LossConfig {
        t0_ms: cfg.training.t0_ms,
        dt_ms: dt,
    };
    let l = loss(&pred, &gt, &loss_cfg)?;

    let mut csv = String::from("t_ms,pred_x,pred_y,pred_z,gt_x,gt_y,gt_z\n");
    for (k, (p, g)) in pred.values.iter().zip(&gt.values).enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            k as f64 * dt,
            p[0],
            p[1],
            p[2],
            g[0],
            g[1],
            g[2]
        ));
    }
    write_file(&dir.join("trace.csv"), csv)?;
    let panels: Vec<plot::Panel> = ["x (tilt)", "y (pan)", "z (roll)"]
        .iter()
        .enumerate()
        .map(|(a, name)| plot::Panel {
            title: name.to_string(),
            series: vec![
                plot::Series {
                    label: "truth".into(),
                    color: "#333333",
                    dashed: true,
                    points: gt.values.iter().enumerate().map(|(k, v)| (k as f64 * dt, v[a])).collect(),
                },
                plot::Series {
                    label: "prediction".into(),
                    color: "#1f77b4",
                    dashed: false,
                    points: pred
                        .values
                        .iter()
                        .enumerate()
                        .map(|(k, v)| (k as f64 * dt, v[a] as f64))
                        .collect(),
                },
            ],
        })
        .collect();
    write_file(
        &dir.join("trace.svg"),
        plot::line_panels(&format!("Sequence {}", entry.id), "time (ms)", "angular velocity (rad/s)", &panels),
    )?;
    write_provenance(
        dir,
        cli,
        cfg,
        vec![
            ("data", data_dir.display().to_string()),
            ("checkpoint", checkpoint.display().to_string()),
            ("sequence", entry.id.clone()),
        ],
    )?;
    println!("sequence {} loss {l:.5}", entry.id);
    Ok(())
}

fn plot_report(cli: &Cli, report_path: &Path) -> Result<()> {
    let dir = out_dir(cli)?;
    let text = fs::read_to_string(report_path).map_err(|e| io_err(report_path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| CliError {
        kind: "parse".into(),
        location: report_path.display().to_string(),
        message: e.to_string(),
    })?;
    let title = report_path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("report")
        .to_string();
    write_report(dir, &report, &title)
}

/// Saves a checkpoint of a freshly initialized network; used in tests.
pub fn write_initial_checkpoint(cfg: &RunConfig, path: &Path) -> Result<()> {
    let net: Network32 = build_network(&cfg.network, cfg.seed)?;
    save_checkpoint(&net, path).map_err(CliError::from)
}
