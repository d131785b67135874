//! Time-integrated Euclidean loss, surrogate-gradient backpropagation through
//! the SRM dynamics, ADAM, and the minibatch training loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::event::{augment, Augmentation, AngularVelocitySignal, SpikeTensor};
use crate::metrics;
use crate::network::{save_checkpoint, ForwardCache, Network, PredictionSignal, OUTPUTS};
use crate::scalar::Scalar;
use crate::seed;
use crate::srm;

/// Loss window: bins with `t ≥ t0_ms` up to the end of the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub t0_ms: f64,
    pub dt_ms: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { t0_ms: 50.0, dt_ms: 1.0 }
    }
}

impl LossConfig {
    /// First bin inside the loss window.
    pub fn first_bin(&self) -> usize {
        (self.t0_ms / self.dt_ms - 1e-9).ceil().max(0.0) as usize
    }
}

/// Surrogate spike derivative `α·β·exp(−β·|u − ϑ|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { alpha: 1.0, beta: 5.0 }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::config("training.surrogate", "alpha and beta must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn derivative<T: Scalar>(&self, u: T, threshold: T) -> T {
        let beta = T::lit(self.beta);
        T::lit(self.alpha) * beta * (-beta * (u - threshold).abs()).exp()
    }
}

fn check_lengths<T: Scalar>(pred: &PredictionSignal<T>, target: &AngularVelocitySignal, cfg: &LossConfig) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} bins, ground truth {}",
            pred.len(),
            target.len()
        )));
    }
    if (pred.dt_ms - target.dt_ms()).abs() > 1e-12 || (pred.dt_ms - cfg.dt_ms).abs() > 1e-12 {
        return Err(Error::Shape(format!(
            "bin widths differ: prediction {} ms, ground truth {} ms, loss {} ms",
            pred.dt_ms,
            target.dt_ms(),
            cfg.dt_ms
        )));
    }
    let t1 = pred.len() as f64 * cfg.dt_ms;
    if !(cfg.t0_ms >= 0.0 && cfg.t0_ms < t1) {
        return Err(Error::config("training.t0_ms", format!("loss onset {} ms must lie in [0, {t1})", cfg.t0_ms)));
    }
    Ok(())
}

/// `L = 1/(T₁−T₀) · Σ_{k: kΔt ≥ T₀} ‖ω[k] − ω̂[k]‖·Δt`.
pub fn loss<T: Scalar>(pred: &PredictionSignal<T>, target: &AngularVelocitySignal, cfg: &LossConfig) -> Result<T> {
    loss_and_output_grad(pred, target, cfg).map(|(l, _)| l)
}

/// Loss together with its gradient with respect to every predicted value.
/// Bins before `T₀` receive zero gradient.
pub fn loss_and_output_grad<T: Scalar>(
    pred: &PredictionSignal<T>,
    target: &AngularVelocitySignal,
    cfg: &LossConfig,
) -> Result<(T, Vec<[T; OUTPUTS]>)> {
    check_lengths(pred, target, cfg)?;
    let bins = pred.len();
    let t1 = bins as f64 * cfg.dt_ms;
    let weight = T::lit(cfg.dt_ms / (t1 - cfg.t0_ms));
    let mut grad = vec![[T::zero(); OUTPUTS]; bins];
    let mut total = T::zero();
    for k in cfg.first_bin()..bins {
        let e: [T; OUTPUTS] = std::array::from_fn(|i| pred.values[k][i] - T::lit(target.values[k][i]));
        let norm = e.iter().map(|&v| v * v).sum::<T>().sqrt();
        total += norm;
        if norm > T::zero() {
            for i in 0..OUTPUTS {
                grad[k][i] = weight * e[i] / norm;
            }
        }
    }
    Ok((total * weight, grad))
}

/// Gradient of the loss with respect to every weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub conv: Vec<Vec<T>>,
    pub readout: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            conv: net.conv_weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            readout: vec![T::zero(); net.readout_weights.len()],
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out: Vec<T> = self.conv.iter().flatten().copied().collect();
        out.extend_from_slice(&self.readout);
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        self.readout.iter_mut().zip(&other.readout).for_each(|(x, &y)| *x += y);
    }

    pub fn scale(&mut self, s: T) {
        self.conv.iter_mut().flatten().for_each(|x| *x *= s);
        self.readout.iter_mut().for_each(|x| *x *= s);
    }
}

/// Backpropagates an output gradient `∂L/∂ω[k]` through the cached forward
/// pass. Spike generation is differentiated with the surrogate; the
/// refractory self-term is part of the graph.
pub fn backward_from_output<T: Scalar>(
    net: &Network<T>,
    cache: &ForwardCache<T>,
    output_grad: &[[T; OUTPUTS]],
    surrogate: &SurrogateConfig,
) -> Result<Gradients<T>> {
    let bins = cache.bins();
    if output_grad.len() != bins {
        return Err(Error::Shape(format!("output gradient has {} bins, cache {bins}", output_grad.len())));
    }
    if cache.potentials.len() != net.conv_layers() || cache.spikes.len() != net.conv_layers() {
        return Err(Error::Shape("forward cache does not match the network".into()));
    }
    let mut grads = Gradients::zeros_like(net);
    let channels = net.pooled_channels();
    let n_pool = net.pooled_size();
    let inv_n = T::one() / T::lit(n_pool as f64);

    // readout: ω = (1/N) ε ∗ (W g)
    let table = &net.readout_table().values;
    let mut dy = vec![T::zero(); OUTPUTS * bins];
    let mut column = vec![T::zero(); bins];
    for a in 0..OUTPUTS {
        for (c, g) in column.iter_mut().zip(output_grad) {
            *c = g[a] * inv_n;
        }
        srm::causal_filter_adjoint(&column, table, &mut dy[a * bins..(a + 1) * bins]);
    }
    let mut dg = vec![T::zero(); channels * bins];
    for a in 0..OUTPUTS {
        let dya = &dy[a * bins..(a + 1) * bins];
        for c in 0..channels {
            let g = &cache.pooled[c * bins..(c + 1) * bins];
            grads.readout[a * channels + c] = g.iter().zip(dya).map(|(&x, &y)| x * y).sum();
            let w = net.readout_weights[a * channels + c];
            for (d, &y) in dg[c * bins..(c + 1) * bins].iter_mut().zip(dya) {
                *d += w * y;
            }
        }
    }

    // GASP broadcasts the pooled gradient to every position of its channel
    let last = net.conv_layers() - 1;
    let mut ds = vec![T::zero(); channels * n_pool * bins];
    for c in 0..channels {
        let src = &dg[c * bins..(c + 1) * bins];
        for p in 0..n_pool {
            ds[(c * n_pool + p) * bins..(c * n_pool + p + 1) * bins].copy_from_slice(src);
        }
    }

    let dt = T::lit(net.config().dt_ms);
    for layer in (0..=last).rev() {
        let g = &net.geometries()[layer];
        let p = &net.kernel_params()[layer];
        let decay = p.refractory_decay(dt);
        let reset = -T::lit(2.0) * p.threshold;
        let eps = &net.psp_tables()[layer].values;
        let potentials = &cache.potentials[layer];
        let mut dz = vec![T::zero(); g.out_neurons() * bins];
        let mut active = vec![false; g.out_neurons()];
        let mut du = vec![T::zero(); bins];
        for n in 0..g.out_neurons() {
            let range = n * bins..(n + 1) * bins;
            let u = &potentials[range.clone()];
            let dsn = &ds[range.clone()];
            let mut rho = T::zero();
            for k in (0..bins).rev() {
                if k + 1 < bins {
                    rho = decay * (rho + reset * du[k + 1]);
                }
                du[k] = surrogate.derivative(u[k], p.threshold) * (dsn[k] + rho);
            }
            let dzn = &mut dz[range];
            srm::causal_filter_adjoint(&du, eps, dzn);
            if let Some(k) = dzn.iter().position(|v| !v.is_finite()) {
                return Err(Error::Simulation {
                    layer,
                    bin: k,
                    message: format!("non-finite gradient at neuron {n}"),
                });
            }
            active[n] = dzn.iter().any(|&v| v != T::zero());
        }
        let input: &[u8] = if layer == 0 { cache.input.data() } else { &cache.spikes[layer - 1] };
        conv::weight_grad(g, input, &dz, bins, &mut grads.conv[layer]);
        if layer > 0 {
            ds = vec![T::zero(); g.in_neurons() * bins];
            conv::backward_input(g, &net.conv_weights[layer], &dz, &active, bins, &mut ds);
        }
    }
    Ok(grads)
}

/// Loss and its gradient for one sequence.
pub fn backward<T: Scalar>(
    net: &Network<T>,
    cache: &ForwardCache<T>,
    pred: &PredictionSignal<T>,
    target: &AngularVelocitySignal,
    loss_cfg: &LossConfig,
    surrogate: &SurrogateConfig,
) -> Result<(T, Gradients<T>)> {
    let (l, dout) = loss_and_output_grad(pred, target, loss_cfg)?;
    let grads = backward_from_output(net, cache, &dout, surrogate)?;
    Ok((l, grads))
}

/// Forward, loss and backward for one sequence.
pub fn sample_gradient<T: Scalar>(
    net: &Network<T>,
    input: &SpikeTensor,
    target: &AngularVelocitySignal,
    loss_cfg: &LossConfig,
    surrogate: &SurrogateConfig,
) -> Result<(T, Gradients<T>)> {
    let (pred, cache) = net.forward(input)?;
    backward(net, &cache, &pred, target, loss_cfg, surrogate)
}

/// ADAM with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub augment: bool,
    pub seed: u64,
    pub t0_ms: f64,
    pub surrogate: SurrogateConfig,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Validate every this many iterations (0: only at the end).
    pub validate_every: usize,
    /// Cap on validation sequences (0: all).
    pub validation_sequences: usize,
    /// Rescale initial weights on a training batch before the first step.
    pub calibrate: bool,
    pub calibration_batch: usize,
    pub rate_min: f64,
    pub rate_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            iterations: 240_000,
            augment: true,
            seed: 0,
            t0_ms: 50.0,
            surrogate: SurrogateConfig::default(),
            checkpoint_every: 1000,
            validate_every: 0,
            validation_sequences: 0,
            calibrate: true,
            calibration_batch: 8,
            rate_min: 0.01,
            rate_max: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::config("training.lr", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("training.beta", "moment decays must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("training.eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if !(self.rate_min > 0.0 && self.rate_min < self.rate_max) {
            return Err(Error::config("training.rate_min", "need 0 < rate_min < rate_max"));
        }
        self.surrogate.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub iteration: usize,
    pub loss: f64,
    pub median_relative_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    pub validation: Vec<ValidationEntry>,
    pub initial_rates: Vec<f64>,
}

/// Mean loss and median norm relative error of `net` on a split.
pub fn evaluate_split<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    split: Split,
    limit: usize,
    loss_cfg: &LossConfig,
) -> Result<(f64, Option<f64>)> {
    let mut entries = data.split(split);
    if limit > 0 {
        entries.truncate(limit);
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!("{split} split")));
    }
    let results: Vec<Result<(f64, metrics::Sequence)>> = entries
        .par_iter()
        .map(|e| {
            let (x, gt) = data.load(e, net.config().dt_ms)?;
            let pred = net.predict(&x)?;
            let l = loss(&pred, &gt, loss_cfg)?.as_f64();
            Ok((l, metrics::Sequence::new(pred.to_f64(), gt.values)))
        })
        .collect();
    let mut total = 0.0;
    let mut seqs = Vec::with_capacity(results.len());
    for r in results {
        let (l, s) = r?;
        total += l;
        seqs.push(s);
    }
    let report = metrics::compute_metrics(&seqs, loss_cfg.first_bin())?;
    Ok((total / seqs.len() as f64, report.median_norm_relative_error))
}

/// Trains `net` on the train split with ADAM on averaged minibatch
/// gradients. Deterministic for a fixed seed regardless of thread count.
/// When `out_dir` is given, writes `train_log.csv`, `validation.csv` and
/// checkpoints there.
pub fn train_loop(
    net: &mut Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    train_loop_with_progress(net, data, cfg, loss_cfg, out_dir, |_| {})
}

/// [`train_loop`] with a callback after every iteration.
pub fn train_loop_with_progress(
    net: &mut Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogEntry),
) -> Result<TrainReport> {
    cfg.validate()?;
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    let dt = net.config().dt_ms;
    let mut rng = seed::rng(seed::derive_tagged(cfg.seed, 0, "train"));

    let mut initial_rates = Vec::new();
    if cfg.calibrate {
        let n = cfg.calibration_batch.max(1).min(train.len());
        let batch: Vec<SpikeTensor> = train[..n]
            .iter()
            .map(|e| data.load(e, dt).map(|(x, _)| x))
            .collect::<Result<_>>()?;
        initial_rates = net.calibrate_firing_rates(&batch, cfg.rate_min, cfg.rate_max)?;
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "iteration,loss").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut params = net.flat_parameters();
    let mut adam = Adam::new(
        params.len(),
        cfg.lr as f32,
        cfg.beta1 as f32,
        cfg.beta2 as f32,
        cfg.eps as f32,
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let has_val = !data.split(Split::Val).is_empty();

    for iteration in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let flags = if cfg.augment {
                Augmentation::sample(&mut rng)
            } else {
                Augmentation::default()
            };
            batch.push((order[cursor], flags));
            cursor += 1;
        }

        let results: Vec<Result<(f32, Gradients<f32>)>> = batch
            .par_iter()
            .map(|&(i, flags)| {
                let (x, gt) = data.load(train[i], dt)?;
                let (x, gt) = augment(&x, &gt, flags);
                sample_gradient(net, &x, &gt, loss_cfg, &cfg.surrogate)
            })
            .collect();
        let mut total = Gradients::zeros_like(net);
        let mut batch_loss = 0.0f64;
        for r in results {
            let (l, g) = r?;
            batch_loss += l as f64;
            total.add_assign(&g);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: batch_loss,
            });
        }
        total.scale(1.0 / cfg.batch_size as f32);
        adam.step(&mut params, &total.flatten());
        net.set_flat_parameters(&params)?;

        let entry = LogEntry {
            iteration,
            loss: batch_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{},{}", entry.iteration, entry.loss).map_err(|e| Error::io(&*path, e))?;
        }
        progress(&entry);
        log.push(entry);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                save_checkpoint(net, dir.join("checkpoint.snn"))?;
            }
        }
        let validate_now = has_val
            && (iteration == cfg.iterations || (cfg.validate_every > 0 && iteration % cfg.validate_every == 0));
        if validate_now {
            let (l, med) = evaluate_split(net, data, Split::Val, cfg.validation_sequences, loss_cfg)?;
            validation.push(ValidationEntry {
                iteration,
                loss: l,
                median_relative_error: med,
            });
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(net, dir.join("checkpoint.snn"))?;
        let path = dir.join("validation.csv");
        let mut text = String::from("iteration,loss,median_relative_error\n");
        for v in &validation {
            let med = v.median_relative_error.map(|m| m.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{}\n", v.iteration, v.loss, med));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainReport {
        log,
        validation,
        initial_rates,
    })
}
