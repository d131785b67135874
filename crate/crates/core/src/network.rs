//! Feedforward convolutional SNN: spiking strided convolutions, global
//! average spike pooling (GASP) and a non-spiking linear readout that
//! produces angular velocity at every time bin.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::event::SpikeTensor;
use crate::scalar::Scalar;
use crate::seed;
use crate::srm::{self, KernelKind, KernelParams, KernelTable};

/// Number of regressed outputs: tilt, pan and roll rates.
pub const OUTPUTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub stride: usize,
    pub tau_s: f64,
    pub tau_r: f64,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// One channel per event polarity.
    pub input_channels: usize,
    pub dt_ms: f64,
    pub threshold: f64,
    pub conv: Vec<ConvSpec>,
    /// Spike response time constant of the readout, ms.
    pub readout_tau_s: f64,
    /// Initial stretch excluded from loss and evaluation, ms.
    pub settling_ms: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_width: 240,
            input_height: 180,
            input_channels: 2,
            dt_ms: 1.0,
            threshold: 1.0,
            conv: default_conv_stack(),
            readout_tau_s: 8.0,
            settling_ms: 50.0,
        }
    }
}

/// Five 3×3 spiking convolutions with 16…256 channels.
pub fn default_conv_stack() -> Vec<ConvSpec> {
    let channels = [16, 32, 64, 128, 256];
    let strides = [2, 2, 2, 2, 1];
    let taus = [(2.0, 1.0), (2.0, 1.0), (4.0, 4.0), (4.0, 4.0), (4.0, 4.0)];
    let mut in_channels = 2;
    channels
        .iter()
        .zip(strides)
        .zip(taus)
        .map(|((&out_channels, stride), (tau_s, tau_r))| {
            let spec = ConvSpec {
                in_channels,
                out_channels,
                kernel: 3,
                stride,
                tau_s,
                tau_r,
            };
            in_channels = out_channels;
            spec
        })
        .collect()
}

impl NetworkConfig {
    pub fn with_input(mut self, width: usize, height: usize) -> Self {
        self.input_width = width;
        self.input_height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 || self.input_channels == 0 {
            return Err(Error::config("network.input", "input geometry must be non-empty"));
        }
        if !(self.dt_ms > 0.0) {
            return Err(Error::config("network.dt_ms", "must be positive"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config("network.threshold", "must be positive"));
        }
        if self.conv.is_empty() {
            return Err(Error::config("network.conv", "at least one convolution layer is required"));
        }
        let mut channels = self.input_channels;
        let mut tau_prev = (0.0, 0.0);
        for (i, c) in self.conv.iter().enumerate() {
            let loc = format!("network.conv[{i}]");
            if c.in_channels != channels {
                return Err(Error::config(
                    loc,
                    format!("in_channels {} does not match the {channels} channels feeding it", c.in_channels),
                ));
            }
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::config(loc, "channels, kernel and stride must be positive"));
            }
            if !(c.tau_s > 0.0) || !(c.tau_r > 0.0) {
                return Err(Error::config(loc, format!("time constants must be positive, got ({}, {})", c.tau_s, c.tau_r)));
            }
            if c.tau_s < tau_prev.0 || c.tau_r < tau_prev.1 {
                return Err(Error::config(loc, "time constants must not decrease with depth"));
            }
            tau_prev = (c.tau_s, c.tau_r);
            channels = c.out_channels;
        }
        if !(self.readout_tau_s > 0.0) {
            return Err(Error::config("network.readout_tau_s", "must be positive"));
        }
        if self.readout_tau_s < tau_prev.0 {
            return Err(Error::config("network.readout_tau_s", "must not be smaller than the last convolution's tau_s"));
        }
        if !(self.settling_ms >= 0.0) {
            return Err(Error::config("network.settling_ms", "must be non-negative"));
        }
        Ok(())
    }

    /// Geometry of every convolution for the configured input.
    pub fn geometries(&self) -> Vec<ConvGeometry> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        self.conv
            .iter()
            .map(|c| {
                let g = ConvGeometry::new(c.in_channels, h, w, c.out_channels, c.kernel, c.stride);
                h = g.out_height;
                w = g.out_width;
                g
            })
            .collect()
    }

    /// Layer list: every convolution, then GASP, then the readout.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self
            .conv
            .iter()
            .map(|c| LayerSpec {
                kind: LayerKind::SpikingConv,
                kernel: c.kernel,
                stride: c.stride,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                tau_s: c.tau_s,
                tau_r: Some(c.tau_r),
            })
            .collect();
        let last = self.conv.last().map(|c| c.out_channels).unwrap_or(0);
        specs.push(LayerSpec {
            kind: LayerKind::Gasp,
            kernel: 0,
            stride: 0,
            in_channels: last,
            out_channels: last,
            tau_s: self.conv.last().map(|c| c.tau_s).unwrap_or(0.0),
            tau_r: None,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Readout,
            kernel: 0,
            stride: 0,
            in_channels: last,
            out_channels: OUTPUTS,
            tau_s: self.readout_tau_s,
            tau_r: None,
        });
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.geometries().iter().map(|g| g.weight_len()).sum::<usize>()
            + OUTPUTS * self.conv.last().map(|c| c.out_channels).unwrap_or(0)
    }

    pub fn settling_bins(&self) -> usize {
        (self.settling_ms / self.dt_ms).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    SpikingConv,
    Gasp,
    Readout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub tau_s: f64,
    pub tau_r: Option<f64>,
}

/// Predicted angular velocity per time bin, rad/s.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSignal<T> {
    pub dt_ms: f64,
    pub settling_ms: f64,
    pub values: Vec<[T; OUTPUTS]>,
}

impl<T: Scalar> PredictionSignal<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<[f64; OUTPUTS]> {
        self.values.iter().map(|v| v.map(|x| x.as_f64())).collect()
    }
}

/// Spike counts per channel and bin after global average spike pooling,
/// together with the `1/(W·H)` scale applied by downstream synapses.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledTrains {
    pub channels: usize,
    pub bins: usize,
    pub counts: Vec<u32>,
    /// Neurons per channel in the pooled layer, `W·H`.
    pub neurons_per_channel: usize,
}

impl PooledTrains {
    pub fn scale(&self) -> f64 {
        1.0 / self.neurons_per_channel as f64
    }
}

/// Sums spikes over all spatial positions, per channel and bin.
pub fn gasp(spikes: &SpikeTensor) -> PooledTrains {
    let (channels, height, width, bins) = spikes.shape();
    let mut counts = vec![0u32; channels * bins];
    for c in 0..channels {
        let row = &mut counts[c * bins..(c + 1) * bins];
        for y in 0..height {
            for x in 0..width {
                for (acc, &s) in row.iter_mut().zip(spikes.train(c, y, x)) {
                    *acc += s as u32;
                }
            }
        }
    }
    PooledTrains {
        channels,
        bins,
        counts,
        neurons_per_channel: height * width,
    }
}

/// Non-spiking readout `ω(t) = (1/N)·(ε ∗ W·g)(t)`. `weights` is row-major
/// `3 × C`.
pub fn readout<T: Scalar>(pooled: &[T], channels: usize, bins: usize, weights: &[T], neurons_per_channel: usize, table: &KernelTable<T>) -> Vec<[T; OUTPUTS]> {
    let inv_n = T::one() / T::lit(neurons_per_channel as f64);
    let mut out = vec![[T::zero(); OUTPUTS]; bins];
    let mut mixed = vec![T::zero(); bins];
    let mut filtered = vec![T::zero(); bins];
    for a in 0..OUTPUTS {
        mixed.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..channels {
            let w = weights[a * channels + c];
            if w == T::zero() {
                continue;
            }
            for (m, &g) in mixed.iter_mut().zip(&pooled[c * bins..(c + 1) * bins]) {
                *m += w * g;
            }
        }
        srm::causal_filter(&mixed, &table.values, &mut filtered);
        for (o, &f) in out.iter_mut().zip(&filtered) {
            o[a] = f * inv_n;
        }
    }
    out
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub input: SpikeTensor,
    /// Pre-reset potentials of each convolution layer, `(channel, y, x, bin)`.
    pub potentials: Vec<Vec<T>>,
    /// Output spikes of each convolution layer.
    pub spikes: Vec<Vec<u8>>,
    /// GASP output as scalars, `C × bins`.
    pub pooled: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn bins(&self) -> usize {
        self.input.bins()
    }

    /// Mean spikes per neuron per bin of each convolution layer.
    pub fn firing_rates(&self) -> Vec<f64> {
        self.spikes
            .iter()
            .map(|s| s.iter().map(|&v| v as usize).sum::<usize>() as f64 / s.len().max(1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    geometries: Vec<ConvGeometry>,
    params: Vec<KernelParams<T>>,
    psp_tables: Vec<KernelTable<T>>,
    readout_table: KernelTable<T>,
    /// Convolution weights, `(out, in, ky, kx)` per layer.
    pub conv_weights: Vec<Vec<T>>,
    /// Readout weights, row-major `3 × C`.
    pub readout_weights: Vec<T>,
}

/// Builds the network described by `config` with zero-mean uniform weights
/// of scale `1/√fan_in`.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    let mut net = Network::zeros(config)?;
    let mut rng = seed::rng(seed::derive_tagged(seed, 0, "init"));
    for (w, g) in net.conv_weights.iter_mut().zip(&net.geometries) {
        let bound = 1.0 / ((g.in_channels * g.kernel * g.kernel) as f64).sqrt();
        w.iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-bound..bound)));
    }
    let channels = net.pooled_channels();
    let bound = 1.0 / (channels as f64).sqrt();
    net.readout_weights
        .iter_mut()
        .for_each(|v| *v = T::lit(rng.gen_range(-bound..bound)));
    Ok(net)
}

impl<T: Scalar> Network<T> {
    /// Network with all weights zero.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let dt = T::lit(config.dt_ms);
        let geometries = config.geometries();
        let mut params = Vec::new();
        let mut psp_tables = Vec::new();
        for (i, c) in config.conv.iter().enumerate() {
            let p = KernelParams::new(T::lit(c.tau_s), T::lit(c.tau_r), T::lit(config.threshold))
                .map_err(|e| Error::config(format!("network.conv[{i}]"), e.to_string()))?;
            psp_tables.push(srm::discretize_kernel(KernelKind::SpikeResponse, &p, dt)?);
            params.push(p);
        }
        let readout_params = KernelParams::new(T::lit(config.readout_tau_s), T::one(), T::lit(config.threshold))?;
        let readout_table = srm::discretize_kernel(KernelKind::SpikeResponse, &readout_params, dt)?;
        let conv_weights = geometries.iter().map(|g| vec![T::zero(); g.weight_len()]).collect();
        let channels = config.conv.last().map(|c| c.out_channels).unwrap_or(0);
        Ok(Network {
            config: config.clone(),
            geometries,
            params,
            psp_tables,
            readout_table,
            conv_weights,
            readout_weights: vec![T::zero(); OUTPUTS * channels],
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn geometries(&self) -> &[ConvGeometry] {
        &self.geometries
    }

    pub fn kernel_params(&self) -> &[KernelParams<T>] {
        &self.params
    }

    pub fn psp_tables(&self) -> &[KernelTable<T>] {
        &self.psp_tables
    }

    pub fn readout_table(&self) -> &KernelTable<T> {
        &self.readout_table
    }

    pub fn conv_layers(&self) -> usize {
        self.geometries.len()
    }

    pub fn pooled_channels(&self) -> usize {
        self.geometries.last().map(|g| g.out_channels).unwrap_or(0)
    }

    /// Neurons per channel of the last convolution, `N = W·H`.
    pub fn pooled_size(&self) -> usize {
        self.geometries
            .last()
            .map(|g| g.out_height * g.out_width)
            .unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_weights.iter().map(Vec::len).sum::<usize>() + self.readout_weights.len()
    }

    /// All parameters flattened in layer order, readout last.
    pub fn flat_parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for w in &self.conv_weights {
            out.extend_from_slice(w);
        }
        out.extend_from_slice(&self.readout_weights);
        out
    }

    pub fn set_flat_parameters(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for w in &mut self.conv_weights {
            let len = w.len();
            w.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        self.readout_weights.copy_from_slice(&flat[offset..]);
        Ok(())
    }

    /// Converts the network to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.conv_weights.iter_mut().zip(&self.conv_weights) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.as_f64());
            }
        }
        for (d, s) in out.readout_weights.iter_mut().zip(&self.readout_weights) {
            *d = U::lit(s.as_f64());
        }
        out
    }

    fn check_input(&self, input: &SpikeTensor) -> Result<()> {
        let (c, h, w, bins) = input.shape();
        if (c, h, w) != (self.config.input_channels, self.config.input_height, self.config.input_width) {
            return Err(Error::Shape(format!(
                "input {c}x{h}x{w} does not match network input {}x{}x{}",
                self.config.input_channels, self.config.input_height, self.config.input_width
            )));
        }
        if (input.dt_ms() - self.config.dt_ms).abs() > 1e-12 {
            return Err(Error::Shape(format!(
                "input bin width {} ms differs from network bin width {} ms",
                input.dt_ms(),
                self.config.dt_ms
            )));
        }
        if bins == 0 {
            return Err(Error::Shape("input has no time bins".into()));
        }
        Ok(())
    }

    /// Runs one spiking convolution layer on binary input spikes.
    pub(crate) fn conv_layer(&self, layer: usize, input: &[u8], bins: usize) -> Result<(Vec<T>, Vec<u8>)> {
        let g = &self.geometries[layer];
        let mut z = vec![T::zero(); g.out_neurons() * bins];
        conv::forward_spikes(g, &self.conv_weights[layer], input, bins, &mut z);
        let table = &self.psp_tables[layer].values;
        let p = &self.params[layer];
        let decay = p.refractory_decay(T::lit(self.config.dt_ms));
        let mut filtered = vec![T::zero(); bins];
        let mut potentials = vec![T::zero(); z.len()];
        let mut spikes = vec![0u8; z.len()];
        for n in 0..g.out_neurons() {
            let range = n * bins..(n + 1) * bins;
            srm::causal_filter(&z[range.clone()], table, &mut filtered);
            srm::integrate_neuron(&filtered, p.threshold, decay, &mut potentials[range.clone()], &mut spikes[range])
                .map_err(|bin| Error::Simulation {
                    layer,
                    bin,
                    message: format!("non-finite potential at neuron {n}"),
                })?;
        }
        Ok((potentials, spikes))
    }

    /// Pooled spike counts of the last layer as scalars, `C × bins`.
    pub(crate) fn pool(&self, spikes: &[u8], bins: usize) -> Vec<T> {
        let channels = self.pooled_channels();
        let n = self.pooled_size();
        let mut pooled = vec![T::zero(); channels * bins];
        for c in 0..channels {
            let dst = &mut pooled[c * bins..(c + 1) * bins];
            for p in 0..n {
                let src = &spikes[(c * n + p) * bins..(c * n + p + 1) * bins];
                for (d, &s) in dst.iter_mut().zip(src) {
                    if s != 0 {
                        *d += T::one();
                    }
                }
            }
        }
        pooled
    }

    /// Simulates the network on one input sequence.
    pub fn forward(&self, input: &SpikeTensor) -> Result<(PredictionSignal<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let bins = input.bins();
        let mut potentials = Vec::with_capacity(self.conv_layers());
        let mut spikes: Vec<Vec<u8>> = Vec::with_capacity(self.conv_layers());
        for layer in 0..self.conv_layers() {
            let src = if layer == 0 { input.data() } else { &spikes[layer - 1] };
            let (u, s) = self.conv_layer(layer, src, bins)?;
            potentials.push(u);
            spikes.push(s);
        }
        let pooled = self.pool(spikes.last().expect("at least one layer"), bins);
        let values = readout(
            &pooled,
            self.pooled_channels(),
            bins,
            &self.readout_weights,
            self.pooled_size(),
            &self.readout_table,
        );
        if let Some(k) = values.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Simulation {
                layer: self.conv_layers() + 1,
                bin: k,
                message: "non-finite readout".into(),
            });
        }
        Ok((
            PredictionSignal {
                dt_ms: self.config.dt_ms,
                settling_ms: self.config.settling_ms,
                values,
            },
            ForwardCache {
                input: input.clone(),
                potentials,
                spikes,
                pooled,
            },
        ))
    }

    /// Forward pass without retaining the cache.
    pub fn predict(&self, input: &SpikeTensor) -> Result<PredictionSignal<T>> {
        self.forward(input).map(|(p, _)| p)
    }

    /// Rescales each convolution layer in turn so that its mean firing rate
    /// on `batch` lands inside `[lo, hi]` spikes per neuron per bin.
    /// Returns the final rate of every layer.
    pub fn calibrate_firing_rates(&mut self, batch: &[SpikeTensor], lo: f64, hi: f64) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Empty("calibration batch".into()));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let target = (lo * hi).sqrt();
        let mut inputs: Vec<Vec<u8>> = batch.iter().map(|x| x.data().to_vec()).collect();
        let bins: Vec<usize> = batch.iter().map(|x| x.bins()).collect();
        let mut rates = Vec::new();
        for layer in 0..self.conv_layers() {
            let base = self.conv_weights[layer].clone();
            let rate_at = |net: &mut Self, factor: f64, inputs: &[Vec<u8>]| -> Result<(f64, Vec<Vec<u8>>)> {
                net.conv_weights[layer] = base.iter().map(|&w| w * T::lit(factor)).collect();
                let mut total = 0usize;
                let mut cells = 0usize;
                let mut outs = Vec::with_capacity(inputs.len());
                for (x, &b) in inputs.iter().zip(&bins) {
                    let (_, s) = net.conv_layer(layer, x, b)?;
                    total += s.iter().map(|&v| v as usize).sum::<usize>();
                    cells += s.len();
                    outs.push(s);
                }
                Ok((total as f64 / cells.max(1) as f64, outs))
            };
            let (mut rate, mut outs) = rate_at(self, 1.0, &inputs)?;
            if !(lo..=hi).contains(&rate) {
                // rate grows with the weight scale; bisect on log(factor)
                let (mut a, mut b) = (-12.0f64, 12.0f64);
                let mut best = (f64::INFINITY, 1.0f64);
                for _ in 0..40 {
                    let mid = 0.5 * (a + b);
                    let (r, o) = rate_at(self, mid.exp(), &inputs)?;
                    let miss = (r.max(1e-12) / target).ln().abs();
                    if miss < best.0 {
                        best = (miss, mid.exp());
                    }
                    if (lo..=hi).contains(&r) && miss < 0.2 {
                        rate = r;
                        outs = o;
                        best = (0.0, mid.exp());
                        break;
                    }
                    if r < target {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                if best.0 != 0.0 {
                    let (r, o) = rate_at(self, best.1, &inputs)?;
                    rate = r;
                    outs = o;
                }
                self.conv_weights[layer] = base.iter().map(|&w| w * T::lit(best.1)).collect();
            }
            rates.push(rate);
            inputs = outs;
        }
        Ok(rates)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SNNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: magic `SNNC`, `u32` format version, `u32` length and
/// JSON network config, `u32` tensor count, then per tensor a `u32`-prefixed
/// name, `u32` rank, `u32` dims and little-endian `f32` data.
pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&net.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let mut tensors: Vec<(String, Vec<usize>, &[T])> = net
        .conv_weights
        .iter()
        .zip(&net.geometries)
        .enumerate()
        .map(|(i, (w, g))| {
            (
                format!("conv{}.weight", i + 1),
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                w.as_slice(),
            )
        })
        .collect();
    tensors.push((
        "readout.weight".into(),
        vec![OUTPUTS, net.pooled_channels()],
        net.readout_weights.as_slice(),
    ));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut cursor = 0usize;
    let err = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor + n > bytes.len() {
            return Err(err(cursor, format!("truncated checkpoint, wanted {n} more bytes")));
        }
        let s = &bytes[cursor..cursor + n];
        cursor += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(err(0, "bad checkpoint magic".into()));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    let version = read_u32(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(err(4, format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(take(4)?) as usize;
    let config: NetworkConfig =
        serde_json::from_slice(take(len)?).map_err(|e| err(12, format!("bad config: {e}")))?;
    let mut net = Network::<T>::zeros(&config)?;
    let count = read_u32(take(4)?) as usize;
    if count != net.conv_layers() + 1 {
        return Err(err(16 + len, format!("expected {} tensors, found {count}", net.conv_layers() + 1)));
    }
    for i in 0..count {
        let name_len = read_u32(take(4)?) as usize;
        let name = String::from_utf8_lossy(take(name_len)?).into_owned();
        let rank = read_u32(take(4)?) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(take(4)?) as usize);
        }
        let numel: usize = dims.iter().product();
        let dst = if i < net.conv_layers() {
            &mut net.conv_weights[i]
        } else {
            &mut net.readout_weights
        };
        if numel != dst.len() {
            return Err(Error::Shape(format!("tensor {name} has {numel} values, expected {}", dst.len())));
        }
        let data = take(4 * numel)?;
        for (d, chunk) in dst.iter_mut().zip(data.chunks_exact(4)) {
            *d = T::lit(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_width: 12,
            input_height: 10,
            conv: vec![
                ConvSpec {
                    in_channels: 2,
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    tau_s: 2.0,
                    tau_r: 1.0,
                },
                ConvSpec {
                    in_channels: 4,
                    out_channels: 6,
                    kernel: 3,
                    stride: 1,
                    tau_s: 4.0,
                    tau_r: 4.0,
                },
            ],
            ..NetworkConfig::default()
        }
    }

    fn random_input(cfg: &NetworkConfig, bins: usize, p: f64, seed: u64) -> SpikeTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.input_channels * cfg.input_height * cfg.input_width * bins;
        let data = (0..n).map(|_| rng.gen_bool(p) as u8).collect();
        SpikeTensor::from_data(cfg.input_channels, cfg.input_height, cfg.input_width, bins, cfg.dt_ms, data).unwrap()
    }

    #[test]
    fn default_architecture_shapes_and_parameter_count() {
        let cfg = NetworkConfig::default();
        let sizes: Vec<_> = cfg.geometries().iter().map(|g| (g.out_width, g.out_height)).collect();
        assert_eq!(sizes, vec![(120, 90), (60, 45), (30, 23), (15, 12), (15, 12)]);
        let closed_form = 9 * (2 * 16 + 16 * 32 + 32 * 64 + 64 * 128 + 128 * 256) + 256 * 3;
        assert_eq!(cfg.parameter_count(), closed_form);
        let specs = cfg.layer_specs();
        assert_eq!(specs.len(), 7);
        assert_eq!(specs[5].kind, LayerKind::Gasp);
        assert_eq!(specs[6].kind, LayerKind::Readout);
        assert_eq!(specs[6].tau_s, 8.0);
        assert_eq!(specs[6].tau_r, None);
    }

    #[test]
    fn invalid_configs_name_the_layer() {
        let mut cfg = NetworkConfig::default();
        cfg.conv[2].in_channels = 48;
        match cfg.validate().unwrap_err() {
            Error::Config { location, .. } => assert_eq!(location, "network.conv[2]"),
            e => panic!("unexpected {e}"),
        }
        let mut cfg = NetworkConfig::default();
        cfg.conv[1].tau_r = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { location, .. }) if location == "network.conv[1]"));
        assert!(build_network::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn silent_input_gives_zero_prediction() {
        let cfg = tiny_config();
        let net: Network<f64> = build_network(&cfg, 1).unwrap();
        let (pred, cache) = net.forward(&random_input(&cfg, 30, 0.0, 0)).unwrap();
        assert_eq!(pred.len(), 30);
        assert!(pred.values.iter().all(|v| *v == [0.0; 3]));
        assert!(cache.spikes.iter().all(|s| s.iter().all(|&v| v == 0)));
    }

    #[test]
    fn single_spike_stays_inside_its_receptive_cone() {
        let cfg = tiny_config();
        let mut net: Network<f64> = build_network(&cfg, 3).unwrap();
        for w in &mut net.conv_weights {
            w.iter_mut().for_each(|v| *v = v.abs() * 8.0);
        }
        let bins = 25;
        let mut x = SpikeTensor::zeros(2, 10, 12, bins, 1.0);
        let (sy, sx, sk) = (4usize, 5usize, 3usize);
        x.set(0, sy, sx, sk, true);
        let (_, cache) = net.forward(&x).unwrap();
        // pixel interval reachable from the source at each layer
        let mut reach = ((sy, sy), (sx, sx));
        let mut any = false;
        for (l, g) in net.geometries().iter().enumerate() {
            let span = |(lo, hi): (usize, usize), pad: usize, len: usize| {
                let lo_out = (lo + pad).saturating_sub(g.kernel - 1).div_ceil(g.stride);
                let hi_out = ((hi + pad) / g.stride).min(len - 1);
                (lo_out, hi_out)
            };
            reach = (
                span(reach.0, g.pad_top, g.out_height),
                span(reach.1, g.pad_left, g.out_width),
            );
            for o in 0..g.out_channels {
                for y in 0..g.out_height {
                    for xx in 0..g.out_width {
                        let n = (o * g.out_height + y) * g.out_width + xx;
                        for k in 0..bins {
                            if cache.spikes[l][n * bins + k] != 0 {
                                any = true;
                                assert!(k > sk, "layer {l} spiked at bin {k} before the input");
                                assert!((reach.0 .0..=reach.0 .1).contains(&y), "layer {l} row {y}");
                                assert!((reach.1 .0..=reach.1 .1).contains(&xx), "layer {l} col {xx}");
                            }
                        }
                    }
                }
            }
        }
        assert!(any, "strong positive weights should propagate the spike");
    }

    #[test]
    fn readout_is_linear_in_its_weights() {
        let cfg = tiny_config();
        let net: Network<f64> = build_network(&cfg, 9).unwrap();
        let mut net2 = net.clone();
        net2.readout_weights.iter_mut().for_each(|w| *w *= 2.0);
        let x = random_input(&cfg, 40, 0.2, 4);
        let a = net.predict(&x).unwrap();
        let b = net2.predict(&x).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            for i in 0..3 {
                assert_eq!(v[i], 2.0 * u[i]);
            }
        }
    }

    #[test]
    fn gasp_counts() {
        let mut s = SpikeTensor::zeros(3, 4, 5, 6, 1.0);
        s.set(1, 2, 3, 4, true);
        let g = gasp(&s);
        assert_eq!(g.counts[bins_idx(1, 4, 6)], 1);
        assert_eq!(g.counts.iter().sum::<u32>(), 1);
        assert_eq!(g.scale(), 1.0 / 20.0);

        let mut full = SpikeTensor::zeros(2, 4, 5, 3, 1.0);
        for y in 0..4 {
            for x in 0..5 {
                full.set(0, y, x, 1, true);
            }
        }
        assert_eq!(gasp(&full).counts[bins_idx(0, 1, 3)], 20);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data = (0..3 * 4 * 5 * 6).map(|_| rng.gen_bool(0.4) as u8).collect();
        let r = SpikeTensor::from_data(3, 4, 5, 6, 1.0, data).unwrap();
        let g = gasp(&r);
        for c in 0..3 {
            for k in 0..6 {
                let mut brute = 0;
                for y in 0..4 {
                    for x in 0..5 {
                        brute += r.get(c, y, x, k) as u32;
                    }
                }
                assert_eq!(g.counts[bins_idx(c, k, 6)], brute);
            }
        }
    }

    fn bins_idx(c: usize, k: usize, bins: usize) -> usize {
        c * bins + k
    }

    #[test]
    fn readout_impulse_response_and_resolution_scaling() {
        let params = KernelParams::new(8.0, 1.0, 1.0).unwrap();
        let table = srm::discretize_kernel(KernelKind::SpikeResponse, &params, 1.0).unwrap();
        let bins = 30;
        let channels = 2;
        let mut pooled = vec![0.0f64; channels * bins];
        pooled[0] = 1.0;
        let w = vec![0.5, -1.0, 2.0, 3.0, 0.25, 7.0];
        let out = readout(&pooled, channels, bins, &w, 4, &table);
        for k in 0..bins {
            let eps = srm::spike_response(k as f64, 8.0);
            assert!((out[k][0] - 0.5 * eps / 4.0).abs() < 1e-15);
            assert!((out[k][1] - 2.0 * eps / 4.0).abs() < 1e-15);
            assert!((out[k][2] - 0.25 * eps / 4.0).abs() < 1e-15);
        }
        assert!(readout(&vec![0.0; channels * bins], channels, bins, &w, 4, &table)
            .iter()
            .all(|v| *v == [0.0; 3]));
        let doubled: Vec<f64> = pooled.iter().map(|g| 2.0 * g).collect();
        assert_eq!(readout(&doubled, channels, bins, &w, 8, &table), out);
    }

    #[test]
    fn prediction_is_causal_in_the_input() {
        let cfg = tiny_config();
        let net: Network<f64> = build_network(&cfg, 21).unwrap();
        let x = random_input(&cfg, 40, 0.3, 8);
        let base = net.predict(&x).unwrap();
        let mut y = x.clone();
        for c in 0..2 {
            for yy in 0..10 {
                for xx in 0..12 {
                    for k in 25..40 {
                        let v = !y.get(c, yy, xx, k);
                        y.set(c, yy, xx, k, v);
                    }
                }
            }
        }
        let changed = net.predict(&y).unwrap();
        assert_eq!(&base.values[..25], &changed.values[..25]);
    }

    #[test]
    fn calibration_brings_rates_into_band() {
        let cfg = tiny_config();
        let mut net: Network<f32> = build_network(&cfg, 5).unwrap();
        let batch: Vec<_> = (0..2).map(|s| random_input(&cfg, 40, 0.05, s)).collect();
        let rates = net.calibrate_firing_rates(&batch, 0.01, 0.2).unwrap();
        for r in rates {
            assert!((0.01..=0.2).contains(&r), "rate {r}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let net: Network<f32> = build_network(&cfg, 5).unwrap();
        let bytes = checkpoint_bytes(&net);
        let back: Network<f32> = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert!(checkpoint_from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
