//! Gradient verification on a tiny network.
//!
//! Spiking is discontinuous, so finite differences only validate the part of
//! the model that is smooth in its parameters. Three checks are run:
//!
//! * `readout-exact`: central differences of the loss with respect to the
//!   readout weights, which do not influence any spike.
//! * `adjoint-frozen`: the backward pass must be the exact transpose of the
//!   surrogate-linearized forward map, computed here independently in
//!   forward (tangent) mode.
//! * `descent-probe`: a small step against the gradient lowers the true
//!   spiking loss for most random initializations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::event::{AngularVelocitySignal, SpikeTensor};
use crate::network::{build_network, ConvSpec, ForwardCache, Network, NetworkConfig, OUTPUTS};
use crate::seed;
use crate::srm;
use crate::training::{backward_from_output, loss, sample_gradient, LossConfig, SurrogateConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub network: NetworkConfig,
    pub bins: usize,
    pub t0_ms: f64,
    pub seed: u64,
    /// Probability of an input spike per cell.
    pub input_rate: f64,
    pub surrogate: SurrogateConfig,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub adjoint_tolerance: f64,
    pub probe_step: f64,
    pub probe_seeds: usize,
    pub probe_required: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            network: NetworkConfig {
                input_width: 8,
                input_height: 8,
                conv: vec![ConvSpec {
                    in_channels: 2,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    tau_s: 2.0,
                    tau_r: 4.0,
                }],
                readout_tau_s: 4.0,
                settling_ms: 5.0,
                ..NetworkConfig::default()
            },
            bins: 20,
            t0_ms: 5.0,
            seed: 1,
            input_rate: 0.3,
            surrogate: SurrogateConfig::default(),
            fd_step: 1e-6,
            fd_tolerance: 1e-6,
            adjoint_tolerance: 1e-8,
            probe_step: 1e-4,
            probe_seeds: 10,
            probe_required: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Random binary input and a random smooth target for one trial.
pub fn random_problem(cfg: &GradCheckConfig, trial: u64) -> (SpikeTensor, AngularVelocitySignal) {
    let mut rng = seed::rng(seed::derive_tagged(cfg.seed, trial, "problem"));
    let n = &cfg.network;
    let mut x = SpikeTensor::zeros(n.input_channels, n.input_height, n.input_width, cfg.bins, n.dt_ms);
    for c in 0..n.input_channels {
        for y in 0..n.input_height {
            for xx in 0..n.input_width {
                for k in 0..cfg.bins {
                    if rng.gen_bool(cfg.input_rate) {
                        x.set(c, y, xx, k, true);
                    }
                }
            }
        }
    }
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let values = (0..cfg.bins)
        .map(|k| std::array::from_fn(|a| base[a] * (1.0 + 0.05 * k as f64)))
        .collect();
    let gt = AngularVelocitySignal::new((n.dt_ms * 1000.0).round() as u32, values);
    (x, gt)
}

fn loss_config(cfg: &GradCheckConfig) -> LossConfig {
    LossConfig {
        t0_ms: cfg.t0_ms,
        dt_ms: cfg.network.dt_ms,
    }
}

/// Relative discrepancy `‖a − b‖ / ‖b‖`.
fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

fn readout_exact(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let net: Network<f64> = build_network(&cfg.network, cfg.seed)?;
    let (x, gt) = random_problem(cfg, 0);
    let lc = loss_config(cfg);
    let (_, grads) = sample_gradient(&net, &x, &gt, &lc, &cfg.surrogate)?;
    let mut fd = vec![0.0; net.readout_weights.len()];
    let mut probe = net.clone();
    for (i, d) in fd.iter_mut().enumerate() {
        let w = net.readout_weights[i];
        probe.readout_weights[i] = w + cfg.fd_step;
        let up = loss(&probe.predict(&x)?, &gt, &lc)?;
        probe.readout_weights[i] = w - cfg.fd_step;
        let down = loss(&probe.predict(&x)?, &gt, &lc)?;
        probe.readout_weights[i] = w;
        *d = (up - down) / (2.0 * cfg.fd_step);
    }
    let gap = relative_gap(&grads.readout, &fd);
    Ok(CheckResult {
        name: "readout-exact".into(),
        value: gap,
        tolerance: cfg.fd_tolerance,
        passed: gap < cfg.fd_tolerance,
        detail: format!("{} readout weights, step {:e}", fd.len(), cfg.fd_step),
    })
}

/// `out += W ⊛ x` in gather form over dense inputs.
fn gather_conv(g: &ConvGeometry, w: &[f64], x: &[f64], bins: usize, out: &mut [f64]) {
    for o in 0..g.out_channels {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let m = (o * g.out_height + oy) * g.out_width + ox;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_width as isize {
                                continue;
                            }
                            let n = (c * g.in_height + iy as usize) * g.in_width + ix as usize;
                            let wv = w[g.weight_index(o, c, ky, kx)];
                            for k in 0..bins {
                                out[m * bins + k] += wv * x[n * bins + k];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Directional derivative of the network output along parameter direction
/// `v`, with spike generation linearized by the surrogate.
pub fn tangent_output(
    net: &Network<f64>,
    cache: &ForwardCache<f64>,
    v_conv: &[Vec<f64>],
    v_readout: &[f64],
    surrogate: &SurrogateConfig,
) -> Vec<[f64; OUTPUTS]> {
    let bins = cache.bins();
    let dt = net.config().dt_ms;
    let mut s_dot = vec![0.0; cache.input.data().len()];
    for layer in 0..net.conv_layers() {
        let g = &net.geometries()[layer];
        let s: Vec<f64> = if layer == 0 {
            cache.input.data().iter().map(|&b| b as f64).collect()
        } else {
            cache.spikes[layer - 1].iter().map(|&b| b as f64).collect()
        };
        let mut z_dot = vec![0.0; g.out_neurons() * bins];
        gather_conv(g, &v_conv[layer], &s, bins, &mut z_dot);
        gather_conv(g, &net.conv_weights[layer], &s_dot, bins, &mut z_dot);
        let p = &net.kernel_params()[layer];
        let decay = p.refractory_decay(dt);
        let reset = -2.0 * p.threshold;
        let eps = &net.psp_tables()[layer].values;
        let u = &cache.potentials[layer];
        let mut next = vec![0.0; g.out_neurons() * bins];
        let mut a_dot = vec![0.0; bins];
        for n in 0..g.out_neurons() {
            let r = n * bins..(n + 1) * bins;
            srm::causal_filter(&z_dot[r.clone()], eps, &mut a_dot);
            let mut r_dot = 0.0;
            for k in 0..bins {
                let u_dot = a_dot[k] + r_dot;
                let sd = surrogate.derivative(u[n * bins + k], p.threshold) * u_dot;
                next[n * bins + k] = sd;
                r_dot = decay * (r_dot + reset * sd);
            }
        }
        s_dot = next;
    }

    let channels = net.pooled_channels();
    let n_pool = net.pooled_size();
    let mut g_dot = vec![0.0; channels * bins];
    for c in 0..channels {
        for p in 0..n_pool {
            for k in 0..bins {
                g_dot[c * bins + k] += s_dot[(c * n_pool + p) * bins + k];
            }
        }
    }
    let table = &net.readout_table().values;
    let mut out = vec![[0.0; OUTPUTS]; bins];
    let mut mixed = vec![0.0; bins];
    let mut filtered = vec![0.0; bins];
    for a in 0..OUTPUTS {
        mixed.iter_mut().for_each(|m| *m = 0.0);
        for c in 0..channels {
            for k in 0..bins {
                mixed[k] += v_readout[a * channels + c] * cache.pooled[c * bins + k]
                    + net.readout_weights[a * channels + c] * g_dot[c * bins + k];
            }
        }
        srm::causal_filter(&mixed, table, &mut filtered);
        for k in 0..bins {
            out[k][a] = filtered[k] / n_pool as f64;
        }
    }
    out
}

fn adjoint_frozen(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let net: Network<f64> = build_network(&cfg.network, cfg.seed)?;
    let (x, _) = random_problem(cfg, 0);
    let (_, cache) = net.forward(&x)?;
    let mut rng = seed::rng(seed::derive_tagged(cfg.seed, 0, "adjoint"));
    let v_conv: Vec<Vec<f64>> = net
        .conv_weights
        .iter()
        .map(|w| (0..w.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let v_readout: Vec<f64> = (0..net.readout_weights.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<[f64; OUTPUTS]> = (0..cache.bins())
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();

    let jv = tangent_output(&net, &cache, &v_conv, &v_readout, &cfg.surrogate);
    let lhs: f64 = jv.iter().zip(&w).map(|(a, b)| (0..OUTPUTS).map(|i| a[i] * b[i]).sum::<f64>()).sum();
    let grads = backward_from_output(&net, &cache, &w, &cfg.surrogate)?;
    let v_flat: Vec<f64> = v_conv.iter().flatten().chain(&v_readout).copied().collect();
    let rhs: f64 = grads.flatten().iter().zip(&v_flat).map(|(a, b)| a * b).sum();
    let gap = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
    let rates = cache.firing_rates();
    Ok(CheckResult {
        name: "adjoint-frozen".into(),
        value: gap,
        tolerance: cfg.adjoint_tolerance,
        passed: gap < cfg.adjoint_tolerance,
        detail: format!("<Jv,w> = {lhs:.6e}, <v,J^T w> = {rhs:.6e}, firing rates {rates:.3?}"),
    })
}

fn descent_probe(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let lc = loss_config(cfg);
    let mut decreases = 0;
    for trial in 0..cfg.probe_seeds as u64 {
        let net: Network<f64> = build_network(&cfg.network, seed::derive_tagged(cfg.seed, trial, "probe"))?;
        let (x, gt) = random_problem(cfg, trial + 1);
        let (l0, grads) = sample_gradient(&net, &x, &gt, &lc, &cfg.surrogate)?;
        let mut stepped = net.clone();
        let params: Vec<f64> = net
            .flat_parameters()
            .iter()
            .zip(grads.flatten())
            .map(|(p, g)| p - cfg.probe_step * g)
            .collect();
        stepped.set_flat_parameters(&params)?;
        let l1 = loss(&stepped.predict(&x)?, &gt, &lc)?;
        if l1 < l0 {
            decreases += 1;
        }
    }
    Ok(CheckResult {
        name: "descent-probe".into(),
        value: decreases as f64,
        tolerance: cfg.probe_required as f64,
        passed: decreases >= cfg.probe_required,
        detail: format!("loss decreased in {decreases} of {} trials", cfg.probe_seeds),
    })
}

pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.network.validate()?;
    cfg.surrogate.validate()?;
    if cfg.bins == 0 || !(cfg.t0_ms >= 0.0) || cfg.t0_ms >= cfg.bins as f64 * cfg.network.dt_ms {
        return Err(Error::config("grad_check.t0_ms", "loss onset must fall inside the sequence"));
    }
    if !(0.0..=1.0).contains(&cfg.input_rate) {
        return Err(Error::config("grad_check.input_rate", "must be a probability"));
    }
    Ok(GradCheckReport {
        checks: vec![readout_exact(cfg)?, adjoint_frozen(cfg)?, descent_probe(cfg)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_network_passes_all_checks() {
        let report = run_grad_check(&GradCheckConfig::default()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}: {} (tol {}) {}", c.name, c.value, c.tolerance, c.detail);
        }
    }

    #[test]
    fn tangent_is_linear_in_direction() {
        let cfg = GradCheckConfig::default();
        let net: Network<f64> = build_network(&cfg.network, 3).unwrap();
        let (x, _) = random_problem(&cfg, 0);
        let (_, cache) = net.forward(&x).unwrap();
        let v: Vec<Vec<f64>> = net.conv_weights.iter().map(|w| vec![0.1; w.len()]).collect();
        let r = vec![0.2; net.readout_weights.len()];
        let v2: Vec<Vec<f64>> = v.iter().map(|w| w.iter().map(|x| 2.0 * x).collect()).collect();
        let r2: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let a = tangent_output(&net, &cache, &v, &r, &cfg.surrogate);
        let b = tangent_output(&net, &cache, &v2, &r2, &cfg.surrogate);
        for (x, y) in a.iter().zip(&b) {
            for i in 0..OUTPUTS {
                assert!((2.0 * x[i] - y[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_loss_onset_outside_sequence() {
        let cfg = GradCheckConfig {
            t0_ms: 25.0,
            ..GradCheckConfig::default()
        };
        assert!(run_grad_check(&cfg).is_err());
    }
}
