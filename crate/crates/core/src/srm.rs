//! Spike Response Model kernels and discrete-time single-layer dynamics.
//!
//! The spike response kernel is the normalized alpha function
//! `ε(t) = (t/τ_s)·exp(1 − t/τ_s)` and the refractory kernel is
//! `ν(t) = −2ϑ·exp(−t/τ_r)`, both zero for `t < 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::SpikeTensor;
use crate::scalar::Scalar;

/// Table entries beyond the cutoff are below this fraction of the peak.
pub const KERNEL_CUTOFF: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    /// Spike response time constant, ms.
    pub tau_s: T,
    /// Refractory time constant, ms.
    pub tau_r: T,
    /// Firing threshold.
    pub threshold: T,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(tau_s: T, tau_r: T, threshold: T) -> Result<Self> {
        let p = KernelParams {
            tau_s,
            tau_r,
            threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_s", self.tau_s), ("tau_r", self.tau_r), ("threshold", self.threshold)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Per-bin decay of the refractory trace.
    pub fn refractory_decay(&self, dt_ms: T) -> T {
        (-dt_ms / self.tau_r).exp()
    }
}

/// Spike response kernel `ε(t)`.
#[inline]
pub fn spike_response<T: Scalar>(t: T, tau_s: T) -> T {
    if t < T::zero() {
        T::zero()
    } else {
        let r = t / tau_s;
        r * (T::one() - r).exp()
    }
}

/// Refractory kernel `ν(t)`.
#[inline]
pub fn refractory<T: Scalar>(t: T, tau_r: T, threshold: T) -> T {
    if t < T::zero() {
        T::zero()
    } else {
        -T::lit(2.0) * threshold * (-t / tau_r).exp()
    }
}

/// Evaluates `(ε(t), ν(t))` at time `t` in ms.
pub fn eval_kernels<T: Scalar>(t: T, params: &KernelParams<T>) -> (T, T) {
    (
        spike_response(t, params.tau_s),
        refractory(t, params.tau_r, params.threshold),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    SpikeResponse,
    Refractory,
}

/// A kernel sampled at `t = 0, Δt, 2Δt, …` up to its cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTable<T> {
    pub kind: KernelKind,
    pub dt_ms: T,
    pub values: Vec<T>,
}

impl<T: Scalar> KernelTable<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Samples a kernel on the bin grid, truncating once it stays below
/// [`KERNEL_CUTOFF`] of its peak magnitude.
pub fn discretize_kernel<T: Scalar>(kind: KernelKind, params: &KernelParams<T>, dt_ms: T) -> Result<KernelTable<T>> {
    if !(dt_ms > T::zero()) {
        return Err(Error::config("dt_ms", format!("must be positive, got {dt_ms}")));
    }
    params.validate()?;
    let cutoff = T::lit(KERNEL_CUTOFF);
    let mut values = Vec::new();
    let mut j = 0usize;
    loop {
        let t = dt_ms * T::lit(j as f64);
        let (v, past_peak, peak) = match kind {
            KernelKind::SpikeResponse => (spike_response(t, params.tau_s), t > params.tau_s, T::one()),
            KernelKind::Refractory => (
                refractory(t, params.tau_r, params.threshold),
                true,
                T::lit(2.0) * params.threshold,
            ),
        };
        if past_peak && v.abs() < cutoff * peak {
            break;
        }
        values.push(v);
        j += 1;
    }
    Ok(KernelTable { kind, dt_ms, values })
}

/// Causal FIR filter along time: `out[k] = Σ_j table[j]·input[k − j]`.
pub fn causal_filter<T: Scalar>(input: &[T], table: &[T], out: &mut [T]) {
    let n = input.len();
    debug_assert_eq!(out.len(), n);
    for (k, o) in out.iter_mut().enumerate() {
        let taps = table.len().min(k + 1);
        let mut acc = T::zero();
        for j in 0..taps {
            acc += table[j] * input[k - j];
        }
        *o = acc;
    }
}

/// Adjoint of [`causal_filter`]: `out[k] = Σ_j table[j]·input[k + j]`.
pub fn causal_filter_adjoint<T: Scalar>(input: &[T], table: &[T], out: &mut [T]) {
    let n = input.len();
    debug_assert_eq!(out.len(), n);
    for (k, o) in out.iter_mut().enumerate() {
        let taps = table.len().min(n - k);
        let mut acc = T::zero();
        for j in 0..taps {
            acc += table[j] * input[k + j];
        }
        *o = acc;
    }
}

/// Convolves every spike train of `spikes` with the ε table. Output has the
/// tensor's `(channel, y, x, bin)` layout.
pub fn apply_psp<T: Scalar>(spikes: &SpikeTensor, table: &KernelTable<T>) -> Result<Vec<T>> {
    if (table.dt_ms.as_f64() - spikes.dt_ms()).abs() > 1e-12 {
        return Err(Error::Shape(format!(
            "kernel bin width {} ms differs from spike tensor bin width {} ms",
            table.dt_ms,
            spikes.dt_ms()
        )));
    }
    let bins = spikes.bins();
    let mut out = vec![T::zero(); spikes.data().len()];
    if bins == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(bins)
        .zip(spikes.data().par_chunks(bins))
        .for_each(|(o, s)| {
            for (k, &spike) in s.iter().enumerate() {
                if spike != 0 {
                    for (j, &w) in table.values.iter().enumerate().take(bins - k) {
                        o[k + j] += w;
                    }
                }
            }
        });
    Ok(out)
}

/// Potentials and spikes of a layer of neurons over all bins, neuron-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub neurons: usize,
    pub bins: usize,
    /// Potential at each bin before the bin's own refractory contribution;
    /// a spike is emitted iff it is at least the threshold.
    pub potentials: Vec<T>,
    pub spikes: Vec<u8>,
    /// Refractory trace of each neuron after the last bin.
    pub refractory: Vec<T>,
    pub threshold: T,
}

impl<T: Scalar> LayerState<T> {
    /// Potential at `(neuron, bin)` once the refractory response of a spike
    /// emitted in that bin has been applied.
    pub fn reset_potential(&self, neuron: usize, bin: usize) -> T {
        let i = neuron * self.bins + bin;
        if self.spikes[i] != 0 {
            self.potentials[i] - T::lit(2.0) * self.threshold
        } else {
            self.potentials[i]
        }
    }

    pub fn spike_count(&self) -> usize {
        self.spikes.iter().map(|&s| s as usize).sum()
    }
}

/// Runs the thresholding and refractory recurrence for one neuron.
///
/// `u[k] = input[k] + r[k]`; a spike at bin k adds `−2ϑ` to `r[k]` and the
/// trace decays by `exp(−Δt/τ_r)` per bin. Returns the final trace value.
#[inline]
pub(crate) fn integrate_neuron<T: Scalar>(
    input: &[T],
    threshold: T,
    decay: T,
    potentials: &mut [T],
    spikes: &mut [u8],
) -> Result<T, usize> {
    let reset = -T::lit(2.0) * threshold;
    let mut r = T::zero();
    for k in 0..input.len() {
        let u = input[k] + r;
        if !u.is_finite() {
            return Err(k);
        }
        potentials[k] = u;
        if u >= threshold {
            spikes[k] = 1;
            r += reset;
        } else {
            spikes[k] = 0;
        }
        r *= decay;
    }
    Ok(r)
}

/// Simulates a layer driven by already-weighted PSP input (neuron-major,
/// `bins` per neuron). `layer` is only used to label errors.
pub fn simulate_srm_layer<T: Scalar>(
    input: &[T],
    bins: usize,
    params: &KernelParams<T>,
    dt_ms: T,
    layer: usize,
) -> Result<LayerState<T>> {
    params.validate()?;
    if bins == 0 || input.len() % bins != 0 {
        return Err(Error::Shape(format!(
            "input length {} is not a multiple of {bins} bins",
            input.len()
        )));
    }
    let neurons = input.len() / bins;
    let decay = params.refractory_decay(dt_ms);
    let mut potentials = vec![T::zero(); input.len()];
    let mut spikes = vec![0u8; input.len()];
    let results: Vec<Result<T, usize>> = potentials
        .par_chunks_mut(bins)
        .zip(spikes.par_chunks_mut(bins))
        .zip(input.par_chunks(bins))
        .map(|((u, s), x)| integrate_neuron(x, params.threshold, decay, u, s))
        .collect();
    let mut refractory = Vec::with_capacity(neurons);
    for (n, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => refractory.push(v),
            Err(bin) => {
                return Err(Error::Simulation {
                    layer,
                    bin,
                    message: format!("non-finite potential at neuron {n}"),
                })
            }
        }
    }
    Ok(LayerState {
        neurons,
        bins,
        potentials,
        spikes,
        refractory,
        threshold: params.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn params(tau_s: f64, tau_r: f64) -> KernelParams<f64> {
        KernelParams::new(tau_s, tau_r, 1.0).unwrap()
    }

    #[test]
    fn kernel_point_values() {
        let p = params(2.0, 1.0);
        assert_eq!(eval_kernels(2.0, &p).0, 1.0);
        assert_eq!(eval_kernels(-1.0, &p), (0.0, 0.0));
        assert_relative_eq!(eval_kernels(1.0, &p).0, 0.824_360_635_350_064_1, max_relative = 1e-15);
        assert_eq!(eval_kernels(0.0, &p).1, -2.0);
        assert_eq!(eval_kernels(0.0f32, &KernelParams::new(2.0f32, 1.0, 1.0).unwrap()).1, -2.0);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(KernelParams::new(0.0, 1.0, 1.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 1.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn discretized_tables() {
        let p = params(2.0, 1.0);
        let eps = discretize_kernel(KernelKind::SpikeResponse, &p, 1.0).unwrap();
        assert_eq!(eps.values[0], 0.0);
        assert_eq!(eps.values[2], 1.0);
        let nu = discretize_kernel(KernelKind::Refractory, &p, 1.0).unwrap();
        assert_eq!(nu.values[0], -2.0);
        assert_relative_eq!(nu.values[1], -2.0 * (-1.0f64).exp(), max_relative = 1e-15);
        // e^{-t} < 1e-3 from t = 7 on
        assert_eq!(nu.len(), 7);
    }

    /// Bisection for the late root of ε(t) = 1e-3, then the first grid
    /// sample past it.
    fn cutoff_oracle(tau_s: f64, dt: f64) -> usize {
        let f = |t: f64| (t / tau_s) * (1.0 - t / tau_s).exp() - KERNEL_CUTOFF;
        let (mut lo, mut hi) = (tau_s, 100.0 * tau_s);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (hi / dt).floor() as usize + 1
    }

    #[test]
    fn epsilon_cutoff_matches_root_of_decay_equation() {
        for (tau, dt) in [(2.0, 1.0), (4.0, 1.0), (8.0, 1.0), (2.0, 0.5)] {
            let t = discretize_kernel(KernelKind::SpikeResponse, &params(tau, 1.0), dt).unwrap();
            assert_eq!(t.len(), cutoff_oracle(tau, dt), "tau {tau} dt {dt}");
            let beyond = spike_response(t.len() as f64 * dt, tau);
            assert!(beyond < KERNEL_CUTOFF);
        }
        assert_eq!(cutoff_oracle(2.0, 1.0), 21);
    }

    #[test]
    fn psp_of_silence_and_single_spike() {
        let table = discretize_kernel(KernelKind::SpikeResponse, &params(2.0, 1.0), 1.0).unwrap();
        let zeros = SpikeTensor::zeros(2, 2, 2, 30, 1.0);
        assert!(apply_psp(&zeros, &table).unwrap().iter().all(|&v| v == 0.0));

        let mut one = SpikeTensor::zeros(1, 1, 1, 30, 1.0);
        one.set(0, 0, 0, 0, true);
        let out = apply_psp(&one, &table).unwrap();
        assert_eq!(&out[..table.len()], &table.values[..]);
        assert!(out[table.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psp_superposition_matches_brute_force_convolution() {
        let table = discretize_kernel(KernelKind::SpikeResponse, &params(2.0, 1.0), 1.0).unwrap();
        let mut s = SpikeTensor::zeros(1, 1, 1, 10, 1.0);
        s.set(0, 0, 0, 0, true);
        s.set(0, 0, 0, 2, true);
        let out = apply_psp(&s, &table).unwrap();
        for k in 0..10 {
            let mut expected = 0.0;
            for (j, spike) in [(0usize, 1.0), (2, 1.0)] {
                if k >= j {
                    expected += spike * spike_response((k - j) as f64, 2.0);
                }
            }
            assert_relative_eq!(out[k], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn psp_rejects_mismatched_bin_width() {
        let table = discretize_kernel(KernelKind::SpikeResponse, &params(2.0, 1.0), 0.5).unwrap();
        assert!(apply_psp(&SpikeTensor::zeros(1, 1, 1, 4, 1.0), &table).is_err());
    }

    #[test]
    fn subthreshold_input_never_spikes() {
        let state = simulate_srm_layer(&[0.5f64; 40], 40, &params(2.0, 1.0), 1.0, 0).unwrap();
        assert_eq!(state.spike_count(), 0);
        assert!(state.potentials.iter().all(|&u| u == 0.5));
    }

    #[test]
    fn single_crossing_applies_full_reset() {
        let mut input = vec![0.0f64; 10];
        input[0] = 1.0;
        let state = simulate_srm_layer(&input, 10, &params(2.0, 1.0), 1.0, 0).unwrap();
        assert_eq!(state.spikes, vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(state.potentials[0], 1.0);
        assert_eq!(state.reset_potential(0, 0), -1.0);
        assert_relative_eq!(state.potentials[1], -2.0 * (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn non_finite_input_names_layer_and_bin() {
        let mut input = vec![0.0f64; 8];
        input[5] = f64::INFINITY;
        match simulate_srm_layer(&input, 4, &params(2.0, 1.0), 1.0, 3).unwrap_err() {
            Error::Simulation { layer, bin, .. } => assert_eq!((layer, bin), (3, 1)),
            e => panic!("unexpected {e}"),
        }
    }

    /// Spike times of `u(t) = c + Σ ν(t − t_f)` stepped at `dt` ms.
    fn fine_step_spike_times(c: f64, tau_r: f64, duration: f64, dt: f64) -> Vec<f64> {
        let mut times: Vec<f64> = Vec::new();
        let steps = (duration / dt).round() as usize;
        for i in 0..steps {
            let t = i as f64 * dt;
            let u = c + times.iter().map(|&tf| refractory(t - tf, tau_r, 1.0)).sum::<f64>();
            if u >= 1.0 {
                times.push(t);
            }
        }
        times
    }

    #[test]
    fn inter_spike_intervals_match_fine_step_oracle() {
        let bins = 100;
        let state = simulate_srm_layer(&vec![1.2f64; bins], bins, &params(2.0, 4.0), 1.0, 0).unwrap();
        let coarse: Vec<f64> = (0..bins).filter(|&k| state.spikes[k] == 1).map(|k| k as f64).collect();
        let fine = fine_step_spike_times(1.2, 4.0, bins as f64, 0.01);
        assert!(coarse.len() >= 5);
        let n = coarse.len().min(fine.len());
        assert!((coarse.len() as i64 - fine.len() as i64).abs() <= 1);
        for i in 1..n {
            let isi_coarse = coarse[i] - coarse[i - 1];
            let isi_fine = fine[i] - fine[i - 1];
            assert!((isi_coarse - isi_fine).abs() <= 1.0, "isi {i}: {isi_coarse} vs {isi_fine}");
        }
    }

    #[test]
    fn adjoint_filter_satisfies_inner_product_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for tau in [2.0, 4.0, 8.0] {
            let table = discretize_kernel(KernelKind::SpikeResponse, &params(tau, 1.0), 1.0).unwrap();
            let n = 60;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ax = vec![0.0; n];
            let mut aty = vec![0.0; n];
            causal_filter(&x, &table.values, &mut ax);
            causal_filter_adjoint(&y, &table.values, &mut aty);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
        }
    }

    proptest! {
        #[test]
        fn epsilon_is_unimodal_with_unit_peak(tau in 0.1f64..20.0, a in 0.01f64..0.99, b in 0.01f64..0.99) {
            prop_assert!((spike_response(tau, tau) - 1.0).abs() < 1e-12);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-6);
            prop_assert!(spike_response(lo * tau, tau) < spike_response(hi * tau, tau));
            prop_assert!(spike_response(tau / lo, tau) < spike_response(tau / hi, tau));
        }

        #[test]
        fn layer_outputs_are_causal(seed in any::<u64>(), cut in 1usize..30) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bins = 30;
            let input: Vec<f64> = (0..3 * bins).map(|_| rng.gen_range(-1.0..2.5)).collect();
            let p = params(2.0, 2.0);
            let full = simulate_srm_layer(&input, bins, &p, 1.0, 0).unwrap();
            let prefix: Vec<f64> = input.chunks(bins).flat_map(|c| c[..cut].to_vec()).collect();
            let part = simulate_srm_layer(&prefix, cut, &p, 1.0, 0).unwrap();
            for n in 0..3 {
                prop_assert_eq!(&full.spikes[n * bins..n * bins + cut], &part.spikes[n * cut..(n + 1) * cut]);
                prop_assert_eq!(&full.potentials[n * bins..n * bins + cut], &part.potentials[n * cut..(n + 1) * cut]);
            }

            let mut s = SpikeTensor::zeros(1, 1, 3, bins, 1.0);
            for k in 0..bins {
                if rng.gen_bool(0.3) { s.set(0, 0, k % 3, k, true); }
            }
            let table = discretize_kernel(KernelKind::SpikeResponse, &p, 1.0).unwrap();
            let a = apply_psp(&s, &table).unwrap();
            let b = apply_psp(&s.truncated(cut), &table).unwrap();
            for n in 0..3 {
                prop_assert_eq!(&a[n * bins..n * bins + cut], &b[n * cut..(n + 1) * cut]);
            }
        }

        #[test]
        fn longer_refractory_never_increases_spike_count(c in 1.0f64..5.0, t1 in 0.2f64..10.0, dt in 0.0f64..10.0) {
            let bins = 200;
            let input = vec![c; bins];
            let short = simulate_srm_layer(&input, bins, &params(2.0, t1), 1.0, 0).unwrap();
            let long = simulate_srm_layer(&input, bins, &params(2.0, t1 + dt), 1.0, 0).unwrap();
            prop_assert!(long.spike_count() <= short.spike_count());
        }
    }
}
