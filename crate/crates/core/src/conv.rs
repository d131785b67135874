//! Strided 2-D convolution over spike trains, applied independently at each
//! time bin. Tensors are laid out `(channel, y, x, bin)` with time innermost
//! and weights `(out, in, ky, kx)`.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Shapes and "same" zero padding of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output length and leading padding for "same" padding: `⌈len/stride⌉`
/// outputs, with any odd padding placed at the far end.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_height: usize,
        in_width: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let (out_height, pad_top) = same_padding(in_height, kernel, stride);
        let (out_width, pad_left) = same_padding(in_width, kernel, stride);
        ConvGeometry {
            in_channels,
            in_height,
            in_width,
            out_channels,
            out_height,
            out_width,
            kernel,
            stride,
            pad_top,
            pad_left,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn in_neurons(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn out_neurons(&self) -> usize {
        self.out_channels * self.out_height * self.out_width
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + ky) * self.kernel + kx
    }

    /// Output coordinate fed by input coordinate `i` through kernel tap
    /// `tap`, if any.
    #[inline]
    fn out_coord(&self, i: usize, tap: usize, pad: usize, out_len: usize) -> Option<usize> {
        let shifted = (i + pad).checked_sub(tap)?;
        if shifted % self.stride != 0 {
            return None;
        }
        let o = shifted / self.stride;
        (o < out_len).then_some(o)
    }

    /// Every `(ky, kx, oy, ox)` connecting input pixel `(iy, ix)` to an output.
    pub(crate) fn taps_from_input(&self, iy: usize, ix: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.kernel).flat_map(move |ky| {
            self.out_coord(iy, ky, self.pad_top, self.out_height)
                .into_iter()
                .flat_map(move |oy| {
                    (0..self.kernel).filter_map(move |kx| {
                        self.out_coord(ix, kx, self.pad_left, self.out_width)
                            .map(|ox| (ky, kx, oy, ox))
                    })
                })
        })
    }
}

/// `z += W ⊛ s` for binary input spikes, scattering each spike into the
/// outputs it reaches.
pub fn forward_spikes<T: Scalar>(g: &ConvGeometry, weights: &[T], spikes: &[u8], bins: usize, z: &mut [T]) {
    let out_plane = g.out_height * g.out_width * bins;
    let mut times = Vec::with_capacity(bins);
    for c in 0..g.in_channels {
        for iy in 0..g.in_height {
            for ix in 0..g.in_width {
                let n = (c * g.in_height + iy) * g.in_width + ix;
                times.clear();
                times.extend(
                    spikes[n * bins..(n + 1) * bins]
                        .iter()
                        .enumerate()
                        .filter(|(_, &s)| s != 0)
                        .map(|(k, _)| k),
                );
                if times.is_empty() {
                    continue;
                }
                for (ky, kx, oy, ox) in g.taps_from_input(iy, ix) {
                    let base = (oy * g.out_width + ox) * bins;
                    for o in 0..g.out_channels {
                        let w = weights[g.weight_index(o, c, ky, kx)];
                        let row = &mut z[o * out_plane + base..o * out_plane + base + bins];
                        for &k in &times {
                            row[k] += w;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input gradient `ds += Wᵀ ⊛ dz`. Output rows whose flag in
/// `active` is false are skipped.
pub fn backward_input<T: Scalar>(g: &ConvGeometry, weights: &[T], dz: &[T], active: &[bool], bins: usize, ds: &mut [T]) {
    let out_plane = g.out_height * g.out_width;
    for c in 0..g.in_channels {
        for iy in 0..g.in_height {
            for ix in 0..g.in_width {
                let n = (c * g.in_height + iy) * g.in_width + ix;
                let dst = &mut ds[n * bins..(n + 1) * bins];
                for (ky, kx, oy, ox) in g.taps_from_input(iy, ix) {
                    let p = oy * g.out_width + ox;
                    for o in 0..g.out_channels {
                        let row = o * out_plane + p;
                        if !active[row] {
                            continue;
                        }
                        let w = weights[g.weight_index(o, c, ky, kx)];
                        let src = &dz[row * bins..(row + 1) * bins];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the weight gradient `dW[o,c,ky,kx] += Σ dz[o,·,k]·s[c,·,k]`
/// over the bins where the input spiked.
pub fn weight_grad<T: Scalar>(g: &ConvGeometry, spikes: &[u8], dz: &[T], bins: usize, dw: &mut [T]) {
    let out_plane = g.out_height * g.out_width;
    let mut times = Vec::with_capacity(bins);
    for c in 0..g.in_channels {
        for iy in 0..g.in_height {
            for ix in 0..g.in_width {
                let n = (c * g.in_height + iy) * g.in_width + ix;
                times.clear();
                times.extend(
                    spikes[n * bins..(n + 1) * bins]
                        .iter()
                        .enumerate()
                        .filter(|(_, &s)| s != 0)
                        .map(|(k, _)| k),
                );
                if times.is_empty() {
                    continue;
                }
                for (ky, kx, oy, ox) in g.taps_from_input(iy, ix) {
                    let p = oy * g.out_width + ox;
                    for o in 0..g.out_channels {
                        let row = (o * out_plane + p) * bins;
                        let mut acc = T::zero();
                        for &k in &times {
                            acc += dz[row + k];
                        }
                        dw[g.weight_index(o, c, ky, kx)] += acc;
                    }
                }
            }
        }
    }
}
