//! Events, event streams, binned spike tensors and their file formats.
//!
//! Event files (`.evs`) are little-endian: the magic `EVS1`, `u16` width,
//! `u16` height, `u32` duration in µs, `u32` event count, then one 9-byte
//! record `{u32 t_us, u16 x, u16 y, u8 polarity}` per event (polarity 1 is
//! positive, 0 negative).
//!
//! Ground-truth files are CSV with header `t_us,wx,wy,wz` (rad/s).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVS_MAGIC: &[u8; 4] = b"EVS1";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Input channel of this polarity in a two-channel spike tensor.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

/// A single brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t_us: u32, polarity: Polarity) -> Self {
        Event { t_us, x, y, polarity }
    }
}

/// Time-ordered events from one sensor over a fixed duration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    duration_us: u32,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates geometry bounds, timestamp order and the duration bound.
    pub fn new(width: u16, height: u16, duration_us: u32, events: Vec<Event>) -> Result<Self> {
        let mut prev = 0u32;
        for (index, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::OutOfBounds {
                    index,
                    x: e.x as u32,
                    y: e.y as u32,
                    width: width as u32,
                    height: height as u32,
                });
            }
            if e.t_us < prev {
                return Err(Error::NonMonotone {
                    index,
                    t_us: e.t_us,
                    prev_us: prev,
                });
            }
            prev = e.t_us;
        }
        if prev > duration_us {
            return Err(Error::Shape(format!(
                "last timestamp {prev} µs exceeds stream duration {duration_us} µs"
            )));
        }
        Ok(EventStream {
            width,
            height,
            duration_us,
            events,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn duration_us(&self) -> u32 {
        self.duration_us
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.events.len());
        out.extend_from_slice(EVS_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.duration_us.to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t_us.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(match e.polarity {
                Polarity::Positive => 1,
                Polarity::Negative => 0,
            });
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse {
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(parse(
                bytes.len(),
                format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        if &bytes[0..4] != EVS_MAGIC {
            return Err(parse(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let width = u16_at(4);
        let height = u16_at(6);
        let duration_us = u32_at(8);
        let count = u32_at(12) as usize;
        let expected = HEADER_LEN + count * RECORD_LEN;
        if bytes.len() != expected {
            return Err(parse(
                bytes.len().min(expected),
                format!("expected {expected} bytes for {count} events, found {}", bytes.len()),
            ));
        }
        let mut events = Vec::with_capacity(count);
        let mut prev = 0u32;
        for i in 0..count {
            let o = HEADER_LEN + i * RECORD_LEN;
            let t_us = u32_at(o);
            let x = u16_at(o + 4);
            let y = u16_at(o + 6);
            let polarity = match bytes[o + 8] {
                1 => Polarity::Positive,
                0 => Polarity::Negative,
                p => return Err(parse(o + 8, format!("invalid polarity byte {p}"))),
            };
            if x >= width || y >= height {
                return Err(parse(
                    o + 4,
                    format!("event {i} at ({x}, {y}) outside {width}x{height} sensor"),
                ));
            }
            if t_us < prev {
                return Err(parse(o, format!("event {i} timestamp {t_us} precedes {prev}")));
            }
            if t_us > duration_us {
                return Err(parse(o, format!("event {i} timestamp {t_us} beyond duration {duration_us}")));
            }
            prev = t_us;
            events.push(Event { t_us, x, y, polarity });
        }
        Ok(EventStream {
            width,
            height,
            duration_us,
            events,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Bins the stream into a two-channel binary spike tensor.
    ///
    /// Cell `(c, y, x, k)` is 1 iff at least one event of polarity `c` at
    /// `(x, y)` has `t` in `[kΔt, (k+1)Δt)`. A trailing partial bin is
    /// dropped.
    pub fn rasterize(&self, dt_ms: f64) -> Result<SpikeTensor> {
        let dt_us = dt_to_us(dt_ms)?;
        let bins = (self.duration_us / dt_us) as usize;
        let mut tensor = SpikeTensor::zeros(2, self.height as usize, self.width as usize, bins, dt_ms);
        for e in &self.events {
            let k = (e.t_us / dt_us) as usize;
            if k < bins {
                tensor.set(e.polarity.channel(), e.y as usize, e.x as usize, k, true);
            }
        }
        Ok(tensor)
    }
}

pub(crate) fn dt_to_us(dt_ms: f64) -> Result<u32> {
    let dt_us = (dt_ms * 1000.0).round();
    if !(dt_ms > 0.0) || dt_us < 1.0 || ((dt_ms * 1000.0) - dt_us).abs() > 1e-9 {
        return Err(Error::config(
            "dt_ms",
            format!("bin width {dt_ms} ms must be a positive whole number of microseconds"),
        ));
    }
    Ok(dt_us as u32)
}

/// Binary spike occupancy over `(channel, y, x, time bin)`, time innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTensor {
    channels: usize,
    height: usize,
    width: usize,
    bins: usize,
    dt_ms: f64,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(channels: usize, height: usize, width: usize, bins: usize, dt_ms: f64) -> Self {
        SpikeTensor {
            channels,
            height,
            width,
            bins,
            dt_ms,
            data: vec![0; channels * height * width * bins],
        }
    }

    /// Wraps raw 0/1 data laid out as `(channel, y, x, bin)`.
    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        bins: usize,
        dt_ms: f64,
        data: Vec<u8>,
    ) -> Result<Self> {
        if data.len() != channels * height * width * bins {
            return Err(Error::Shape(format!(
                "spike data length {} does not match shape {channels}x{height}x{width}x{bins}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("spike tensor values must be 0 or 1".into()));
        }
        Ok(SpikeTensor {
            channels,
            height,
            width,
            bins,
            dt_ms,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.height, self.width, self.bins)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt_ms
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize, k: usize) -> usize {
        ((c * self.height + y) * self.width + x) * self.bins + k
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize, k: usize) -> bool {
        self.data[self.index(c, y, x, k)] != 0
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, k: usize, value: bool) {
        let i = self.index(c, y, x, k);
        self.data[i] = value as u8;
    }

    /// Spike train of one neuron over all bins.
    pub fn train(&self, c: usize, y: usize, x: usize) -> &[u8] {
        let start = self.index(c, y, x, 0);
        &self.data[start..start + self.bins]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Mean spikes per neuron per bin.
    pub fn rate(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    /// Keeps only the first `bins` time bins.
    pub fn truncated(&self, bins: usize) -> SpikeTensor {
        let bins = bins.min(self.bins);
        let mut out = SpikeTensor::zeros(self.channels, self.height, self.width, bins, self.dt_ms);
        for n in 0..self.channels * self.height * self.width {
            out.data[n * bins..(n + 1) * bins]
                .copy_from_slice(&self.data[n * self.bins..n * self.bins + bins]);
        }
        out
    }
}

/// Angular velocity sampled on a uniform time grid, rad/s, components
/// (tilt, pan, roll) about the camera x, y, z axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularVelocitySignal {
    pub dt_us: u32,
    pub values: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRow {
    t_us: u64,
    wx: f64,
    wy: f64,
    wz: f64,
}

impl AngularVelocitySignal {
    pub fn new(dt_us: u32, values: Vec<[f64; 3]>) -> Self {
        AngularVelocitySignal { dt_us, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt_us as f64 / 1000.0
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        for (k, v) in self.values.iter().enumerate() {
            w.serialize(GroundTruthRow {
                t_us: k as u64 * self.dt_us as u64,
                wx: v[0],
                wy: v[1],
                wz: v[2],
            })
            .map_err(|e| Error::data(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a ground-truth CSV; rows must be on a uniform grid starting at 0.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        let headers = r.headers().map_err(|e| Error::data(path, e.to_string()))?;
        if headers != vec!["t_us", "wx", "wy", "wz"] {
            return Err(Error::data(path, format!("unexpected header {headers:?}")));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for row in r.deserialize::<GroundTruthRow>() {
            let row = row.map_err(|e| Error::data(path, e.to_string()))?;
            times.push(row.t_us);
            values.push([row.wx, row.wy, row.wz]);
        }
        let dt_us = if times.len() > 1 { times[1] - times[0] } else { 1000 };
        for (k, &t) in times.iter().enumerate() {
            if t != k as u64 * dt_us {
                return Err(Error::data(path, format!("row {k}: t_us {t} is off the {dt_us} µs grid")));
            }
        }
        if dt_us == 0 || dt_us > u32::MAX as u64 {
            return Err(Error::data(path, format!("invalid sample spacing {dt_us} µs")));
        }
        Ok(AngularVelocitySignal {
            dt_us: dt_us as u32,
            values,
        })
    }

    pub fn truncated(&self, len: usize) -> Self {
        AngularVelocitySignal {
            dt_us: self.dt_us,
            values: self.values[..len.min(self.values.len())].to_vec(),
        }
    }
}

/// Training-time augmentation flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub time_invert: bool,
}

impl Augmentation {
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation {
            hflip: rng.gen(),
            vflip: rng.gen(),
            time_invert: rng.gen(),
        }
    }
}

/// Applies flips and time inversion to an input tensor and its target.
///
/// With camera axes x right, y down, z forward: a horizontal mirror negates
/// pan and roll, a vertical mirror negates tilt and roll, and time inversion
/// reverses both signals, swaps the polarity channels and negates every
/// component.
pub fn augment(
    input: &SpikeTensor,
    target: &AngularVelocitySignal,
    flags: Augmentation,
) -> (SpikeTensor, AngularVelocitySignal) {
    let (channels, height, width, bins) = input.shape();
    let mut out = SpikeTensor::zeros(channels, height, width, bins, input.dt_ms);
    for c in 0..channels {
        let src_c = if flags.time_invert && channels == 2 { 1 - c } else { c };
        for y in 0..height {
            let src_y = if flags.vflip { height - 1 - y } else { y };
            for x in 0..width {
                let src_x = if flags.hflip { width - 1 - x } else { x };
                let src = input.train(src_c, src_y, src_x);
                let start = out.index(c, y, x, 0);
                let dst = &mut out.data[start..start + bins];
                if flags.time_invert {
                    for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                        *d = *s;
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    }

    let mut sign = [1.0f64; 3];
    if flags.hflip {
        sign[1] = -sign[1];
        sign[2] = -sign[2];
    }
    if flags.vflip {
        sign[0] = -sign[0];
        sign[2] = -sign[2];
    }
    if flags.time_invert {
        sign = sign.map(|s| -s);
    }
    let mut values: Vec<[f64; 3]> = target
        .values
        .iter()
        .map(|v| [v[0] * sign[0], v[1] * sign[1], v[2] * sign[2]])
        .collect();
    if flags.time_invert {
        values.reverse();
    }
    (
        out,
        AngularVelocitySignal {
            dt_us: target.dt_us,
            values,
        },
    )
}
