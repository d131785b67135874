//! Synthetic event data from a camera rotating inside a panoramic scene.
//!
//! Frames are rendered from an equirectangular panorama through a pinhole
//! camera along a random rotational trajectory. Per pixel, log intensity is
//! interpolated linearly between frames and an event is emitted whenever it
//! moves a contrast threshold `C` away from the pixel's reference level.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, SequenceEntry, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::event::{dt_to_us, AngularVelocitySignal, Event, EventStream, Polarity};
use crate::seed;

/// Offset added before taking the log so black pixels stay finite.
pub const LOG_OFFSET: f64 = 0.01;

pub fn log_intensity(i: f64) -> f64 {
    (i + LOG_OFFSET).ln()
}

/// Equirectangular intensity panorama with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Scene {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width != 2 * height || height == 0 {
            return Err(Error::Shape(format!(
                "equirectangular panorama must be twice as wide as tall, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} panorama", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("panorama intensities must lie in [0, 1]".into()));
        }
        Ok(Scene { width, height, data })
    }

    pub fn uniform(width: usize, value: f32) -> Result<Self> {
        Self::new(width, width / 2, vec![value; width * (width / 2)])
    }

    /// Loads an image file as grayscale intensities.
    pub fn from_image(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
        let luma = img.to_luma32f();
        let (w, h) = luma.dimensions();
        let data = luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(w as usize, h as usize, data).map_err(|e| Error::data(path, e.to_string()))
    }

    /// Band-limited random texture on the sphere: a sum of plane waves in
    /// direction space, pushed through a logistic to give high-contrast
    /// regions with soft edges.
    pub fn procedural(seed: u64, width: usize) -> Result<Self> {
        let height = width / 2;
        let mut rng = seed::rng(seed);
        let waves = 48;
        let mut dirs = Vec::with_capacity(waves);
        for _ in 0..waves {
            let n = random_unit_vector(&mut rng);
            let freq = (0.5f64.ln() + rng.gen::<f64>() * (12.0f64.ln() - 0.5f64.ln())).exp();
            let amp = 1.0 / freq.sqrt();
            let phase = rng.gen::<f64>() * 2.0 * PI;
            dirs.push((n, 2.0 * PI * freq, amp, phase));
        }
        let norm = dirs.iter().map(|d| d.2 * d.2).sum::<f64>().sqrt() / 2f64.sqrt();
        let gain = 4.0;
        let mut data = vec![0f32; width * height];
        data.par_chunks_mut(width).enumerate().for_each(|(v, row)| {
            let lat = PI * (0.5 - (v as f64 + 0.5) / height as f64);
            for (u, px) in row.iter_mut().enumerate() {
                let lon = 2.0 * PI * ((u as f64 + 0.5) / width as f64 - 0.5);
                let d = direction_from_lon_lat(lon, lat);
                let s: f64 = dirs
                    .iter()
                    .map(|(n, w, a, p)| a * (w * n.dot(&d) + p).cos())
                    .sum::<f64>()
                    / norm;
                let i = 1.0 / (1.0 + (-gain * s).exp());
                *px = (0.02 + 0.96 * i) as f32;
            }
        });
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Continuous texel coordinates `(u, v)` of a world direction, with texel
    /// centres at integer coordinates.
    pub fn texel_coords(&self, d: &Vector3<f64>) -> (f64, f64) {
        let (lon, lat) = lon_lat(d);
        let u = (lon / (2.0 * PI) + 0.5) * self.width as f64 - 0.5;
        let v = (0.5 - lat / PI) * self.height as f64 - 0.5;
        (u, v)
    }

    fn texel(&self, u: i64, v: i64) -> f64 {
        let w = self.width as i64;
        let uu = u.rem_euclid(w) as usize;
        let vv = v.clamp(0, self.height as i64 - 1) as usize;
        self.data[vv * self.width + uu] as f64
    }

    /// Bilinear sample at continuous texel coordinates, wrapping in longitude.
    pub fn sample_texel(&self, u: f64, v: f64) -> f64 {
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = u - u0;
        let fv = v - v0;
        let (u0, v0) = (u0 as i64, v0 as i64);
        let a = self.texel(u0, v0) * (1.0 - fu) + self.texel(u0 + 1, v0) * fu;
        let b = self.texel(u0, v0 + 1) * (1.0 - fu) + self.texel(u0 + 1, v0 + 1) * fu;
        a * (1.0 - fv) + b * fv
    }

    pub fn sample(&self, d: &Vector3<f64>) -> f64 {
        let (u, v) = self.texel_coords(d);
        self.sample_texel(u, v)
    }
}

/// World axes follow the camera convention: x right, y down, z forward.
/// Longitude is measured from +z towards +x, latitude towards −y (up).
pub fn lon_lat(d: &Vector3<f64>) -> (f64, f64) {
    let n = d.norm();
    (d.x.atan2(d.z), (-d.y / n).clamp(-1.0, 1.0).asin())
}

pub fn direction_from_lon_lat(lon: f64, lat: f64) -> Vector3<f64> {
    Vector3::new(lat.cos() * lon.sin(), -lat.sin(), lat.cos() * lon.cos())
}

fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn from_hfov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = width as f64 / (2.0 * (hfov_deg.to_radians() / 2.0).tan());
        CameraIntrinsics {
            width,
            height,
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// Camera-frame ray through pixel `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

/// Renders the panorama as seen by a camera with camera-to-world rotation
/// `orientation`. Row-major intensities.
pub fn render_view(scene: &Scene, orientation: &UnitQuaternion<f64>, cam: &CameraIntrinsics) -> Vec<f64> {
    let mut out = vec![0.0; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = orientation * cam.ray(x as f64, y as f64);
            out[y * cam.width + x] = scene.sample(&d);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Initial per-axis speed is uniform in `[−v_max, v_max]`, rad/s.
    pub v_max: f64,
    /// Mean-reversion rate towards the initial velocity, 1/s.
    pub reversion_rate: f64,
    /// Diffusion scale of the velocity perturbation, rad/s/√s.
    pub perturbation: f64,
    pub sample_rate_hz: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            v_max: 4.0,
            reversion_rate: 5.0,
            perturbation: 1.0,
            sample_rate_hz: 1000.0,
        }
    }
}

/// Orientation and body-frame angular velocity sampled uniformly in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub duration_ms: f64,
    pub sample_rate_hz: f64,
    pub orientations: Vec<UnitQuaternion<f64>>,
    pub omega: Vec<[f64; 3]>,
}

impl Trajectory {
    /// Integrates piecewise-constant body rates from `start`.
    pub fn from_rates(start: UnitQuaternion<f64>, omega: Vec<[f64; 3]>, duration_ms: f64, sample_rate_hz: f64) -> Self {
        let h = 1.0 / sample_rate_hz;
        let mut orientations = Vec::with_capacity(omega.len());
        let mut q = start;
        for (i, w) in omega.iter().enumerate() {
            orientations.push(q);
            if i + 1 < omega.len() {
                q *= UnitQuaternion::from_scaled_axis(Vector3::new(w[0], w[1], w[2]) * h);
            }
        }
        Trajectory {
            duration_ms,
            sample_rate_hz,
            orientations,
            omega,
        }
    }

    /// Same start orientation with every rate negated.
    pub fn negated(&self) -> Self {
        Self::from_rates(
            self.orientations[0],
            self.omega.iter().map(|w| w.map(|v| -v)).collect(),
            self.duration_ms,
            self.sample_rate_hz,
        )
    }

    /// Motion played backwards: starts at the final orientation.
    pub fn reversed(&self) -> Self {
        let mut orientations = self.orientations.clone();
        orientations.reverse();
        let mut omega: Vec<[f64; 3]> = self.omega.iter().map(|w| w.map(|v| -v)).collect();
        omega.reverse();
        Trajectory {
            duration_ms: self.duration_ms,
            sample_rate_hz: self.sample_rate_hz,
            orientations,
            omega,
        }
    }

    fn position(&self, t_ms: f64) -> (usize, f64) {
        let s = (t_ms / 1000.0 * self.sample_rate_hz).clamp(0.0, (self.omega.len() - 1) as f64);
        let i = (s.floor() as usize).min(self.omega.len().saturating_sub(2));
        (i, s - i as f64)
    }

    pub fn orientation_at(&self, t_ms: f64) -> UnitQuaternion<f64> {
        if self.orientations.len() == 1 {
            return self.orientations[0];
        }
        let (i, f) = self.position(t_ms);
        if f == 0.0 {
            return self.orientations[i];
        }
        if f == 1.0 {
            return self.orientations[i + 1];
        }
        self.orientations[i].slerp(&self.orientations[i + 1], f)
    }

    pub fn omega_at(&self, t_ms: f64) -> [f64; 3] {
        if self.omega.len() == 1 {
            return self.omega[0];
        }
        let (i, f) = self.position(t_ms);
        std::array::from_fn(|a| self.omega[i][a] * (1.0 - f) + self.omega[i + 1][a] * f)
    }

    /// Angular velocity at the start of each bin of width `dt_ms`.
    pub fn ground_truth(&self, dt_ms: f64) -> Result<AngularVelocitySignal> {
        let dt_us = dt_to_us(dt_ms)?;
        let bins = (self.duration_ms / dt_ms + 1e-9).floor() as usize;
        Ok(AngularVelocitySignal::new(
            dt_us,
            (0..bins).map(|k| self.omega_at(k as f64 * dt_ms)).collect(),
        ))
    }
}

/// Random rotation: per-axis initial rates uniform in `[−v_max, v_max]`,
/// then an Ornstein-Uhlenbeck perturbation reverting to the initial rate.
pub fn sample_trajectory(seed: u64, duration_ms: f64, cfg: &TrajectoryConfig) -> Trajectory {
    let mut rng = seed::rng(seed);
    let start = {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        UnitQuaternion::from_quaternion(q)
    };
    let w0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-cfg.v_max..=cfg.v_max));
    let n = (duration_ms / 1000.0 * cfg.sample_rate_hz).round() as usize + 1;
    let h = 1.0 / cfg.sample_rate_hz;
    let keep = (-cfg.reversion_rate * h).exp();
    let spread = if cfg.reversion_rate > 0.0 {
        cfg.perturbation * ((1.0 - keep * keep) / (2.0 * cfg.reversion_rate)).sqrt()
    } else {
        cfg.perturbation * h.sqrt()
    };
    let mut omega = Vec::with_capacity(n);
    let mut w = w0;
    for _ in 0..n {
        omega.push(w);
        for a in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            w[a] = w0[a] + (w[a] - w0[a]) * keep + spread * z;
        }
    }
    Trajectory::from_rates(start, omega, duration_ms, cfg.sample_rate_hz)
}

/// Distribution of the per-sequence contrast threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastModel {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
}

impl Default for ContrastModel {
    fn default() -> Self {
        ContrastModel {
            mean: 0.45,
            std: 0.05,
            min: 0.01,
        }
    }
}

impl ContrastModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = Normal::new(self.mean, self.std.max(0.0)).expect("finite contrast parameters");
        n.sample(rng).max(self.min)
    }
}

/// A threshold crossing at an exact (unrounded) time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub pixel: usize,
    pub t_us: f64,
    pub polarity: Polarity,
    /// Reference log intensity after the crossing.
    pub level: f64,
}

/// Threshold crossings of per-pixel log intensity interpolated linearly
/// between frames spaced `frame_dt_us` apart. Each pixel's reference starts
/// at its value in the first frame.
pub fn log_crossings(frames: &[Vec<f64>], frame_dt_us: f64, contrast: f64) -> Vec<Crossing> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for p in 0..first.len() {
        let mut reference = first[p];
        for j in 0..frames.len() - 1 {
            let (la, lb) = (frames[j][p], frames[j + 1][p]);
            if lb == la {
                continue;
            }
            let ta = j as f64 * frame_dt_us;
            if lb > la {
                while reference + contrast <= lb {
                    reference += contrast;
                    let f = ((reference - la) / (lb - la)).max(0.0);
                    out.push(Crossing {
                        pixel: p,
                        t_us: ta + f * frame_dt_us,
                        polarity: Polarity::Positive,
                        level: reference,
                    });
                }
            } else {
                while reference - contrast >= lb {
                    reference -= contrast;
                    let f = ((reference - la) / (lb - la)).max(0.0);
                    out.push(Crossing {
                        pixel: p,
                        t_us: ta + f * frame_dt_us,
                        polarity: Polarity::Negative,
                        level: reference,
                    });
                }
            }
        }
    }
    out
}

/// Rounds crossings to whole microseconds and orders them by time.
pub fn crossings_to_stream(crossings: &[Crossing], width: usize, height: usize, duration_us: u32) -> Result<EventStream> {
    let mut events: Vec<Event> = crossings
        .iter()
        .map(|c| {
            let t = (c.t_us.round().max(0.0) as u64).min(duration_us as u64) as u32;
            Event::new((c.pixel % width) as u16, (c.pixel / width) as u16, t, c.polarity)
        })
        .collect();
    events.sort_by_key(|e| (e.t_us, e.y, e.x));
    EventStream::new(width as u16, height as u16, duration_us, events)
}

/// Log-intensity frames rendered along the trajectory at `render_rate_hz`.
pub fn render_log_frames(scene: &Scene, trajectory: &Trajectory, cam: &CameraIntrinsics, render_rate_hz: f64) -> Vec<Vec<f64>> {
    let frames = (trajectory.duration_ms / 1000.0 * render_rate_hz).round() as usize + 1;
    (0..frames)
        .map(|j| {
            let t_ms = j as f64 * 1000.0 / render_rate_hz;
            render_view(scene, &trajectory.orientation_at(t_ms), cam)
                .into_iter()
                .map(log_intensity)
                .collect()
        })
        .collect()
}

/// Events and binned ground truth for one sequence.
pub fn generate_events(
    scene: &Scene,
    trajectory: &Trajectory,
    contrast: f64,
    cam: &CameraIntrinsics,
    render_rate_hz: f64,
    dt_ms: f64,
) -> Result<(EventStream, AngularVelocitySignal)> {
    let frames = render_log_frames(scene, trajectory, cam, render_rate_hz);
    let crossings = log_crossings(&frames, 1e6 / render_rate_hz, contrast);
    let duration_us = (trajectory.duration_ms * 1000.0).round() as u32;
    let stream = crossings_to_stream(&crossings, cam.width, cam.height, duration_us)?;
    Ok((stream, trajectory.ground_truth(dt_ms)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub sequences: usize,
    /// Relative sizes of the train, validation and test splits.
    pub split: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub duration_ms: f64,
    pub dt_ms: f64,
    pub render_rate_hz: f64,
    pub trajectory: TrajectoryConfig,
    pub contrast: ContrastModel,
    /// Width of procedural panoramas (height is half).
    pub panorama_width: usize,
    /// Directory of equirectangular images; procedural scenes when unset.
    pub scene_dir: Option<PathBuf>,
    /// Pair sequences 2j and 2j+1 with opposite angular velocities.
    pub antithetic: bool,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            sequences: 10_000,
            split: [18.0, 1.0, 1.0],
            width: 240,
            height: 180,
            hfov_deg: 75.0,
            duration_ms: 500.0,
            dt_ms: 1.0,
            render_rate_hz: 1000.0,
            trajectory: TrajectoryConfig::default(),
            contrast: ContrastModel::default(),
            panorama_width: 2048,
            scene_dir: None,
            antithetic: true,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::config("data.sequences", "must be positive"));
        }
        if self.split.iter().any(|r| !(*r >= 0.0)) || self.split.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("data.split", "ratios must be non-negative with a positive sum"));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::config("data.width", "sensor size must be in 1..=65535"));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::config("data.hfov_deg", "must lie in (0, 180)"));
        }
        if !(self.duration_ms > 0.0) || self.duration_ms * 1000.0 > u32::MAX as f64 {
            return Err(Error::config("data.duration_ms", "must be positive and fit in 32-bit microseconds"));
        }
        dt_to_us(self.dt_ms)?;
        if !(self.render_rate_hz > 0.0) || !(self.trajectory.sample_rate_hz > 0.0) {
            return Err(Error::config("data.render_rate_hz", "rates must be positive"));
        }
        if !(self.trajectory.v_max >= 0.0) || !(self.trajectory.perturbation >= 0.0) || !(self.trajectory.reversion_rate >= 0.0) {
            return Err(Error::config("data.trajectory", "parameters must be non-negative"));
        }
        if !(self.contrast.min > 0.0) {
            return Err(Error::config("data.contrast.min", "must be positive"));
        }
        if self.panorama_width < 4 || self.panorama_width % 2 != 0 {
            return Err(Error::config("data.panorama_width", "must be an even number ≥ 4"));
        }
        Ok(())
    }

    /// Number of sequences in each split; rounding remainder goes to test.
    pub fn split_counts(&self) -> [usize; 3] {
        let total: f64 = self.split.iter().sum();
        let n = self.sequences as f64;
        let train = ((self.split[0] / total) * n).round() as usize;
        let val = (((self.split[1] / total) * n).round() as usize).min(self.sequences - train.min(self.sequences));
        let train = train.min(self.sequences);
        [train, val, self.sequences - train - val]
    }

    pub fn total_hours(&self) -> f64 {
        self.sequences as f64 * self.duration_ms / 3.6e6
    }
}

enum SceneSource {
    Procedural(usize),
    Images(Vec<(Split, Vec<(String, PathBuf)>)>),
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::data(dir, "no .png/.jpg scenes found"));
    }
    Ok(files)
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

/// Assigns scene images to splits in proportion to the split sizes and
/// rejects byte-identical images that would land in two splits.
fn partition_images(files: Vec<PathBuf>, counts: [usize; 3]) -> Result<Vec<(Split, Vec<(String, PathBuf)>)>> {
    let mut content_owner: HashMap<u64, (Split, PathBuf)> = HashMap::new();
    let total: usize = counts.iter().sum();
    let n = files.len();
    let mut out = Vec::new();
    let mut start = 0usize;
    for (s, split) in Split::ALL.iter().enumerate() {
        let end = if s == 2 {
            n
        } else {
            start + ((counts[s] as f64 / total as f64) * n as f64).round() as usize
        }
        .min(n);
        let mut chosen = Vec::new();
        for path in &files[start..end] {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let h = fnv(&bytes);
            if let Some((other, other_path)) = content_owner.get(&h) {
                if other != split {
                    return Err(Error::Dataset(format!(
                        "scene {} duplicates {} across {other} and {split} splits",
                        path.display(),
                        other_path.display()
                    )));
                }
            }
            content_owner.insert(h, (*split, path.clone()));
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
            chosen.push((id, path.clone()));
        }
        if counts[s] > 0 && chosen.is_empty() {
            return Err(Error::Dataset(format!("no scene images left for the {split} split")));
        }
        out.push((*split, chosen));
        start = end;
    }
    Ok(out)
}

/// Generates a full dataset under `root`. Sequence `i` draws all of its
/// randomness from seeds derived from `(seed, i)`, so output does not
/// depend on the thread schedule.
pub fn build_dataset(cfg: &DatagenConfig, seed: u64, root: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let root = root.as_ref();
    let counts = cfg.split_counts();
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let source = match &cfg.scene_dir {
        Some(dir) => SceneSource::Images(partition_images(list_images(dir)?, counts)?),
        None => SceneSource::Procedural(cfg.panorama_width),
    };
    let cam = CameraIntrinsics::from_hfov(cfg.width, cfg.height, cfg.hfov_deg);
    let duration_us = (cfg.duration_ms * 1000.0).round() as u32;

    let plan: Vec<(usize, Split, usize)> = (0..cfg.sequences)
        .map(|i| {
            let (split, offset) = if i < counts[0] {
                (Split::Train, i)
            } else if i < counts[0] + counts[1] {
                (Split::Val, i - counts[0])
            } else {
                (Split::Test, i - counts[0] - counts[1])
            };
            (i, split, offset)
        })
        .collect();

    let entries: Vec<Result<SequenceEntry>> = plan
        .par_iter()
        .map(|&(i, split, offset)| {
            let id = format!("seq_{i:05}");
            let seq_seed = seed::derive(seed, i as u64);
            let (scene, scene_id) = match &source {
                SceneSource::Procedural(w) => {
                    let s = seed::derive_tagged(seed, i as u64, "scene");
                    (Scene::procedural(s, *w)?, format!("procedural-{s:016x}"))
                }
                SceneSource::Images(parts) => {
                    let images = &parts.iter().find(|(s, _)| *s == split).expect("all splits").1;
                    let (name, path) = &images[offset % images.len()];
                    (Scene::from_image(path)?, name.clone())
                }
            };
            let pair = if cfg.antithetic { i / 2 } else { i };
            let mut trajectory = sample_trajectory(
                seed::derive_tagged(seed, pair as u64, "trajectory"),
                cfg.duration_ms,
                &cfg.trajectory,
            );
            if cfg.antithetic && i % 2 == 1 {
                trajectory = trajectory.negated();
            }
            let contrast = cfg
                .contrast
                .sample(&mut seed::rng(seed::derive_tagged(seed, i as u64, "contrast")));
            let (stream, gt) = generate_events(&scene, &trajectory, contrast, &cam, cfg.render_rate_hz, cfg.dt_ms)?;
            let dir = root.join(split.name());
            stream.write(dir.join(format!("{id}.evs")))?;
            gt.write_csv(dir.join(format!("{id}.gt.csv")))?;
            Ok(SequenceEntry {
                id,
                split,
                scene_id,
                contrast_threshold: contrast,
                seed: seq_seed,
                duration_us,
                events: stream.len(),
            })
        })
        .collect();

    let manifest = Manifest {
        format_version: 1,
        width: cfg.width as u16,
        height: cfg.height as u16,
        duration_us,
        gt_dt_us: dt_to_us(cfg.dt_ms)?,
        seed,
        sequences: entries.into_iter().collect::<Result<_>>()?,
    };
    manifest.audit_scene_disjointness()?;
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
