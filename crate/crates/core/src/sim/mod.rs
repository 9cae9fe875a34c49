//! Contrast-threshold event synthesis.
//!
//! Each pixel tracks a reference log intensity. Between consecutive frames
//! the log intensity is interpolated linearly; every time it moves a full
//! threshold `C` away from the reference an event is emitted at the
//! interpolated crossing time and the reference advances by `C`.

mod dataset;
mod shapes;
mod trajectory;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::geometry::{sample_bilinear, Affine2};
use crate::rng::seeded;

pub use dataset::{
    load_label_map, pack_dataset, DatasetManifest, PackConfig, SampleRecord, SampleSource, Split,
    SIMULATOR_VERSION,
};
pub use shapes::{MovingShapesConfig, Scene, Shape, ShapeKind};
pub use trajectory::{generate_trajectory, CameraTrajectory, MotionPattern};

/// Crossings closer than this (in units of `C`) to a threshold multiple still fire.
const CROSSING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Log-intensity change per event.
    pub contrast_threshold: f64,
    /// Minimum gap between emitted events at one pixel, microseconds.
    pub refractory_us: u64,
    /// Background activity per pixel, Hz.
    pub noise_rate_hz: f64,
    /// Offset inside `ln(I + eps)`.
    pub log_eps: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.2,
            refractory_us: 0,
            noise_rate_hz: 0.0,
            log_eps: 1e-3,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_threshold > 0.0 && self.contrast_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "contrast_threshold must be positive, got {}",
                self.contrast_threshold
            )));
        }
        if !(self.noise_rate_hz >= 0.0 && self.noise_rate_hz.is_finite()) {
            return Err(Error::Config("noise_rate_hz must be non-negative".into()));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::Config("log_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Grayscale intensity raster, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Loads an 8-bit gray or RGB PNG; RGB uses 0.299/0.587/0.114 luma weights.
    pub fn load_png(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img {
            image::DynamicImage::ImageLuma8(g) => {
                g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
            }
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
                })
                .collect(),
        };
        Frame::new(w, h, data)
    }

    /// Resamples so that output pixel `p` shows input at `warp(p)`.
    pub fn warp(&self, warp: &Affine2) -> Frame {
        Frame::from_fn(self.width, self.height, |x, y| {
            let (sx, sy) = warp.apply(x as f64, y as f64);
            sample_bilinear(&self.data, self.width, self.height, sx, sy)
        })
    }
}

/// Converts a frame sequence to events with the contrast-threshold model.
pub fn simulate_from_frames(
    frames: &[Frame],
    timestamps: &[u64],
    config: &SimConfig,
) -> Result<EventStream> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    if timestamps.len() != frames.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("frame timestamps must strictly increase"));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::invalid("frame sizes differ"));
    }
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::invalid("frame too large for 16-bit coordinates"));
    }

    let c = config.contrast_threshold;
    let log_frames: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            f.data
                .iter()
                .map(|&v| (v as f64 + config.log_eps).ln())
                .collect()
        })
        .collect();

    let mut events = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut reference = log_frames[0][p];
            let mut last_emit: Option<u64> = None;
            for k in 0..frames.len() - 1 {
                let (l0, l1) = (log_frames[k][p], log_frames[k + 1][p]);
                let dl = l1 - l0;
                if dl == 0.0 {
                    continue;
                }
                let (t0, dt) = (timestamps[k], timestamps[k + 1] - timestamps[k]);
                let (sign, crossings) = if l1 > reference {
                    (1.0, ((l1 - reference) / c + CROSSING_SLACK).floor())
                } else {
                    (-1.0, ((reference - l1) / c + CROSSING_SLACK).floor())
                };
                let n = crossings.max(0.0) as u64;
                for j in 1..=n {
                    let level = reference + sign * c * j as f64;
                    let frac = ((level - l0) / dl).clamp(0.0, 1.0);
                    let t = t0 + (frac * dt as f64).round() as u64;
                    let blocked = matches!(last_emit, Some(prev) if t - prev < config.refractory_us);
                    if !blocked {
                        let polarity = if sign > 0.0 {
                            Polarity::Positive
                        } else {
                            Polarity::Negative
                        };
                        events.push(Event::new(t, x as u16, y as u16, polarity));
                        last_emit = Some(t);
                    }
                }
                reference += sign * c * n as f64;
            }
        }
    }

    if config.noise_rate_hz > 0.0 {
        let mut rng = seeded(config.seed);
        let t_start = timestamps[0];
        let t_end = *timestamps.last().unwrap();
        let gap = Exp::new(config.noise_rate_hz).map_err(|e| Error::invalid(e.to_string()))?;
        for y in 0..h {
            for x in 0..w {
                let mut t = t_start as f64;
                loop {
                    t += gap.sample(&mut rng) * 1e6;
                    if t > t_end as f64 {
                        break;
                    }
                    let polarity = if rng.random::<bool>() {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    };
                    events.push(Event::new(t as u64, x as u16, y as u16, polarity));
                }
            }
        }
    }

    EventStream::from_unsorted(w as u16, h as u16, events)
}

/// Renders `image` under every pose of `trajectory` and simulates events.
///
/// Poses act about the image centre: frame pixel `p` shows
/// `image(c + pose⁻¹(p - c))`, with zero outside the source.
pub fn warp_and_simulate(
    image: &Frame,
    trajectory: &CameraTrajectory,
    config: &SimConfig,
) -> Result<EventStream> {
    let (cx, cy) = (
        (image.width as f64 - 1.0) / 2.0,
        (image.height as f64 - 1.0) / 2.0,
    );
    let mut frames = Vec::with_capacity(trajectory.poses.len());
    let mut stamps = Vec::with_capacity(trajectory.poses.len());
    for (t, pose) in &trajectory.poses {
        let inv = pose.inverse()?.about(cx, cy);
        frames.push(image.warp(&inv));
        stamps.push(*t);
    }
    simulate_from_frames(&frames, &stamps, config)
}
