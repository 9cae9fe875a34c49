//! Procedural "moving shapes" scenes with analytic foreground masks.
//!
//! A smooth textured background drifts slowly while a few rigid, striped
//! shapes translate across it. Foreground membership at any time is a closed
//! form test on the shape parameters, which gives exact segmentation labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{simulate_from_frames, Frame, SimConfig};
use crate::error::{Error, Result};
use crate::event::EventStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MovingShapesConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub duration_us: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Largest shape displacement over the whole interval, pixels.
    pub max_shape_travel: f64,
    /// Largest background displacement over the whole interval, pixels.
    pub max_background_travel: f64,
}

impl Default for MovingShapesConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_frames: 8,
            duration_us: 40_000,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 7.0,
            max_radius: 14.0,
            max_shape_travel: 10.0,
            max_background_travel: 3.0,
        }
    }
}

/// Stripe amplitude relative to a shape's mean intensity.
const STRIPE_CONTRAST: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
}

impl Wave {
    fn random(rng: &mut impl Rng, freq: (f64, f64), amplitude: f64) -> Self {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let k = rng.random_range(freq.0..freq.1);
        Self {
            kx: k * angle.cos(),
            ky: k * angle.sin(),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amplitude,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amplitude * (self.kx * x + self.ky * y + self.phase).sin()
    }
}

/// A rigid shape; `center` is its position at the start of the interval and
/// `velocity` its displacement over the whole interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub radius: f64,
    pub angle: f64,
    pub intensity: f64,
    stripes: Wave,
}

impl Shape {
    fn local(&self, x: f64, y: f64, s: f64) -> (f64, f64) {
        let dx = x - (self.center.0 + self.velocity.0 * s);
        let dy = y - (self.center.1 + self.velocity.1 * s);
        let (sn, cs) = self.angle.sin_cos();
        (cs * dx + sn * dy, -sn * dx + cs * dy)
    }

    /// Whether `(x, y)` is inside the footprint at interval fraction `s`.
    pub fn contains(&self, x: f64, y: f64, s: f64) -> bool {
        let (lx, ly) = self.local(x, y, s);
        match self.kind {
            ShapeKind::Circle => lx * lx + ly * ly <= self.radius * self.radius,
            ShapeKind::Square => lx.abs().max(ly.abs()) <= self.radius,
            ShapeKind::Diamond => lx.abs() + ly.abs() <= self.radius * 1.3,
        }
    }

    fn shade(&self, x: f64, y: f64, s: f64) -> f64 {
        let (lx, ly) = self.local(x, y, s);
        self.intensity + self.stripes.at(lx, ly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub background_velocity: (f64, f64),
    pub shapes: Vec<Shape>,
    background: Vec<Wave>,
}

impl Scene {
    pub fn random(config: &MovingShapesConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.min_shapes == 0 || config.max_shapes < config.min_shapes {
            return Err(Error::Config("shape count range is empty".into()));
        }
        if !(config.min_radius > 0.0 && config.max_radius >= config.min_radius) {
            return Err(Error::Config("shape radius range is invalid".into()));
        }
        let (w, h) = (config.width as f64, config.height as f64);
        let background = (0..3)
            .map(|_| Wave::random(rng, (0.05, 0.25), 0.08))
            .collect();
        let bg_dir = rng.random_range(0.0..std::f64::consts::TAU);
        let bg_travel = rng.random_range(0.0..=config.max_background_travel);
        let count = rng.random_range(config.min_shapes..=config.max_shapes);
        let kinds = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Diamond];
        let shapes = (0..count)
            .map(|_| {
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let travel = rng.random_range(0.4 * config.max_shape_travel..=config.max_shape_travel);
                let dark = rng.random::<bool>();
                let kind = kinds[rng.random_range(0..kinds.len())];
                let center = (rng.random_range(0.15 * w..0.85 * w), rng.random_range(0.15 * h..0.85 * h));
                let radius = rng.random_range(config.min_radius..=config.max_radius);
                let angle = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
                let intensity = if dark {
                    rng.random_range(0.1..0.25)
                } else {
                    rng.random_range(0.75..0.9)
                };
                // Reflectance-like texture: the same log contrast on dark and bright shapes.
                let stripes = Wave::random(rng, (0.8, 1.6), STRIPE_CONTRAST * intensity);
                Shape {
                    kind,
                    center,
                    velocity: (travel * dir.cos(), travel * dir.sin()),
                    radius,
                    angle,
                    intensity,
                    stripes,
                }
            })
            .collect();
        Ok(Self {
            width: config.width,
            height: config.height,
            background_velocity: (bg_travel * bg_dir.cos(), bg_travel * bg_dir.sin()),
            shapes,
            background,
        })
    }

    /// Topmost shape covering `(x, y)` at fraction `s`; later shapes are on top.
    fn cover(&self, x: f64, y: f64, s: f64) -> Option<&Shape> {
        self.shapes.iter().rev().find(|sh| sh.contains(x, y, s))
    }

    pub fn render(&self, s: f64) -> Frame {
        Frame::from_fn(self.width, self.height, |xi, yi| {
            let (x, y) = (xi as f64, yi as f64);
            let v = match self.cover(x, y, s) {
                Some(shape) => shape.shade(x, y, s),
                None => {
                    let bx = x - self.background_velocity.0 * s;
                    let by = y - self.background_velocity.1 * s;
                    0.5 + self.background.iter().map(|w| w.at(bx, by)).sum::<f64>()
                }
            };
            v.clamp(0.02, 0.98) as f32
        })
    }

    /// Per-pixel labels at fraction `s`: 1 inside any shape, 0 elsewhere.
    pub fn label_map(&self, s: f64) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.cover(x as f64, y as f64, s).is_some() as u8);
            }
        }
        out
    }

    /// Events over the interval plus mid-interval labels.
    pub fn simulate(
        &self,
        config: &MovingShapesConfig,
        sim: &SimConfig,
    ) -> Result<(EventStream, Vec<u8>)> {
        if config.num_frames < 2 {
            return Err(Error::Config("moving shapes need at least two frames".into()));
        }
        let last = (config.num_frames - 1) as f64;
        let mut frames = Vec::with_capacity(config.num_frames);
        let mut stamps = Vec::with_capacity(config.num_frames);
        for i in 0..config.num_frames {
            let s = i as f64 / last;
            frames.push(self.render(s));
            stamps.push((config.duration_us as f64 * s).round() as u64);
        }
        let stream = simulate_from_frames(&frames, &stamps, sim)?;
        Ok((stream, self.label_map(0.5)))
    }
}
