use super::EventStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 5;

/// Signed event accumulation over `bins × height × width` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self {
            bins,
            height,
            width,
            values: vec![0.0; bins * height * width],
        }
    }

    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.height + y) * self.width + x
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(b, y, x)]
    }

    pub fn signed_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum over bins, row-major `height × width`.
    pub fn collapse(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane];
        for b in 0..self.bins {
            for (o, v) in out.iter_mut().zip(&self.values[b * plane..(b + 1) * plane]) {
                *o += v;
            }
        }
        out
    }
}

/// Temporal interpolation weights for normalized time `t_norm ∈ [0, bins - 1]`.
///
/// Returns up to two `(bin, weight)` pairs; weights are non-negative and sum to 1.
#[inline]
pub fn bin_weights(t_norm: f64, bins: usize) -> [(usize, f64); 2] {
    let t = t_norm.clamp(0.0, (bins - 1) as f64);
    let lo = t.floor();
    let frac = t - lo;
    let lo = lo as usize;
    if lo + 1 >= bins {
        [(lo, 1.0), (lo, 0.0)]
    } else {
        [(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

/// Bilinear-in-time voxel grid of a non-empty stream.
pub fn voxelize(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if stream.is_empty() {
        return Err(Error::invalid("cannot voxelize an empty event stream"));
    }
    if bins == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut grid = VoxelGrid::zeros(bins, h, w);
    let events = stream.events();
    let t0 = events[0].t;
    let span = events[events.len() - 1].t - t0;
    let scale = if span == 0 {
        0.0
    } else {
        (bins - 1) as f64 / span as f64
    };
    for e in events {
        let t_norm = (e.t - t0) as f64 * scale;
        let p = e.polarity.sign() as f64;
        for (b, wgt) in bin_weights(t_norm, bins) {
            if wgt != 0.0 {
                let idx = grid.index(b, e.y as usize, e.x as usize);
                grid.values[idx] += p * wgt;
            }
        }
    }
    Ok(grid)
}

/// Normalized network input: `channels × height × width`, single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EventImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EventImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent dimensions")
    }
}

/// Standardizes the nonzero cells of `grid` to zero mean and unit variance.
///
/// Zero cells stay zero. A grid whose nonzero cells all share one value maps
/// those cells to their sign.
pub fn to_event_image(grid: &VoxelGrid) -> EventImage {
    let nonzero: Vec<f64> = grid.values.iter().copied().filter(|v| *v != 0.0).collect();
    let mut img = EventImage::zeros(grid.bins, grid.height, grid.width);
    if nonzero.is_empty() {
        return img;
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for (o, &v) in img.data.iter_mut().zip(&grid.values) {
        if v != 0.0 {
            *o = if std > 1e-12 {
                ((v - mean) / std) as f32
            } else {
                v.signum() as f32
            };
        }
    }
    img
}
