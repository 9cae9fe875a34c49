//! Augmented pairs, patch tiling, affine patch correspondence and masking.
//!
//! `x★` is produced from `x⁺` by resampling through an affine map `T` that
//! sends `x★` pixel coordinates to `x⁺` pixel coordinates, followed by blur
//! and a per-channel intensity jitter. Because `T` is known, every `x★`
//! patch can be matched to the `x⁺` patch containing its mapped centre.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::EventImage;
use crate::geometry::{sample_bilinear, Affine2};
use crate::tensor::{Scalar, Tensor};

pub type AffineTransform2D = Affine2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Translation bound as a fraction of image size.
    pub translate_frac: f64,
    pub shear_deg: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub jitter_prob: f64,
    pub jitter_scale_min: f64,
    pub jitter_scale_max: f64,
    pub jitter_offset: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            scale_min: 0.8,
            scale_max: 1.2,
            translate_frac: 0.1,
            shear_deg: 5.0,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            jitter_prob: 0.8,
            jitter_scale_min: 0.6,
            jitter_scale_max: 1.4,
            jitter_offset: 0.2,
            mask_ratio_min: 0.1,
            mask_ratio_max: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No geometric or photometric change.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translate_frac: 0.0,
            shear_deg: 0.0,
            blur_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn between(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random rotation, per-axis scale, shear and translation about the image centre.
pub fn sample_affine(rng: &mut impl Rng, ranges: &AugmentConfig, width: usize, height: usize) -> Affine2 {
    let rot = ranges.rotation_deg.abs().min(180.0);
    let shear = ranges.shear_deg.abs().min(45.0);
    let s_lo = ranges.scale_min.max(1e-3);
    let s_hi = ranges.scale_max.max(s_lo);
    let tr = ranges.translate_frac.abs().min(1.0);

    let theta = symmetric(rng, rot).to_radians();
    let sx = between(rng, s_lo, s_hi);
    let sy = between(rng, s_lo, s_hi);
    let phi = symmetric(rng, shear).to_radians();
    let tx = symmetric(rng, tr) * width as f64;
    let ty = symmetric(rng, tr) * height as f64;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    Affine2::translation(tx, ty).compose(&Affine2::from_params(theta, sx, sy, phi, 0.0, 0.0).about(cx, cy))
}

/// `out(p) = img(T p)` per channel with bilinear interpolation and zero padding.
pub fn apply_affine(img: &EventImage, transform: &Affine2) -> EventImage {
    let (w, h) = (img.width, img.height);
    let mut out = EventImage::zeros(img.channels, h, w);
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| transform.apply(x as f64, y as f64))
        .collect();
    for c in 0..img.channels {
        let src = img.plane(c);
        for (o, &(sx, sy)) in out.plane_mut(c).iter_mut().zip(&coords) {
            *o = sample_bilinear(src, w, h, sx, sy);
        }
    }
    out
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of every channel, zero outside the image.
pub fn gaussian_blur(img: &EventImage, sigma: f64) -> EventImage {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = EventImage::zeros(img.channels, img.height, img.width);
    let mut tmp = vec![0.0f64; (w * h) as usize];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let xx = x + k as i64 - r;
                    if (0..w).contains(&xx) {
                        acc += wt * src[(y * w + xx) as usize] as f64;
                    }
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let yy = y + k as i64 - r;
                    if (0..h).contains(&yy) {
                        acc += wt * tmp[(yy * w + x) as usize];
                    }
                }
                dst[(y * w + x) as usize] = acc as f32;
            }
        }
    }
    out
}

/// Photometric parameters actually applied to one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Photometric {
    pub blur_sigma: Option<f64>,
    /// Per-channel `(scale, offset)`.
    pub jitter: Option<Vec<(f64, f64)>>,
}

/// Gaussian blur then per-channel affine intensity jitter of nonzero cells.
pub fn blur_and_jitter(img: &EventImage, rng: &mut impl Rng, params: &AugmentConfig) -> (EventImage, Photometric) {
    let mut applied = Photometric::default();
    let mut out = img.clone();
    if params.blur_prob > 0.0 && rng.random::<f64>() < params.blur_prob {
        let sigma = between(rng, params.blur_sigma_min.max(1e-3), params.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
        applied.blur_sigma = Some(sigma);
    }
    if params.jitter_prob > 0.0 && rng.random::<f64>() < params.jitter_prob {
        let mut per_channel = Vec::with_capacity(out.channels);
        for c in 0..out.channels {
            let scale = between(rng, params.jitter_scale_min, params.jitter_scale_max);
            let offset = symmetric(rng, params.jitter_offset);
            for v in out.plane_mut(c).iter_mut().filter(|v| **v != 0.0) {
                *v = (*v as f64 * scale + offset) as f32;
            }
            per_channel.push((scale, offset));
        }
        applied.jitter = Some(per_channel);
    }
    (out, applied)
}

/// Square patch tiling in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "patch size {patch} must divide image {height}x{width}"
            )));
        }
        Ok(Self {
            patch,
            rows: height / patch,
            cols: width / patch,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    /// Centre of patch `i` in pixel coordinates.
    pub fn center(&self, i: usize) -> (f64, f64) {
        let (r, c) = (i / self.cols, i % self.cols);
        let p = self.patch as f64;
        ((c as f64 + 0.5) * p - 0.5, (r as f64 + 0.5) * p - 0.5)
    }

    /// Patch index containing continuous pixel coordinate `(x, y)`, if any.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if !(x >= -0.5 && y >= -0.5 && x < w - 0.5 && y < h - 0.5) {
            return None;
        }
        let c = (((x + 0.5) / self.patch as f64).floor() as usize).min(self.cols - 1);
        let r = (((y + 0.5) / self.patch as f64).floor() as usize).min(self.rows - 1);
        Some(r * self.cols + c)
    }

    /// `[N, C·P·P]` patch vectors, channel-major within each patch.
    pub fn extract<T: Scalar>(&self, img: &EventImage) -> Result<Tensor<T>> {
        if img.height != self.height() || img.width != self.width() {
            return Err(Error::shape(
                "patch_extract",
                format!(
                    "image {}x{} vs grid {}x{}",
                    img.height,
                    img.width,
                    self.height(),
                    self.width()
                ),
            ));
        }
        let p = self.patch;
        let dim = img.channels * p * p;
        let mut data = Vec::with_capacity(self.len() * dim);
        for i in 0..self.len() {
            let (r, c) = (i / self.cols, i % self.cols);
            for ch in 0..img.channels {
                for py in 0..p {
                    for px in 0..p {
                        data.push(T::lit(img.get(ch, r * p + py, c * p + px) as f64));
                    }
                }
            }
        }
        Tensor::new(vec![self.len(), dim], data)
    }
}

/// For each `x★` patch, the `x⁺` patch holding its mapped centre.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub map: Vec<Option<usize>>,
}

impl CorrespondenceMap {
    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.map.iter().filter(|m| m.is_some()).count()
    }
}

pub fn build_correspondence(
    transform: &Affine2,
    grid: &PatchGrid,
    height: usize,
    width: usize,
) -> Result<CorrespondenceMap> {
    if transform.det().abs() <= 1e-6 || !transform.det().is_finite() {
        return Err(Error::invalid("correspondence needs an invertible transform"));
    }
    if height != grid.height() || width != grid.width() {
        return Err(Error::invalid("image size disagrees with patch grid"));
    }
    let map = (0..grid.len())
        .map(|i| {
            let (x, y) = grid.center(i);
            let (u, v) = transform.apply(x, y);
            grid.locate(u, v)
        })
        .collect();
    Ok(CorrespondenceMap { map })
}

/// Patch mask; `true` marks a patch hidden from the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskVector {
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl MaskVector {
    pub fn none(n: usize) -> Self {
        Self {
            mask: vec![false; n],
            ratio: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect()
    }
}

/// Uniformly masks `round(ratio · n)` patches; at least one must be masked.
pub fn sample_mask(rng: &mut impl Rng, n: usize, ratio: f64) -> Result<MaskVector> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let count = (ratio * n as f64).round() as usize;
    if count == 0 {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} over {n} patches masks nothing"
        )));
    }
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, count) {
        mask[i] = true;
    }
    Ok(MaskVector { mask, ratio })
}

/// Draws the ratio from the configured range, then samples the mask.
pub fn sample_mask_in_range(rng: &mut impl Rng, n: usize, config: &AugmentConfig) -> Result<MaskVector> {
    let lo = config.mask_ratio_min;
    let hi = config.mask_ratio_max.max(lo);
    let ratio = between(rng, lo, hi);
    sample_mask(rng, n, ratio)
}

/// The two views of one event image and the geometry linking them.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub x_plus: EventImage,
    pub x_star: EventImage,
    pub transform: Affine2,
    pub photometric: Photometric,
    pub correspondence: CorrespondenceMap,
    pub mask: MaskVector,
}

pub fn make_pair(
    x_plus: &EventImage,
    grid: &PatchGrid,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    let transform = sample_affine(rng, config, x_plus.width, x_plus.height);
    let warped = apply_affine(x_plus, &transform);
    let (x_star, photometric) = blur_and_jitter(&warped, rng, config);
    let correspondence = build_correspondence(&transform, grid, x_plus.height, x_plus.width)?;
    let mask = sample_mask_in_range(rng, grid.len(), config)?;
    Ok(AugmentedPair {
        x_plus: x_plus.clone(),
        x_star,
        transform,
        photometric,
        correspondence,
        mask,
    })
}
