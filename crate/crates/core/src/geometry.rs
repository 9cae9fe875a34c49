//! 2D affine maps and bilinear resampling over pixel-center coordinates.
//!
//! Pixel `(x, y)` covers the square `[x - 0.5, x + 0.5) × [y - 0.5, y + 0.5)`;
//! integer coordinates address pixel centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p ↦ A p + b`, stored row-major as `[[a00, a01, b0], [a10, a11, b1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2 {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Linear part `R(rotation) · Shear(shear) · diag(sx, sy)` plus translation.
    pub fn from_params(rotation: f64, sx: f64, sy: f64, shear: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = rotation.sin_cos();
        let k = shear.tan();
        // R · [[1, k], [0, 1]] · diag(sx, sy)
        let a00 = c * sx;
        let a01 = (c * k - s) * sy;
        let a10 = s * sx;
        let a11 = (s * k + c) * sy;
        Self {
            m: [[a00, a01, tx], [a10, a11, ty]],
        }
    }

    /// Conjugates the linear part so it acts about `(cx, cy)` instead of the origin.
    pub fn about(self, cx: f64, cy: f64) -> Self {
        let centre = Self::translation(cx, cy);
        let back = Self::translation(-cx, -cy);
        centre.compose(&self).compose(&back)
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Self { m }
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= 1e-6 || !d.is_finite() {
            return Err(Error::invalid(format!("affine map is degenerate (det {d})")));
        }
        let [[a, b, tx], [c, e, ty]] = self.m;
        let ia = e / d;
        let ib = -b / d;
        let ic = -c / d;
        let ie = a / d;
        Ok(Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, ie, -(ic * tx + ie * ty)],
            ],
        })
    }
}

/// Bilinear sample of a `width × height` plane at `(x, y)`; outside is zero.
#[inline]
pub fn sample_bilinear(plane: &[f32], width: usize, height: usize, x: f64, y: f64) -> f32 {
    if !(x > -1.0 && y > -1.0 && x < width as f64 && y < height as f64) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            0.0
        } else {
            plane[yi as usize * width + xi as usize] as f64
        }
    };
    let mut v = at(x0, y0) * (1.0 - fx) * (1.0 - fy);
    if fx != 0.0 {
        v += at(x0 + 1, y0) * fx * (1.0 - fy);
    }
    if fy != 0.0 {
        v += at(x0, y0 + 1) * (1.0 - fx) * fy;
        if fx != 0.0 {
            v += at(x0 + 1, y0 + 1) * fx * fy;
        }
    }
    v as f32
}
