use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Affine2;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPattern {
    Square,
    Vertical,
    Horizontal,
    RandomAffine,
}

impl FromStr for MotionPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Self::Square),
            "vertical" => Ok(Self::Vertical),
            "horizontal" => Ok(Self::Horizontal),
            "random-affine" => Ok(Self::RandomAffine),
            other => Err(Error::invalid(format!(
                "unknown motion pattern {other:?} (expected square, vertical, horizontal or random-affine)"
            ))),
        }
    }
}

impl fmt::Display for MotionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Square => "square",
            Self::Vertical => "vertical",
            Self::Horizontal => "horizontal",
            Self::RandomAffine => "random-affine",
        })
    }
}

/// Timestamped camera poses, each relative to the image centre.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub pattern: MotionPattern,
    pub poses: Vec<(u64, Affine2)>,
}

/// Point at arc-length fraction `s ∈ [0, 1]` along the square with corners
/// `(-a,-a) → (a,-a) → (a,a) → (-a,a)` and back to the start.
fn square_point(s: f64, a: f64) -> (f64, f64) {
    let corners = [(-a, -a), (a, -a), (a, a), (-a, a), (-a, -a)];
    let u = (s.clamp(0.0, 1.0) * 4.0).min(4.0);
    let side = (u.floor() as usize).min(3);
    let f = u - side as f64;
    let (p, q) = (corners[side], corners[side + 1]);
    (p.0 + (q.0 - p.0) * f, p.1 + (q.1 - p.1) * f)
}

pub fn generate_trajectory(
    pattern: MotionPattern,
    duration_us: u64,
    amplitude: f64,
    num_poses: usize,
    seed: u64,
) -> Result<CameraTrajectory> {
    if duration_us == 0 {
        return Err(Error::invalid("trajectory duration must be positive"));
    }
    if num_poses < 2 {
        return Err(Error::invalid("trajectory needs at least two poses"));
    }
    if (num_poses as u64 - 1) > duration_us {
        return Err(Error::invalid(
            "duration too short for strictly increasing microsecond timestamps",
        ));
    }
    let mut rng = seeded(seed);
    // Endpoint of the random-affine motion; the path interpolates from identity.
    let end = (
        rng.random_range(-15f64..=15.0).to_radians(),
        rng.random_range(0.9..=1.1),
        rng.random_range(-amplitude..=amplitude),
        rng.random_range(-amplitude..=amplitude),
    );
    let last = (num_poses - 1) as f64;
    let poses = (0..num_poses)
        .map(|i| {
            let s = i as f64 / last;
            let t = (duration_us as f64 * s).round() as u64;
            let pose = match pattern {
                MotionPattern::Horizontal => Affine2::translation(-amplitude + 2.0 * amplitude * s, 0.0),
                MotionPattern::Vertical => Affine2::translation(0.0, -amplitude + 2.0 * amplitude * s),
                MotionPattern::Square => {
                    let (x, y) = square_point(s, amplitude);
                    Affine2::translation(x, y)
                }
                MotionPattern::RandomAffine => {
                    let scale = 1.0 + (end.1 - 1.0) * s;
                    Affine2::from_params(end.0 * s, scale, scale, 0.0, end.2 * s, end.3 * s)
                }
            };
            (t, pose)
        })
        .collect();
    Ok(CameraTrajectory { pattern, poses })
}
