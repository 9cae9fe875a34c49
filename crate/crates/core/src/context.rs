//! Per-image K-means over patch features and context assignment transfer.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{CorrespondenceMap, PatchGrid};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cluster centres with per-cluster member counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub centers: Tensor<f64>,
    pub counts: Vec<usize>,
}

/// Hard context membership per patch; `None` marks a patch without a valid
/// correspondence, which is excluded everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextAssignment {
    pub k: usize,
    pub labels: Vec<Option<usize>>,
}

impl ContextAssignment {
    pub fn from_labels(k: usize, labels: &[usize]) -> Self {
        Self {
            k,
            labels: labels.iter().map(|&l| Some(l)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One-hot row `a[i]`; all zeros for an invalid patch.
    pub fn row(&self, i: usize) -> Vec<u8> {
        let mut r = vec![0u8; self.k];
        if let Some(l) = self.labels[i] {
            r[l] = 1;
        }
        r
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Patch indices in context `k`, in patch order.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == Some(k)).then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub contexts: ContextSet,
    pub assignment: ContextAssignment,
    /// Objective after initialization and after every assignment/update step.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::INFINITY)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centre with ties to the lowest index.
fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(x, &centers[0]));
    for (k, c) in centers.iter().enumerate().skip(1) {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective(points: &[&[f64]], centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum()
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (dv, p) in d2.iter_mut().zip(points) {
            *dv = dv.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding on the rows of `features`.
///
/// Empty clusters are re-seeded with the point farthest from its centre
/// (taken from a cluster with more than one member). The returned assignment
/// is the exact nearest-centre assignment for the returned centres.
pub fn kmeans<T: Scalar>(features: &Tensor<T>, k: usize, iters: usize, rng: &mut impl Rng) -> Result<KMeansResult> {
    if features.rank() != 2 {
        return Err(Error::shape("kmeans", format!("features {:?}", features.shape())));
    }
    let (n, d) = (features.rows(), features.cols());
    if k == 0 || n < k {
        return Err(Error::invalid(format!("kmeans needs 1 <= K <= N, got K={k}, N={n}")));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite { op: "kmeans" });
    }
    let data: Vec<f64> = features.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let points: Vec<&[f64]> = data.chunks(d.max(1)).take(n).collect();

    let mut centers = kmeans_pp(&points, k, rng);
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> { points.iter().map(|p| nearest(p, centers).0).collect() };
    let mut labels = assign(&centers);
    let mut trace = vec![objective(&points, &centers, &labels)];

    for _ in 0..iters {
        reseed_empty(&points, &mut centers, &mut labels, k);
        // update
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        trace.push(objective(&points, &centers, &labels));
        // assignment
        let next = assign(&centers);
        let changed = next != labels;
        labels = next;
        trace.push(objective(&points, &centers, &labels));
        if !changed {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    Ok(KMeansResult {
        contexts: ContextSet {
            centers: Tensor::new(vec![k, d], centers.concat())?,
            counts,
        },
        assignment: ContextAssignment::from_labels(k, &labels),
        objective_trace: trace,
    })
}

fn reseed_empty(points: &[&[f64]], centers: &mut [Vec<f64>], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let dist = sq_dist(p, &centers[labels[i]]);
            if far.is_none_or(|(_, best)| dist > best) {
                far = Some((i, dist));
            }
        }
        match far {
            Some((i, _)) => {
                centers[empty] = points[i].to_vec();
                labels[i] = empty;
            }
            None => return,
        }
    }
}

/// Best (lowest final objective) of `restarts` independent runs; ties keep the earliest.
pub fn kmeans_best_of<T: Scalar>(
    features: &Tensor<T>,
    k: usize,
    iters: usize,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let r = kmeans(features, k, iters, rng)?;
        if best.as_ref().is_none_or(|b| r.objective() < b.objective()) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Row-wise L2 normalization used before clustering.
pub fn l2_normalize_rows<T: Scalar>(features: &Tensor<T>) -> Tensor<f64> {
    let (n, d) = (features.rows(), features.cols());
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let row: Vec<f64> = features.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], out).expect("shape matches")
}

/// `a★[i] = a⁺[corr(i)]` where the correspondence is valid.
pub fn transfer_assignments(a_plus: &ContextAssignment, corr: &CorrespondenceMap) -> ContextAssignment {
    ContextAssignment {
        k: a_plus.k,
        labels: corr
            .map
            .iter()
            .map(|c| c.and_then(|j| a_plus.labels.get(j).copied().flatten()))
            .collect(),
    }
}

/// Rows of `features` belonging to context `k`, in patch order.
pub fn gather_context<T: Scalar>(features: &Tensor<T>, assignment: &ContextAssignment, k: usize) -> Result<Tensor<T>> {
    if features.rows() != assignment.len() {
        return Err(Error::shape(
            "gather_context",
            format!("{} features vs {} assignments", features.rows(), assignment.len()),
        ));
    }
    let members = assignment.members(k);
    let d = features.cols();
    let data = members.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
    Tensor::new(vec![members.len(), d], data)
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

/// Colour-coded per-patch context map, `scale` pixels per patch cell side.
pub fn render_context_labels(assignment: &ContextAssignment, grid: &PatchGrid, scale: usize) -> Result<RgbImage> {
    if assignment.len() != grid.len() {
        return Err(Error::shape(
            "render_context_labels",
            format!("{} labels for {} patches", assignment.len(), grid.len()),
        ));
    }
    let cell = (grid.patch * scale.max(1)) as u32;
    Ok(RgbImage::from_fn(grid.cols as u32 * cell, grid.rows as u32 * cell, |x, y| {
        let i = (y / cell) as usize * grid.cols + (x / cell) as usize;
        match assignment.labels[i] {
            Some(l) => Rgb(PALETTE[l % PALETTE.len()]),
            None => Rgb([0, 0, 0]),
        }
    }))
}
