//! Frozen-feature linear probe for per-patch segmentation.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::PatchGrid;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::event::EventImage;
use crate::model::{Architecture, ParamSet};
use crate::rng::seeded;
use crate::sim::{load_label_map, DatasetManifest, Split};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::load_event_images;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub iterations: usize,
    pub l2: f64,
    /// Dataset manifest; falls back to the training manifest when empty.
    pub manifest: String,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 2,
            iterations: 500,
            l2: 1e-4,
            manifest: String::new(),
        }
    }
}

/// Standardization plus a linear map `D → classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
}

impl ProbeHead {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.num_classes();
        let mut out = self.bias.clone();
        for (j, &v) in x.iter().enumerate() {
            let z = (v - self.mean[j]) * self.scale[j];
            for (o, w) in out.iter_mut().zip(&self.weights.data()[j * c..(j + 1) * c]) {
                *o += z * w;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ProbeData {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_sample<T: Scalar>(&mut self, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
        if features.cols() != self.dim || features.rows() != labels.len() {
            return Err(Error::shape(
                "probe_data",
                format!("features {:?} with {} labels", features.shape(), labels.len()),
            ));
        }
        self.features
            .extend(features.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
        self.labels.extend_from_slice(labels);
        Ok(())
    }
}

fn standardization(data: &ProbeData) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (data.len() as f64, data.dim);
    let mut mean = vec![0.0; d];
    for i in 0..data.len() {
        for (a, v) in mean.iter_mut().zip(data.row(i)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; d];
    for i in 0..data.len() {
        for ((a, v), mu) in var.iter_mut().zip(data.row(i)).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let scale = var.iter().map(|v| 1.0 / (v / m).sqrt().max(1e-8)).collect();
    (mean, scale)
}

/// Mean cross-entropy plus `l2/2·‖W‖²` and its gradient.
fn objective(z: &[f64], labels: &[usize], d: usize, c: usize, w: &[f64], b: &[f64], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let m = labels.len();
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut loss = 0.0;
    let mut logits = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        let x = &z[i * d..(i + 1) * d];
        logits.copy_from_slice(b);
        for (j, &v) in x.iter().enumerate() {
            for (o, wv) in logits.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                *o += v * wv;
            }
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        loss += sum.ln() + mx - logits[y];
        for k in 0..c {
            let p = (logits[k] - mx).exp() / sum - if k == y { 1.0 } else { 0.0 };
            gb[k] += p;
            for j in 0..d {
                gw[j * c + k] += p * x[j];
            }
        }
    }
    let inv = 1.0 / m as f64;
    gw.iter_mut().zip(w).for_each(|(g, wv)| *g = *g * inv + l2 * wv);
    gb.iter_mut().for_each(|g| *g *= inv);
    let reg = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss * inv + reg, gw, gb)
}

/// Largest eigenvalue of `AᵀA / M` for `A = [Z, 1]`, by power iteration.
fn lipschitz(z: &[f64], m: usize, d: usize) -> f64 {
    let mut v = vec![1.0; d + 1];
    let mut lambda = 1.0;
    for _ in 0..100 {
        let mut out = vec![0.0; d + 1];
        for i in 0..m {
            let x = &z[i * d..(i + 1) * d];
            let dotv: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            for j in 0..d {
                out[j] += dotv * x[j];
            }
            out[d] += dotv;
        }
        let norm = out.iter().map(|a| a * a).sum::<f64>().sqrt() / m as f64;
        if norm == 0.0 {
            return 1.0;
        }
        lambda = norm;
        let n = out.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = out.iter().map(|a| a / n).collect();
    }
    lambda
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub head: ProbeHead,
    pub loss: f64,
}

/// Multinomial logistic regression by accelerated full-batch gradient descent.
pub fn train_probe(data: &ProbeData, num_classes: usize, config: &ProbeConfig) -> Result<ProbeFit> {
    if data.is_empty() || num_classes < 2 {
        return Err(Error::invalid("probe needs data and at least two classes"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
    }
    if !data.features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "train_probe" });
    }
    let (d, c, m) = (data.dim, num_classes, data.len());
    let (mean, scale) = standardization(data);
    let z: Vec<f64> = data
        .features
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, mu), s)| (v - mu) * s))
        .collect();
    let step = 1.0 / (0.5 * lipschitz(&z, m, d) * 1.05 + config.l2);

    let mut rng = seeded(config.seed);
    let mut w: Vec<f64> = (0..d * c).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = vec![0.0; c];
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t = 1.0f64;
    for _ in 0..config.iterations {
        let (_, gw, gb) = objective(&z, &data.labels, d, c, &yw, &yb, config.l2);
        let nw: Vec<f64> = yw.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
        let nb: Vec<f64> = yb.iter().zip(&gb).map(|(a, g)| a - step * g).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        yw = nw.iter().zip(&w).map(|(n, o)| n + beta * (n - o)).collect();
        yb = nb.iter().zip(&b).map(|(n, o)| n + beta * (n - o)).collect();
        w = nw;
        b = nb;
        t = t_next;
    }
    let (loss, _, _) = objective(&z, &data.labels, d, c, &w, &b, config.l2);
    Ok(ProbeFit {
        head: ProbeHead {
            mean,
            scale,
            weights: Tensor::new(vec![d, c], w)?,
            bias: b,
        },
        loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub seeds: Vec<u64>,
    pub checkpoint: String,
    pub num_train: usize,
    pub num_test: usize,
    pub train_loss: f64,
}

/// Per-class IoU and mIoU from predictions and ground truth.
pub fn iou_scores(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<(Vec<Option<f64>>, f64, f64)> {
    if predictions.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid("predictions and labels must be non-empty and equal length"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!("class id outside {num_classes} classes")));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let ious: Vec<Option<f64>> = (0..num_classes)
        .map(|k| {
            let denom = tp[k] + fp[k] + fn_[k];
            (denom > 0).then(|| tp[k] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    let accuracy = tp.iter().sum::<usize>() as f64 / truth.len() as f64;
    Ok((ious, miou, accuracy))
}

pub fn evaluate_miou(head: &ProbeHead, data: &ProbeData) -> Result<ProbeReport> {
    let predictions: Vec<usize> = (0..data.len()).map(|i| head.predict(data.row(i))).collect();
    let (per_class_iou, miou, pixel_accuracy) = iou_scores(&predictions, &data.labels, head.num_classes())?;
    Ok(ProbeReport {
        per_class_iou,
        miou,
        pixel_accuracy,
        seeds: Vec::new(),
        checkpoint: String::new(),
        num_train: 0,
        num_test: data.len(),
        train_loss: f64::NAN,
    })
}

/// Majority pixel label of every patch; ties go to the lowest class.
pub fn patch_labels(labels: &[u8], width: usize, height: usize, grid: &PatchGrid, num_classes: usize) -> Result<Vec<usize>> {
    if width != grid.width() || height != grid.height() || labels.len() != width * height {
        return Err(Error::shape("patch_labels", "label map size disagrees with patch grid"));
    }
    let p = grid.patch;
    (0..grid.len())
        .map(|i| {
            let (r, c) = (i / grid.cols, i % grid.cols);
            let mut counts = vec![0usize; num_classes];
            for y in r * p..(r + 1) * p {
                for x in c * p..(c + 1) * p {
                    let l = labels[y * width + x] as usize;
                    if l >= num_classes {
                        return Err(Error::invalid(format!("label {l} outside {num_classes} classes")));
                    }
                    counts[l] += 1;
                }
            }
            let mut best = 0;
            for (k, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = k;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Backbone features `[N, D]` of one event image, no masking.
pub fn extract_features<T: Scalar>(arch: &Architecture, params: &ParamSet<T>, image: &EventImage) -> Result<Tensor<T>> {
    let grid = PatchGrid::new(arch.config.image_height, arch.config.image_width, arch.config.patch)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false)?;
    let x = tape.constant(grid.extract(image)?)?;
    let z = arch.encode(&mut tape, &p, x, None)?;
    Ok(tape.value(z).clone())
}

/// Features and patch labels of one manifest split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFeatures {
    pub sample_ids: Vec<usize>,
    pub features: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<usize>>,
}

impl SplitFeatures {
    pub fn to_data(&self) -> Result<ProbeData> {
        let dim = self.features.first().map(|f| f.cols()).unwrap_or(0);
        let mut data = ProbeData::new(dim);
        for (f, l) in self.features.iter().zip(&self.labels) {
            data.push_sample(f, l)?;
        }
        Ok(data)
    }

    pub fn to_container(&self, checkpoint: &str) -> Container {
        let mut c = Container::new(serde_json::json!({
            "format": "evpretrain-features",
            "kind": "features",
            "checkpoint": checkpoint,
            "samples": self.sample_ids,
        }));
        for ((id, f), l) in self.sample_ids.iter().zip(&self.features).zip(&self.labels) {
            c.push(format!("features.{id:05}"), f);
            c.push(format!("labels.{id:05}"), &Tensor::from_vec(l.iter().map(|&v| v as f32).collect()));
        }
        c
    }
}

pub fn split_features(
    arch: &Architecture,
    params: &ParamSet<f32>,
    manifest: &DatasetManifest,
    split: Split,
    num_classes: usize,
) -> Result<SplitFeatures> {
    let grid = PatchGrid::new(arch.config.image_height, arch.config.image_width, arch.config.patch)?;
    let images = load_event_images(manifest, split, &arch.config)?;
    let records: Vec<(usize, String)> = manifest
        .split(split)
        .map(|(i, r)| {
            r.labels
                .clone()
                .map(|l| (i, l))
                .ok_or_else(|| Error::invalid(format!("sample {i} has no label map")))
        })
        .collect::<Result<_>>()?;
    if records.is_empty() {
        return Err(Error::invalid(format!("manifest has no {split:?} samples")));
    }
    let rows: Vec<(Tensor<f32>, Vec<usize>)> = records
        .par_iter()
        .zip(images.par_iter())
        .map(|((_, label_path), img)| {
            let (w, h, map) = load_label_map(manifest.resolve(label_path))?;
            Ok((extract_features(arch, params, img)?, patch_labels(&map, w, h, &grid, num_classes)?))
        })
        .collect::<Result<_>>()?;
    let (features, labels) = rows.into_iter().unzip();
    Ok(SplitFeatures {
        sample_ids: records.iter().map(|(i, _)| *i).collect(),
        features,
        labels,
    })
}

/// Extracts features for both probe splits, fits the probe, reports test mIoU.
pub fn run_probe(
    arch: &Architecture,
    params: &ParamSet<f32>,
    manifest: &DatasetManifest,
    config: &ProbeConfig,
    checkpoint: &str,
    feature_dir: Option<&Path>,
) -> Result<ProbeReport> {
    let train = split_features(arch, params, manifest, Split::ProbeTrain, config.num_classes)?;
    let test = split_features(arch, params, manifest, Split::ProbeTest, config.num_classes)?;
    if let Some(dir) = feature_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        train.to_container(checkpoint).save(dir.join("features_probe_train.eckp"))?;
        test.to_container(checkpoint).save(dir.join("features_probe_test.eckp"))?;
    }
    let train_data = train.to_data()?;
    let fit = train_probe(&train_data, config.num_classes, config)?;
    let mut report = evaluate_miou(&fit.head, &test.to_data()?)?;
    report.seeds = vec![config.seed];
    report.checkpoint = checkpoint.to_string();
    report.num_train = train_data.len();
    report.train_loss = fit.loss;
    Ok(report)
}
