//! Student/teacher pre-training: losses, the training step, checkpoints and
//! the metrics log.
//!
//! Each sample gets its own tapes. The teacher runs first on constant
//! parameters (x★ intact for the patch branch, x⁺ for the context and image
//! branches, plus per-image K-means). The student then runs once on masked
//! x★ and all three losses share that forward pass. Per-sample gradients are
//! summed in sample order, so results do not depend on the thread count.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pair, AugmentConfig, CorrespondenceMap, MaskVector, PatchGrid};
use crate::checkpoint::Container;
use crate::context::{kmeans_best_of, l2_normalize_rows, transfer_assignments, ContextAssignment};
use crate::error::{Error, Result};
use crate::event::{to_event_image, voxelize, read_events, EventImage};
use crate::model::{teacher_center_update, Architecture, Centers, ModelConfig, ParamSet, StudentTeacherPair};
use crate::rng::{decode_state, derive_seed, encode_state, seeded};
use crate::sim::{DatasetManifest, Split};
use crate::tensor::{row_entropy, teacher_distribution, AdamW, AdamWConfig, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the context-level loss (λ1).
    pub lambda_context: f64,
    /// Weight of the image-level loss (λ2).
    pub lambda_image: f64,
    pub num_contexts: usize,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub centering: bool,
    pub center_rate: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Optimizer steps. The reference schedule is 300 epochs at batch 1024;
    /// the desk-scale default is 300 steps at batch 32.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub manifest: String,
    pub output_dir: String,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_context: 0.1,
            lambda_image: 0.9,
            num_contexts: 8,
            kmeans_iters: 10,
            kmeans_restarts: 1,
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            centering: true,
            center_rate: 0.9,
            momentum_start: 0.996,
            momentum_end: 1.0,
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.04,
            warmup_steps: 30,
            steps: 300,
            batch_size: 32,
            seed: 0,
            manifest: String::new(),
            output_dir: "runs/pretrain".into(),
            checkpoint_every: 100,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        self.model.validate()?;
        if !(self.lambda_context >= 0.0 && self.lambda_image >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.num_contexts == 0 || self.num_contexts > self.model.num_patches() {
            return bad(format!(
                "num_contexts must be in 1..={}",
                self.model.num_patches()
            ));
        }
        if !(self.student_temperature > 0.0 && self.teacher_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.center_rate) {
            return bad("center_rate must be in [0, 1]".into());
        }
        for m in [self.momentum_start, self.momentum_end] {
            if !(0.0..=1.0).contains(&m) {
                return bad("momentum endpoints must be in [0, 1]".into());
            }
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive; min_lr and weight_decay non-negative".into());
        }
        let a = &self.augment;
        if !(a.mask_ratio_min > 0.0 && a.mask_ratio_min <= a.mask_ratio_max && a.mask_ratio_max <= 1.0) {
            return bad("mask ratio range must satisfy 0 < min <= max <= 1".into());
        }
        if a.scale_min <= 0.0 || a.scale_max < a.scale_min {
            return bad("augment scale range is invalid".into());
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Cosine ramp of the EMA momentum from `momentum_start` to `momentum_end`.
    pub fn momentum_at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.momentum_start;
        }
        let progress = (step as f64 / self.steps as f64).min(1.0);
        let m = self.momentum_end
            - (self.momentum_end - self.momentum_start) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        m.clamp(0.0, 1.0)
    }
}

/// Student/teacher temperatures and the optional teacher centre.
#[derive(Debug, Clone, Copy)]
pub struct Sharpening<'a, T> {
    pub student: f64,
    pub teacher: f64,
    pub center: Option<&'a Tensor<T>>,
}

fn mean_ce<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: &Tensor<T>,
    student: Var,
    sharpen: Sharpening<'_, T>,
) -> Result<Var> {
    let rows = teacher_logits.rows();
    if rows == 0 {
        return Err(Error::invalid("cross-entropy over zero rows"));
    }
    let target = teacher_distribution(teacher_logits, sharpen.center, T::lit(sharpen.teacher))?;
    let ce = tape.cross_entropy(&target, student, T::lit(sharpen.student))?;
    let total = tape.sum(ce)?;
    tape.scale(total, T::lit(1.0 / rows as f64))
}

fn select_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let d = t.cols();
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data)
}

/// Masked-patch loss: mean over masked `i` of `CE(t_i, s_i)`.
///
/// `teacher_logits` and `student_logits` cover all `N` patches; only masked
/// rows are read, so unmasked rows get exactly zero gradient.
pub fn loss_patch<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    mask: &MaskVector,
    sharpen: Sharpening<'_, T>,
) -> Result<Var> {
    let n = tape.shape(student_logits)[0];
    if mask.mask.len() != n || teacher_logits.rows() != n {
        return Err(Error::shape(
            "loss_patch",
            format!("mask {} / teacher {} / student {n} rows", mask.mask.len(), teacher_logits.rows()),
        ));
    }
    let masked = mask.indices();
    if masked.is_empty() {
        return Err(Error::invalid("patch loss needs at least one masked patch"));
    }
    let s = tape.gather_rows(student_logits, &masked)?;
    loss_patch_rows(tape, &select_rows(teacher_logits, &masked)?, s, sharpen)
}

/// [`loss_patch`] on logits already restricted to the masked rows.
pub fn loss_patch_rows<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_masked: &Tensor<T>,
    student_masked: Var,
    sharpen: Sharpening<'_, T>,
) -> Result<Var> {
    mean_ce(tape, teacher_masked, student_masked, sharpen)
}

/// Image loss `CE(t_img, s_img)` on `[1, d]` logits.
pub fn loss_image<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    sharpen: Sharpening<'_, T>,
) -> Result<Var> {
    mean_ce(tape, teacher_logits, student_logits, sharpen)
}

/// Context loss: mean over the `K'` usable contexts of `CE(t_k, s_k)`.
pub fn loss_context<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    sharpen: Sharpening<'_, T>,
) -> Result<Var> {
    if teacher_logits.rows() == 0 {
        return Err(Error::invalid("context loss has no usable contexts"));
    }
    mean_ce(tape, teacher_logits, student_logits, sharpen)
}

fn sharpening<'a, T>(config: &TrainConfig, center: Option<&'a Tensor<T>>) -> Sharpening<'a, T> {
    Sharpening {
        student: config.student_temperature,
        teacher: config.teacher_temperature,
        center,
    }
}

/// Everything one sample contributes to a step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInputs<T> {
    pub patches_star: Tensor<T>,
    pub patches_plus: Tensor<T>,
    pub mask: MaskVector,
    pub correspondence: CorrespondenceMap,
}

impl<T: Scalar> SampleInputs<T> {
    /// Augments `image` with an RNG seeded from `seed`.
    pub fn prepare(image: &EventImage, grid: &PatchGrid, augment: &AugmentConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let pair = make_pair(image, grid, augment, &mut rng)?;
        Ok(Self {
            patches_star: grid.extract(&pair.x_star)?,
            patches_plus: grid.extract(&pair.x_plus)?,
            mask: pair.mask,
            correspondence: pair.correspondence,
        })
    }
}

/// Detached teacher outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs<T> {
    /// Patch-head logits on intact x★, `[N, d]`.
    pub patch_logits: Tensor<T>,
    /// Image-head logits on mean-pooled x⁺ features, `[1, d]`.
    pub image_logits: Tensor<T>,
    /// Context-head logits for the usable contexts, `[K', d]`.
    pub context_logits: Tensor<T>,
    /// Context ids with members on both sides, ascending.
    pub usable: Vec<usize>,
    pub a_plus: ContextAssignment,
    pub a_star: ContextAssignment,
    /// Backbone features on x⁺, `[N, D]`.
    pub features_plus: Tensor<T>,
}

fn context_embeddings<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<T>,
    p: &[Var],
    features: Var,
    assignment: &ContextAssignment,
    usable: &[usize],
) -> Result<Var> {
    let (keys, values) = arch.pool.project(tape, p, features)?;
    let pooled = usable
        .iter()
        .map(|&k| arch.pool.pool_projected(tape, p, keys, values, &assignment.members(k)))
        .collect::<Result<Vec<_>>>()?;
    let stacked = if pooled.len() == 1 { pooled[0] } else { tape.concat(&pooled, 0)? };
    arch.context_head.forward(tape, p, stacked)
}

/// Teacher forward passes plus per-image clustering; nothing is differentiated.
pub fn teacher_pass<T: Scalar>(
    arch: &Architecture,
    teacher: &ParamSet<T>,
    inputs: &SampleInputs<T>,
    config: &TrainConfig,
    kmeans_seed: u64,
) -> Result<TeacherOutputs<T>> {
    let mut tape = Tape::new();
    let p = teacher.bind(&mut tape, false)?;
    let star = tape.constant(inputs.patches_star.clone())?;
    let plus = tape.constant(inputs.patches_plus.clone())?;
    let z_star = arch.encode(&mut tape, &p, star, None)?;
    let z_plus = arch.encode(&mut tape, &p, plus, None)?;
    let patch_logits = arch.patch_head.forward(&mut tape, &p, z_star)?;
    let pooled = arch.mean_pool(&mut tape, z_plus)?;
    let image_logits = arch.image_head.forward(&mut tape, &p, pooled)?;

    let features_plus = tape.value(z_plus).clone();
    let normalized = l2_normalize_rows(&features_plus);
    let clusters = kmeans_best_of(
        &normalized,
        config.num_contexts,
        config.kmeans_iters,
        config.kmeans_restarts,
        &mut seeded(kmeans_seed),
    )?;
    let a_plus = clusters.assignment;
    let a_star = transfer_assignments(&a_plus, &inputs.correspondence);
    let usable: Vec<usize> = (0..config.num_contexts)
        .filter(|&k| !a_plus.members(k).is_empty() && !a_star.members(k).is_empty())
        .collect();
    let context_logits = if usable.is_empty() {
        Tensor::zeros(&[0, config.model.prototypes])
    } else {
        let v = context_embeddings(arch, &mut tape, &p, z_plus, &a_plus, &usable)?;
        tape.value(v).clone()
    };
    Ok(TeacherOutputs {
        patch_logits: tape.value(patch_logits).clone(),
        image_logits: tape.value(image_logits).clone(),
        context_logits,
        usable,
        a_plus,
        a_star,
        features_plus,
    })
}

/// Multipliers applied to one sample's losses inside the batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub patch: f64,
    pub context: f64,
    pub image: f64,
}

/// Loss nodes of one student graph.
#[derive(Debug, Clone, Copy)]
pub struct StudentLosses {
    pub patch: Var,
    pub context: Option<Var>,
    pub image: Var,
    /// `w_p·L_patch + w_c·L_context + w_i·L_image`.
    pub total: Var,
}

/// Student forward on masked x★ (once) and the three losses against fixed
/// teacher outputs.
pub fn student_losses<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<T>,
    p: &[Var],
    inputs: &SampleInputs<T>,
    teacher: &TeacherOutputs<T>,
    centers: Option<&Centers<T>>,
    config: &TrainConfig,
    weights: LossWeights,
) -> Result<StudentLosses> {
    let sharpen = |center| sharpening(config, center);
    let x = tape.constant(inputs.patches_star.clone())?;
    let z = arch.encode(tape, p, x, Some(&inputs.mask.mask))?;

    let masked = inputs.mask.indices();
    if masked.is_empty() {
        return Err(Error::invalid("patch loss needs at least one masked patch"));
    }
    let z_masked = tape.gather_rows(z, &masked)?;
    let s_patch = arch.patch_head.forward(tape, p, z_masked)?;
    let patch = loss_patch_rows(
        tape,
        &select_rows(&teacher.patch_logits, &masked)?,
        s_patch,
        sharpen(centers.map(|c| &c.patch)),
    )?;

    let pooled = arch.mean_pool(tape, z)?;
    let s_image = arch.image_head.forward(tape, p, pooled)?;
    let image = loss_image(tape, &teacher.image_logits, s_image, sharpen(centers.map(|c| &c.image)))?;

    let context = if teacher.usable.is_empty() {
        None
    } else {
        let s_ctx = context_embeddings(arch, tape, p, z, &teacher.a_star, &teacher.usable)?;
        Some(loss_context(
            tape,
            &teacher.context_logits,
            s_ctx,
            sharpen(centers.map(|c| &c.context)),
        )?)
    };

    let mut total = tape.scale(patch, T::lit(weights.patch))?;
    let wi = tape.scale(image, T::lit(weights.image))?;
    total = tape.add(total, wi)?;
    if let Some(c) = context {
        let wc = tape.scale(c, T::lit(weights.context))?;
        total = tape.add(total, wc)?;
    }
    Ok(StudentLosses {
        patch,
        context,
        image,
        total,
    })
}

/// Per-step losses and diagnostics (batch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_patch: f64,
    pub l_context: f64,
    pub l_image: f64,
    /// Sum of the per-sample weighted objectives as evaluated on the tapes.
    pub l_total: f64,
    pub masked_patches: usize,
    pub contexts_used: usize,
    pub samples_without_context: usize,
    pub teacher_entropy: f64,
    pub teacher_entropy_min: f64,
    pub lr: f64,
    pub momentum: f64,
}

pub const METRICS_HEADER: &str = "step,l_patch,l_context,l_image,l_total,teacher_entropy,lr,momentum";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.l_patch,
            self.l_context,
            self.l_image,
            self.l_total,
            self.teacher_entropy,
            self.lr,
            self.momentum
        )
    }
}

struct StudentResult<T> {
    patch: f64,
    context: Option<f64>,
    image: f64,
    total: f64,
    grads: Vec<Tensor<T>>,
}

fn value_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64().unwrap_or(f64::NAN)
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub pair: StudentTeacherPair<T>,
    pub optimizer: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub grid: PatchGrid,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pair = StudentTeacherPair::init(&config.model, derive_seed(config.seed, 0))?;
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &pair.student.tensors,
        );
        let grid = PatchGrid::new(config.model.image_height, config.model.image_width, config.model.patch)?;
        Ok(Self {
            rng: seeded(derive_seed(config.seed, 1)),
            config,
            pair,
            optimizer,
            step: 0,
            grid,
        })
    }

    /// Draws `batch_size` (sample index, augmentation seed) pairs.
    pub fn draw_batch(&mut self, num_samples: usize) -> Result<Vec<(usize, u64)>> {
        if num_samples == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        let b = self.config.batch_size;
        let indices: Vec<usize> = if b <= num_samples {
            index::sample(&mut self.rng, num_samples, b).into_vec()
        } else {
            (0..b).map(|_| self.rng.random_range(0..num_samples)).collect()
        };
        Ok(indices.into_iter().map(|i| (i, self.rng.random::<u64>())).collect())
    }

    /// One optimization step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[EventImage]) -> Result<LossReport> {
        let batch = self.draw_batch(data.len())?;
        let items: Vec<(usize, &EventImage, u64)> = batch.iter().map(|&(i, s)| (i, &data[i], s)).collect();
        self.step_on(&items)
    }

    fn diverged(&self, sample: usize, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => Error::Diverged {
                step: self.step,
                sample,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        }
    }

    /// One optimization step on explicit `(sample id, image, seed)` items.
    pub fn step_on(&mut self, batch: &[(usize, &EventImage, u64)]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cfg = &self.config;
        let arch = &self.pair.arch;
        let grid = &self.grid;

        let inputs: Vec<SampleInputs<T>> = batch
            .par_iter()
            .map(|&(_, img, seed)| SampleInputs::prepare(img, grid, &cfg.augment, seed))
            .collect::<Result<_>>()?;
        let teacher_params = &self.pair.teacher;
        let teacher: Vec<Result<TeacherOutputs<T>>> = inputs
            .par_iter()
            .zip(batch.par_iter())
            .map(|(inp, &(_, _, seed))| teacher_pass(arch, teacher_params, inp, cfg, derive_seed(seed, 1)))
            .collect();
        let teacher = teacher
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| self.diverged(batch[i].0, e)))
            .collect::<Result<Vec<_>>>()?;

        let b = batch.len() as f64;
        let with_context = teacher.iter().filter(|t| !t.usable.is_empty()).count();
        let weights = LossWeights {
            patch: 1.0 / b,
            image: cfg.lambda_image / b,
            context: if with_context > 0 {
                cfg.lambda_context / with_context as f64
            } else {
                0.0
            },
        };
        let centers = cfg.centering.then_some(&self.pair.centers);
        let student = &self.pair.student;
        let results: Vec<Result<StudentResult<T>>> = inputs
            .par_iter()
            .zip(teacher.par_iter())
            .map(|(inp, t)| {
                let mut tape = Tape::new();
                let p = student.bind(&mut tape, true)?;
                let l = student_losses(arch, &mut tape, &p, inp, t, centers, cfg, weights)?;
                let g = tape.backward(l.total)?;
                let grads = p
                    .iter()
                    .map(|&v| g.get(v).cloned().ok_or_else(|| Error::invalid("missing student gradient")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(StudentResult {
                    patch: value_of(&tape, l.patch),
                    context: l.context.map(|c| value_of(&tape, c)),
                    image: value_of(&tape, l.image),
                    total: value_of(&tape, l.total),
                    grads,
                })
            })
            .collect();
        let results = results
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| self.diverged(batch[i].0, e)))
            .collect::<Result<Vec<_>>>()?;

        let mut grads: Vec<Tensor<T>> = student.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + v;
                }
            }
        }
        for (i, r) in results.iter().enumerate() {
            if !(r.total.is_finite() && r.grads.iter().all(Tensor::all_finite)) {
                return Err(Error::Diverged {
                    step: self.step,
                    sample: batch[i].0,
                    detail: "non-finite loss or gradient".into(),
                });
            }
        }

        let lr = cfg.lr_at(self.step);
        let momentum = cfg.momentum_at(self.step);

        // teacher entropy with the centre in effect for this step
        let mut entropies = Vec::new();
        for t in &teacher {
            let probs = teacher_distribution(
                &t.patch_logits,
                centers.map(|c| &c.patch),
                T::lit(cfg.teacher_temperature),
            )?;
            entropies.extend(row_entropy(&probs).into_iter().map(|h| h.to_f64().unwrap_or(f64::NAN)));
        }
        let teacher_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
        let teacher_entropy_min = entropies.iter().copied().fold(f64::INFINITY, f64::min);

        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        let decay = self.pair.student.decay.clone();
        self.optimizer
            .update(&mut self.pair.student.tensors, &grad_refs, &decay, lr)?;
        self.pair.ema_update(momentum)?;

        let rate = self.config.center_rate;
        let patch_logits: Vec<&Tensor<T>> = teacher.iter().map(|t| &t.patch_logits).collect();
        let image_logits: Vec<&Tensor<T>> = teacher.iter().map(|t| &t.image_logits).collect();
        let context_logits: Vec<&Tensor<T>> = teacher.iter().map(|t| &t.context_logits).collect();
        teacher_center_update(&mut self.pair.centers.patch, &patch_logits, rate)?;
        teacher_center_update(&mut self.pair.centers.image, &image_logits, rate)?;
        teacher_center_update(&mut self.pair.centers.context, &context_logits, rate)?;

        let ctx: Vec<f64> = results.iter().filter_map(|r| r.context).collect();
        let report = LossReport {
            step: self.step,
            l_patch: results.iter().map(|r| r.patch).sum::<f64>() / b,
            l_context: if ctx.is_empty() { 0.0 } else { ctx.iter().sum::<f64>() / ctx.len() as f64 },
            l_image: results.iter().map(|r| r.image).sum::<f64>() / b,
            l_total: results.iter().map(|r| r.total).sum(),
            masked_patches: inputs.iter().map(|i| i.mask.count()).sum(),
            contexts_used: teacher.iter().map(|t| t.usable.len()).sum(),
            samples_without_context: batch.len() - with_context,
            teacher_entropy,
            teacher_entropy_min,
            lr,
            momentum,
        };
        self.step += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Result<Container> {
        let header = serde_json::json!({
            "format": "evpretrain-checkpoint",
            "kind": "pretrain",
            "step": self.step,
            "optimizer_step": self.optimizer.step,
            "config": serde_json::to_value(&self.config)?,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let mut c = Container::new(header);
        let p = &self.pair;
        for (name, t) in p.student.names.iter().zip(&p.student.tensors) {
            c.push(format!("student.{name}"), t);
        }
        for (name, t) in p.teacher.names.iter().zip(&p.teacher.tensors) {
            c.push(format!("teacher.{name}"), t);
        }
        c.push("center.patch", &p.centers.patch);
        c.push("center.context", &p.centers.context);
        c.push("center.image", &p.centers.image);
        for (i, name) in p.student.names.iter().enumerate() {
            c.push(format!("optim.m.{name}"), &self.optimizer.first_moment[i]);
            c.push(format!("optim.v.{name}"), &self.optimizer.second_moment[i]);
        }
        c.rng = encode_state(&self.rng);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        let config = checkpoint_config(c)?;
        let mut trainer = Self::new(config)?;
        let load = |prefix: &str, set: &mut ParamSet<T>| -> Result<()> {
            for (name, t) in set.names.iter().zip(set.tensors.iter_mut()) {
                let stored = c.require::<T>(&format!("{prefix}{name}"))?;
                if stored.shape() != t.shape() {
                    return Err(Error::invalid(format!("checkpoint tensor {prefix}{name} has shape {:?}", stored.shape())));
                }
                *t = stored;
            }
            Ok(())
        };
        load("student.", &mut trainer.pair.student)?;
        load("teacher.", &mut trainer.pair.teacher)?;
        trainer.pair.centers = Centers {
            patch: c.require("center.patch")?,
            context: c.require("center.context")?,
            image: c.require("center.image")?,
        };
        for (i, name) in trainer.pair.student.names.iter().enumerate() {
            trainer.optimizer.first_moment[i] = c.require(&format!("optim.m.{name}"))?;
            trainer.optimizer.second_moment[i] = c.require(&format!("optim.v.{name}"))?;
        }
        trainer.step = header_u64(c, "step")?;
        trainer.optimizer.step = header_u64(c, "optimizer_step")?;
        trainer.rng = decode_state(&c.rng)?;
        Ok(trainer)
    }
}

fn header_u64(c: &Container, key: &str) -> Result<u64> {
    c.header
        .get(key)
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::invalid(format!("checkpoint header lacks {key:?}")))
}

pub fn checkpoint_config(c: &Container) -> Result<TrainConfig> {
    let v = c
        .header
        .get("config")
        .ok_or_else(|| Error::invalid("checkpoint header lacks \"config\""))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Teacher (or student) parameters and layout stored in a checkpoint.
pub fn load_backbone<T: Scalar>(c: &Container, role: &str) -> Result<(Architecture, ParamSet<T>)> {
    let config = checkpoint_config(c)?;
    let (arch, mut params) = Architecture::init::<T>(&config.model, 0)?;
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        *t = c.require(&format!("{role}.{name}"))?;
    }
    Ok((arch, params))
}

/// Voxelized, standardized event images of one split.
pub fn load_event_images(manifest: &DatasetManifest, split: Split, model: &ModelConfig) -> Result<Vec<EventImage>> {
    let records: Vec<_> = manifest.split(split).collect();
    records
        .par_iter()
        .map(|(_, r)| {
            if (r.width as usize, r.height as usize) != (model.image_width, model.image_height) {
                return Err(Error::Config(format!(
                    "sample {} is {}x{}, model expects {}x{}",
                    r.events, r.width, r.height, model.image_width, model.image_height
                )));
            }
            let stream = read_events(manifest.resolve(&r.events))?;
            Ok(to_event_image(&voxelize(&stream, model.channels)?))
        })
        .collect()
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path`, writing the header when the file is new or empty.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let existing = append && std::fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !existing {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        writeln!(self.file, "{}", report.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
}

/// Runs the remaining steps of `trainer`, writing metrics and checkpoints to `out_dir`.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &[EventImage],
    out_dir: impl AsRef<Path>,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainSummary> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = MetricsLog::open(out_dir.join("metrics.csv"), trainer.step > 0)?;
    let mut reports = Vec::new();
    while trainer.step < trainer.config.steps {
        let report = trainer.train_step(data)?;
        log.append(&report)?;
        on_step(&report);
        reports.push(report);
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.config.steps {
            trainer
                .to_checkpoint()?
                .save(out_dir.join(format!("checkpoint_{:06}.eckp", trainer.step)))?;
        }
    }
    let final_checkpoint = out_dir.join("final.eckp");
    trainer.to_checkpoint()?.save(&final_checkpoint)?;
    Ok(TrainSummary {
        reports,
        final_checkpoint,
    })
}
