//! Tiny ViT backbone, projection heads, attention pooling and the EMA
//! student/teacher pairing.
//!
//! Parameters live in a flat [`ParamSet`] addressed by index; the layout
//! structs ([`Architecture`] and friends) only hold indices, so the same
//! layout drives student and teacher. Forward passes bind a parameter set
//! onto a [`Tape`] and run there.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::{teacher_distribution, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch: 8,
            channels: 5,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 256,
            bottleneck: 64,
            prototypes: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return bad("patch size must divide the image size");
        }
        if self.channels == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 || self.bottleneck == 0 || self.prototypes < 2 {
            return bad("head sizes must be positive and prototypes >= 2");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub decay: Vec<bool>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Pushes every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
        }
    }
}

struct Builder<'r, R> {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
    decay: Vec<bool>,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor<f64>, decay: bool) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.decay.push(decay);
        self.tensors.len() - 1
    }

    /// Normal(0, std) truncated at two standard deviations.
    fn trunc_normal(&mut self, name: String, shape: &[usize], std: f64, decay: bool) -> usize {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= 2.0 {
                data.push(v * std);
            }
        }
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.push(name, t, decay)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value), false)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
        Linear {
            w: self.trunc_normal(format!("{prefix}.w"), &[fan_in, fan_out], std, true),
            b: self.constant(format!("{prefix}.b"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{prefix}.gain"), &[dim], 1.0),
            bias: self.constant(format!("{prefix}.bias"), &[dim], 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_row(y, p[self.b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, T::lit(LN_EPS))?;
        let y = tape.mul_row(y, p[self.gain])?;
        tape.add_row(y, p[self.bias])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, dim: usize, heads: usize) -> Result<Var> {
        let dh = dim / heads;
        let h = self.norm1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = tape.narrow(qkv, 1, head * dh, dh)?;
            let k = tape.narrow(qkv, 1, dim + head * dh, dh)?;
            let v = tape.narrow(qkv, 1, 2 * dim + head * dh, dh)?;
            let scores = tape.matmul_t(q, k)?;
            let attn = tape.softmax(scores, 1, T::lit((dh as f64).sqrt()))?;
            outs.push(tape.matmul(attn, v)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let a = self.proj.forward(tape, p, merged)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Patch embedding, positions, [MASK] token, pre-norm blocks, final norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTBackbone {
    pub patch_embed: Linear,
    pub pos: usize,
    pub mask_token: usize,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

/// `D → D_h → D_h → bottleneck`, L2-normalized, against row-normalized prototypes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub prototypes: usize,
}

impl ProjectionHead {
    /// Prototype logits `[rows, d]` (cosine similarities) for features `[rows, D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc3.forward(tape, p, h)?;
        let h = tape.l2_normalize_rows(h)?;
        let protos = tape.l2_normalize_rows(p[self.prototypes])?;
        tape.matmul_t(h, protos)
    }
}

/// Single learned query attending over a feature set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPool {
    pub query: usize,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl AttentionPool {
    /// Pools `features[members]` into one `[1, D]` embedding. `keys` and
    /// `values` are the precomputed projections of all features.
    pub fn pool_projected<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        keys: Var,
        values: Var,
        members: &[usize],
    ) -> Result<Var> {
        if members.is_empty() {
            return Err(Error::invalid("attention pool over an empty feature set"));
        }
        let dim = tape.shape(keys)[1];
        let k = tape.gather_rows(keys, members)?;
        let v = tape.gather_rows(values, members)?;
        let scores = tape.matmul_t(p[self.query], k)?;
        let weights = tape.softmax(scores, 1, T::lit((dim as f64).sqrt()))?;
        let pooled = tape.matmul(weights, v)?;
        self.out.forward(tape, p, pooled)
    }

    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], features: Var) -> Result<(Var, Var)> {
        Ok((self.key.forward(tape, p, features)?, self.value.forward(tape, p, features)?))
    }

    /// Pools every row of `features`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], features: Var) -> Result<Var> {
        let n = tape.shape(features)[0];
        let (k, v) = self.project(tape, p, features)?;
        let all: Vec<usize> = (0..n).collect();
        self.pool_projected(tape, p, k, v, &all)
    }
}

/// Index layout shared by student and teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub backbone: ViTBackbone,
    pub patch_head: ProjectionHead,
    pub image_head: ProjectionHead,
    pub context_head: ProjectionHead,
    pub pool: AttentionPool,
}

impl Architecture {
    /// Builds the layout and a freshly initialized parameter set.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            rng: &mut rng,
        };
        let (d, n) = (config.dim, config.num_patches());
        let std = 0.02;
        let patch_std = 1.0 / (config.patch_dim() as f64).sqrt();
        let patch_embed = b.linear("backbone.patch_embed", config.patch_dim(), d, patch_std);
        let pos = b.trunc_normal("backbone.pos".into(), &[n, d], std, false);
        let mask_token = b.trunc_normal("backbone.mask_token".into(), &[d], std, false);
        let blocks = (0..config.depth)
            .map(|i| {
                let pre = format!("backbone.blocks.{i}");
                Block {
                    norm1: b.norm(&format!("{pre}.norm1"), d),
                    qkv: b.linear(&format!("{pre}.attn.qkv"), d, 3 * d, std),
                    proj: b.linear(&format!("{pre}.attn.proj"), d, d, std),
                    norm2: b.norm(&format!("{pre}.norm2"), d),
                    fc1: b.linear(&format!("{pre}.mlp.fc1"), d, config.mlp_ratio * d, std),
                    fc2: b.linear(&format!("{pre}.mlp.fc2"), config.mlp_ratio * d, d, std),
                }
            })
            .collect();
        let norm = b.norm("backbone.norm", d);
        let mut head = |role: &str| {
            let pre = format!("heads.{role}");
            ProjectionHead {
                fc1: b.linear(&format!("{pre}.fc1"), d, config.head_hidden, std),
                fc2: b.linear(&format!("{pre}.fc2"), config.head_hidden, config.head_hidden, std),
                fc3: b.linear(&format!("{pre}.fc3"), config.head_hidden, config.bottleneck, std),
                prototypes: b.trunc_normal(
                    format!("{pre}.prototypes"),
                    &[config.prototypes, config.bottleneck],
                    std,
                    true,
                ),
            }
        };
        let patch_head = head("patch");
        let image_head = head("image");
        let context_head = head("context");
        let pool = AttentionPool {
            query: b.trunc_normal("pool.query".into(), &[1, d], std, false),
            key: b.linear("pool.key", d, d, std),
            value: b.linear("pool.value", d, d, std),
            out: b.linear("pool.out", d, d, std),
        };
        let params = ParamSet {
            names: b.names,
            tensors: b.tensors.iter().map(Tensor::cast).collect(),
            decay: b.decay,
        };
        let arch = Self {
            config: config.clone(),
            backbone: ViTBackbone {
                patch_embed,
                pos,
                mask_token,
                blocks,
                norm,
            },
            patch_head,
            image_head,
            context_head,
            pool,
        };
        Ok((arch, params))
    }

    /// Patch features `[N, D]` for pixels `[N, P²·C]`; masked rows are replaced
    /// by the [MASK] embedding before positions are added.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        patches: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let n = self.config.num_patches();
        let shape = tape.shape(patches);
        if shape != [n, self.config.patch_dim()] {
            return Err(Error::shape(
                "encode",
                format!("patches {:?}, expected [{n}, {}]", shape, self.config.patch_dim()),
            ));
        }
        let bb = &self.backbone;
        let mut x = bb.patch_embed.forward(tape, p, patches)?;
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(Error::shape(
                    "encode",
                    format!("mask length {} for {n} patches", mask.len()),
                ));
            }
            if mask.iter().any(|m| *m) {
                x = tape.mask_rows(x, p[bb.mask_token], mask)?;
            }
        }
        x = tape.add(x, p[bb.pos])?;
        for block in &bb.blocks {
            x = block.forward(tape, p, x, self.config.dim, self.config.heads)?;
        }
        bb.norm.forward(tape, p, x)
    }

    /// Mean over patches, `[N, D] → [1, D]`.
    pub fn mean_pool<T: Scalar>(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let d = tape.shape(features)[1];
        let m = tape.mean(features, 0)?;
        tape.reshape(m, &[1, d])
    }
}

/// Centres subtracted from teacher logits, one per head role.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers<T> {
    pub patch: Tensor<T>,
    pub context: Tensor<T>,
    pub image: Tensor<T>,
}

impl<T: Scalar> Centers<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            patch: Tensor::zeros(&[d]),
            context: Tensor::zeros(&[d]),
            image: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacherPair<T> {
    pub arch: Architecture,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub centers: Centers<T>,
}

impl<T: Scalar> StudentTeacherPair<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (arch, student) = Architecture::init(config, seed)?;
        Ok(Self {
            centers: Centers::zeros(config.prototypes),
            teacher: student.clone(),
            arch,
            student,
        })
    }

    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, momentum)
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for every tensor.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::shape("ema_update", "teacher and student layouts differ"));
    }
    let m = T::lit(momentum);
    let one_minus = T::lit(1.0 - momentum);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + one_minus * sv;
        }
    }
    Ok(())
}

/// `center ← rate·center + (1−rate)·mean_rows(logits)`.
pub fn teacher_center_update<T: Scalar>(center: &mut Tensor<T>, logits: &[&Tensor<T>], rate: f64) -> Result<()> {
    let d = center.len();
    let mut sum = vec![0.0f64; d];
    let mut rows = 0usize;
    for l in logits {
        if l.cols() != d {
            return Err(Error::shape(
                "teacher_center_update",
                format!("logits {:?} vs center [{d}]", l.shape()),
            ));
        }
        for r in 0..l.rows() {
            for (s, v) in sum.iter_mut().zip(l.row(r)) {
                *s += v.to_f64().unwrap_or(f64::NAN);
            }
        }
        rows += l.rows();
    }
    if rows == 0 {
        return Ok(());
    }
    let r = T::lit(rate);
    let one_minus = T::lit(1.0 - rate);
    for (c, s) in center.data_mut().iter_mut().zip(sum) {
        *c = r * *c + one_minus * T::lit(s / rows as f64);
    }
    Ok(())
}

/// Teacher target distribution with optional centering.
pub fn teacher_targets<T: Scalar>(logits: &Tensor<T>, center: Option<&Tensor<T>>, temperature: f64) -> Result<Tensor<T>> {
    teacher_distribution(logits, center, T::lit(temperature))
}
