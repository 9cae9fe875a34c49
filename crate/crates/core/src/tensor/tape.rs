use std::collections::BTreeMap;

use super::kernels;
use super::{axis_extents, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean { x: Var, axis: usize },
    Softmax { x: Var, axis: usize, temperature: T },
    LogSoftmax { x: Var, axis: usize, temperature: T },
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Log(Var),
    L2NormRows { x: Var, norms: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    MaskRows { x: Var, token: Var, mask: Vec<bool> },
    CrossEntropy {
        student: Var,
        target: Tensor<T>,
        probs: Tensor<T>,
        temperature: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulRow(a, b) => vec![*a, *b],
            Transpose(x) | Scale(x, _) | Sum(x) | Gelu(x) | Log(x) | Reshape(x) => vec![*x],
            Mean { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | LayerNorm { x, .. }
            | L2NormRows { x, .. }
            | Narrow { x, .. }
            | GatherRows { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            MaskRows { x, token, .. } => vec![*x, *token],
            CrossEntropy { student, .. } => vec![*student],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.leaves.contains_key(&v)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.leaves.iter().map(|(v, g)| (*v, g))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis<T: Scalar>(op: &'static str, t: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_temperature<T: Scalar>(temperature: T) -> Result<()> {
    if temperature <= T::zero() || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b` for rank-2 `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul_t", av, 2)?;
        expect_rank("matmul_t", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        if bv.shape()[1] != k {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul_t", Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("transpose", xv, 2)?;
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let out = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        self.push("transpose", out, Op::Transpose(x))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let out = Tensor::from_fn(av.shape(), |i| f(av.data()[i], bv.data()[i]));
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_operand(&self, name: &'static str, x: Var, row: Var) -> Result<usize> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rank() != 1 || xv.rank() == 0 || rv.len() != xv.cols() {
            return Err(Error::shape(
                name,
                format!("{:?} with row {:?}", xv.shape(), rv.shape()),
            ));
        }
        Ok(rv.len())
    }

    /// Adds a length-`n` vector to every trailing-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_operand("add_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + rv.data()[i % n]);
        self.push("add_row", out, Op::AddRow(x, row))
    }

    /// Multiplies every trailing-axis slice of `x` by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_operand("mul_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * rv.data()[i % n]);
        self.push("mul_row", out, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("mean", xv, axis)?;
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let inv = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv.data()[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        self.push("mean", Tensor::new(shape, out)?, Op::Mean { x, axis })
    }

    pub fn softmax(&mut self, x: Var, axis: usize, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let xv = self.value(x);
        check_axis("softmax", xv, axis)?;
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let mut out = xv.clone();
        kernels::softmax_axis(out.data_mut(), outer, len, inner, temperature);
        self.push(
            "softmax",
            out,
            Op::Softmax {
                x,
                axis,
                temperature,
            },
        )
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let xv = self.value(x);
        check_axis("log_softmax", xv, axis)?;
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let mut out = xv.clone();
        kernels::log_softmax_axis(out.data_mut(), outer, len, inner, temperature);
        self.push(
            "log_softmax",
            out,
            Op::LogSoftmax {
                x,
                axis,
                temperature,
            },
        )
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("layer_norm", "scalar input"));
        }
        let cols = xv.cols();
        let inv_n = T::one() / T::lit(cols as f64);
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        self.push("log", out, Op::Log(x))
    }

    /// Scales each trailing-axis slice to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("l2_normalize_rows", "scalar input"));
        }
        let cols = xv.cols();
        let floor = T::lit(1e-12);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let n = kernels::dot(row, row).sqrt().max(floor);
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        self.push("l2_normalize_rows", out, Op::L2NormRows { x, norms })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("narrow", xv, axis)?;
        if start + len > xv.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) exceeds {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, full, inner) = axis_extents(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.push(
            "narrow",
            Tensor::new(shape, out)?,
            Op::Narrow { x, axis, start },
        )
    }

    /// Selects slices along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let rows = xv.shape()[0];
        let stride = xv.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * stride);
        for &i in index {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        self.push(
            "gather_rows",
            Tensor::new(shape, out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }

    /// Replaces rows of `x: [n, d]` flagged in `mask` with `token: [d]`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        expect_rank("mask_rows", xv, 2)?;
        if mask.len() != xv.shape()[0] || tv.rank() != 1 || tv.len() != xv.shape()[1] {
            return Err(Error::shape(
                "mask_rows",
                format!(
                    "x {:?}, token {:?}, mask len {}",
                    xv.shape(),
                    tv.shape(),
                    mask.len()
                ),
            ));
        }
        let d = tv.len();
        let mut out = xv.clone();
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(tv.data());
        }
        self.push(
            "mask_rows",
            out,
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
        )
    }

    /// Per-row cross-entropy `-⟨target, log softmax(student / τ)⟩`.
    ///
    /// `target` is a constant distribution (no gradient flows into it). Rank-1
    /// inputs are treated as a single row. Returns a `[rows]` vector.
    pub fn cross_entropy(&mut self, target: &Tensor<T>, student: Var, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let sv = self.value(student);
        if sv.rank() == 0 || sv.len() != target.len() || sv.cols() != target.cols() {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {:?} vs student {:?}", target.shape(), sv.shape()),
            ));
        }
        if !target.all_finite() {
            return Err(Error::NonFinite {
                op: "cross_entropy",
            });
        }
        let cols = sv.cols();
        let rows = sv.rows();
        let mut logp = sv.clone();
        kernels::log_softmax_axis(logp.data_mut(), rows, cols, 1, temperature);
        let ce: Vec<T> = (0..rows)
            .map(|r| -kernels::dot(target.row(r), logp.row(r)))
            .collect();
        let probs = logp.map(|v| v.exp());
        self.push(
            "cross_entropy",
            Tensor::new(vec![rows], ce)?,
            Op::CrossEntropy {
                student,
                target: target.clone(),
                probs,
                temperature,
            },
        )
    }

    /// Scalar cross-entropy between two embedding vectors, teacher side constant.
    pub fn cross_entropy_distr(
        &mut self,
        teacher: &Tensor<T>,
        student: Var,
        teacher_temperature: T,
        student_temperature: T,
    ) -> Result<Var> {
        let target = super::teacher_distribution(teacher, None, teacher_temperature)?;
        let ce = self.cross_entropy(&target, student, student_temperature)?;
        self.sum(ce)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut leaves = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, g, &mut grads, &mut leaves, id);
        }
        // Unreached trainable leaves get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves
                    .entry(Var(id))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        leaves: &mut BTreeMap<Var, Tensor<T>>,
        id: usize,
    ) {
        let val = |v: &Var| self.value(*v);
        match op {
            Op::Leaf => {
                leaves.insert(Var(id), g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db).unwrap());
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let d = g.data();
                let back = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
                self.accumulate(grads, *x, back);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * bv.data()[i]);
                let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * av.data()[i]);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, row) => {
                let n = val(row).len();
                let mut gr = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (acc, v) in gr.iter_mut().zip(chunk) {
                        *acc = *acc + *v;
                    }
                }
                self.accumulate(grads, *row, Tensor::from_vec(gr));
                self.accumulate(grads, *x, g);
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(x), val(row));
                let n = rv.len();
                let mut gr = vec![T::zero(); n];
                for (gc, xc) in g.data().chunks(n).zip(xv.data().chunks(n)) {
                    for j in 0..n {
                        gr[j] = gr[j] + gc[j] * xc[j];
                    }
                }
                let gx = Tensor::from_fn(g.shape(), |i| g.data()[i] * rv.data()[i % n]);
                self.accumulate(grads, *row, Tensor::from_vec(gr));
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(val(x).shape(), s));
            }
            Op::Mean { x, axis } => {
                let xv = val(x);
                let (outer, len, inner) = axis_extents(xv.shape(), *axis);
                let inv = T::one() / T::lit(len as f64);
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    let o = i / (len * inner);
                    let ii = i % inner;
                    g.data()[o * inner + ii] * inv
                });
                debug_assert_eq!(gx.len(), outer * len * inner);
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax {
                x,
                axis,
                temperature,
            } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let inv_t = T::one() / *temperature;
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: T = (0..len).map(|j| g.data()[at(j)] * out.data()[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = out.data()[at(j)] * (g.data()[at(j)] - s) * inv_t;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::LogSoftmax {
                x,
                axis,
                temperature,
            } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let inv_t = T::one() / *temperature;
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: T = (0..len).map(|j| g.data()[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = (g.data()[at(j)] - out.data()[at(j)].exp() * s) * inv_t;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm { x, rstd } => {
                let cols = out.cols();
                let inv_n = T::one() / T::lit(cols as f64);
                let mut gx = vec![T::zero(); out.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let dy = &g.data()[r * cols..(r + 1) * cols];
                    let mean_dy = dy.iter().copied().sum::<T>() * inv_n;
                    let mean_dyy = kernels::dot(dy, y) * inv_n;
                    for j in 0..cols {
                        gx[r * cols + j] = rs * (dy[j] - mean_dy - y[j] * mean_dyy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::Gelu(x) => {
                let xv = val(x);
                let gx =
                    Tensor::from_fn(xv.shape(), |i| g.data()[i] * kernels::gelu_grad(xv.data()[i]));
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let xv = val(x);
                let gx = Tensor::from_fn(xv.shape(), |i| g.data()[i] / xv.data()[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::L2NormRows { x, norms } => {
                let cols = out.cols();
                let mut gx = vec![T::zero(); out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let dy = &g.data()[r * cols..(r + 1) * cols];
                    let proj = kernels::dot(dy, y);
                    for j in 0..cols {
                        gx[r * cols + j] = (dy[j] - y[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let shape = val(v).shape().to_vec();
                    let len = shape[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, *v, Tensor::new(shape, part).unwrap());
                }
            }
            Op::Narrow { x, axis, start } => {
                let xv = val(x);
                let (outer, full, inner) = axis_extents(xv.shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::GatherRows { x, index } => {
                let xv = val(x);
                let stride = xv.len() / xv.shape()[0].max(1);
                let mut gx = vec![T::zero(); xv.len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..stride {
                        gx[i * stride + j] = gx[i * stride + j] + g.data()[k * stride + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = val(x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape).unwrap());
            }
            Op::MaskRows { x, token, mask } => {
                let d = val(token).len();
                let mut gt = vec![T::zero(); d];
                let mut gx = g.clone();
                for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                    let row = &mut gx.data_mut()[i * d..(i + 1) * d];
                    for (acc, v) in gt.iter_mut().zip(row.iter_mut()) {
                        *acc = *acc + *v;
                        *v = T::zero();
                    }
                }
                self.accumulate(grads, *token, Tensor::from_vec(gt));
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                student,
                target,
                probs,
                temperature,
            } => {
                let cols = probs.cols();
                let inv_t = T::one() / *temperature;
                let shape = val(student).shape().to_vec();
                let mut gs = vec![T::zero(); probs.len()];
                for r in 0..probs.rows() {
                    let p = target.row(r);
                    let q = probs.row(r);
                    let mass: T = p.iter().copied().sum();
                    let gr = g.data()[r];
                    for j in 0..cols {
                        gs[r * cols + j] = gr * (q[j] * mass - p[j]) * inv_t;
                    }
                }
                self.accumulate(grads, *student, Tensor::new(shape, gs).unwrap());
            }
        }
    }
}
