//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every primitive appends one node whose inputs were
//! all created earlier, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Leaves are either
//! constants (no gradient is accumulated for them, though gradients still
//! flow *through* the ops that consume them) or named parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(F, F)>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(F, F)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Silu(Var),
    Gelu(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MaxNormalizeLast(Var),
    MaskKeys {
        x: Var,
        mask: Arc<Vec<F>>,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Upsample2x(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Silu(..) => "silu",
            Op::Gelu(..) => "gelu",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaxNormalizeLast(..) => "max_normalize_last",
            Op::MaskKeys { .. } => "mask_keys",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Upsample2x(..) => "upsample2x",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Silu(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MaxNormalizeLast(x)
            | Op::Upsample2x(x)
            | Op::Softmax(x) => vec![*x],
            Op::Permute { x, .. } | Op::Narrow { x, .. } | Op::MaskKeys { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::AddChannelBias { x, bias } => vec![*x, *bias],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Recording graph (tape) for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, Var)>,
}

/// Leading-batch broadcast: the shorter shape must be a suffix of the longer.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, a, b));
    }
    Ok(long.to_vec())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<F: Element>(data: &[F], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<F>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Sums a tensor of shape `long` down to its trailing `short` extents.
fn reduce_leading<F: Element>(g: &[F], short_len: usize) -> Vec<F> {
    let mut out = vec![F::zero(); short_len];
    for chunk in g.chunks(short_len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

fn accumulate<F: Element>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the primitive that produced `v` (tape introspection).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Inputs of the primitive that produced `v`.
    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registered trainable leaves, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    /// Lifts `t` as a parameter when `trainable`, otherwise as a constant.
    pub fn leaf(&mut self, name: &str, t: &Tensor<F>, trainable: bool) -> Var {
        if trainable {
            self.param(name, t)
        } else {
            self.constant(t)
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        make: impl FnOnce(Var, Var) -> Op<F>,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shape(op, &sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<F> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if da.len() > db.len() {
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % db.len()])).collect()
        } else {
            db.iter().enumerate().map(|(i, &y)| f(da[i % da.len()], y)).collect()
        };
        Ok(self.push(Tensor::from_parts(shape, out), make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x * kernels::sigmoid(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| kernels::gelu(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::Gelu(a))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != kb || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shape(op, &sa, &sb));
        }
        let batch_dims = if ba.len() >= bb.len() { ba } else { bb };
        let batch: usize = batch_dims.iter().product();
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);

        let (da, db) = (self.value(a).data(), self.value(b).data());
        let a_step = if ba.is_empty() { 0 } else { m * k };
        let b_step = if bb.is_empty() { 0 } else { k * n };
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![F::zero(); batch * m * n];
        for (i, dst) in out.chunks_mut(m * n).enumerate() {
            F::gemm(
                m,
                k,
                n,
                &da[i * a_step..],
                (k as isize, 1),
                &db[i * b_step..],
                b_strides,
                dst,
                false,
            );
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }))
    }

    /// `a [.., M, K] · b [.., K, N]`; batch extents equal or absent on one side.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [.., M, K] · b[.., N, K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Numerically stabilized softmax over the trailing extent.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the trailing extent where `key_mask [B, N]` (row-major,
    /// `B` = leading extent of `x`) drops masked keys. Dropped entries are zero.
    pub fn softmax_last_masked(&mut self, x: Var, key_mask: Arc<Vec<bool>>) -> Result<Var> {
        self.softmax_impl(x, Some(key_mask))
    }

    fn softmax_impl(&mut self, x: Var, key_mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax of a rank-0 tensor"))?;
        let rows = self.value(x).numel() / n;
        let batch = shape[0];
        if let Some(mask) = &key_mask {
            if shape.len() < 2 || mask.len() != batch * n {
                return Err(Error::shape("softmax_last_masked", &shape, &[mask.len()]));
            }
        }
        let rows_per_batch = rows / batch;
        let mut out = vec![F::zero(); rows * n];
        kernels::softmax_rows(
            self.value(x).data(),
            n,
            |r, c| match &key_mask {
                Some(m) => m[(r / rows_per_batch) * n + c],
                None => true,
            },
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x)))
    }

    /// Layer normalization over the trailing extent with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm of rank-0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); xd.len()];
        let mut stats = Vec::with_capacity(xd.len() / d);
        for (row, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = kernels::moments(row.iter().copied(), d, F::of(eps));
            for (i, o) in dst.iter_mut().enumerate() {
                *o = (row[i] - mean) * rstd * gd[i] + bd[i];
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, stats }))
    }

    /// Group normalization of `x [B, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("group_norm", &shape, &[groups]));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", &shape, self.shape(gamma)));
        }
        let cpg = c / groups;
        let glen = cpg * h * w;
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); xd.len()];
        let mut stats = Vec::with_capacity(b * groups);
        for (gi, (src, dst)) in xd.chunks(glen).zip(out.chunks_mut(glen)).enumerate() {
            let (mean, rstd) = kernels::moments(src.iter().copied(), glen, F::of(eps));
            let c0 = (gi % groups) * cpg;
            for (j, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
                let ch = c0 + j / (h * w);
                *o = (v - mean) * rstd * gd[ch] + bd[ch];
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    /// Cross-correlation of `x [B,C,H,W]` with `w [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw().ok_or_else(|| {
            Error::invalid(format!(
                "conv2d: kernel {sw:?} with stride {stride}, pad {pad} gives a non-integral output for input {sx:?}"
            ))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            sx[0],
            &geom,
            self.value(w).data(),
            sw[0],
            bias.map(|b| self.value(b).data()),
        );
        Ok(self.push(
            Tensor::from_parts(vec![sx[0], sw[0], ho, wo], out),
            Op::Conv2d { x, w, bias, geom },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// General axis permutation (materialized).
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &shape, axes));
        }
        let (out_shape, out) = permute_data(self.value(x).data(), &shape, axes);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, axes: axes.to_vec() },
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Narrow { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(F::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(F::zero(), |acc, &v| acc + v);
        let m = s / F::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Divides every trailing row by its maximum.
    pub fn max_normalize_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("max_normalize_last of rank-0"))?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            if m <= F::zero() {
                return Err(Error::invalid("max_normalize_last needs a positive row maximum"));
            }
            out.extend(row.iter().map(|&v| v / m));
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxNormalizeLast(x)))
    }

    /// Multiplies `x [B, .., N]` by a constant per-batch key mask `[B, N]`.
    pub fn mask_keys(&mut self, x: Var, mask: Arc<Vec<F>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || mask.len() != shape[0] * n {
            return Err(Error::shape("mask_keys", &shape, &[mask.len()]));
        }
        let per_batch = self.value(x).numel() / shape[0];
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[(i / per_batch) * n + i % n])
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskKeys { x, mask }))
    }

    /// `x [B,C,H,W] + bias [B,C]` broadcast over the spatial extents.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(bias) != [shape[0], shape[1]] {
            return Err(Error::shape("add_channel_bias", &shape, self.shape(bias)));
        }
        let hw = shape[2] * shape[3];
        let bd = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / hw])
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddChannelBias { x, bias }))
    }

    /// Nearest-neighbour 2× upsampling of `x [B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("upsample2x", &shape, &[4]));
        }
        let (h, w) = (shape[2], shape[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![shape[0], shape[1], 2 * h, 2 * w], out),
            Op::Upsample2x(x),
        ))
    }

    /// One reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of every registered parameter, summed per name.
    pub fn param_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        let mut out: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads.wrt(*v);
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                for (v, sign) in [(*a, false), (*b, neg)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let len = self.value(v).numel();
                    let mut d = if len == gd.len() {
                        gd.to_vec()
                    } else {
                        reduce_leading(gd, len)
                    };
                    if sign {
                        d.iter_mut().for_each(|x| *x = -*x);
                    }
                    accumulate(grads, v, Tensor::from_parts(self.shape(v).to_vec(), d));
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let od = self.value(other).data();
                    let prod: Vec<F> = gd.iter().enumerate().map(|(i, &x)| x * od[i % od.len()]).collect();
                    let len = self.value(v).numel();
                    let d = if len == prod.len() {
                        prod
                    } else {
                        reduce_leading(&prod, len)
                    };
                    accumulate(grads, v, Tensor::from_parts(self.shape(v).to_vec(), d));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let d = gd.iter().map(|&x| x * *c).collect();
                    accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Silu(a) => {
                if self.wants(*a) {
                    let xd = self.value(*a).data();
                    let d = gd
                        .iter()
                        .zip(xd)
                        .map(|(&gy, &x)| {
                            let s = kernels::sigmoid(x);
                            gy * s * (F::one() + x * (F::one() - s))
                        })
                        .collect();
                    accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xd = self.value(*a).data();
                    let d = gd.iter().zip(xd).map(|(&gy, &x)| gy * kernels::gelu_grad(x)).collect();
                    accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, g, grads),
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = *g.shape().last().unwrap();
                    let mut d = vec![F::zero(); gd.len()];
                    kernels::softmax_rows_backward(node.value.data(), gd, n, &mut d);
                    accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let d = *g.shape().last().unwrap();
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let nf = F::of(d as f64);
                for (r, ((row, grow), dxr)) in xd.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let (mean, rstd) = stats[r];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for i in 0..d {
                        let xhat = (row[i] - mean) * rstd;
                        let dxhat = grow[i] * gam[i];
                        s1 = s1 + dxhat;
                        s2 = s2 + dxhat * xhat;
                        dgamma[i] = dgamma[i] + grow[i] * xhat;
                        dbeta[i] = dbeta[i] + grow[i];
                    }
                    for i in 0..d {
                        let xhat = (row[i] - mean) * rstd;
                        let dxhat = grow[i] * gam[i];
                        dxr[i] = rstd * (dxhat - s1 / nf - xhat * s2 / nf);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_parts(vec![d], dgamma));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::from_parts(vec![d], dbeta));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let shape = g.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let cpg = c / groups;
                let glen = cpg * hw;
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let nf = F::of(glen as f64);
                for (gi, ((src, grow), dxr)) in xd
                    .chunks(glen)
                    .zip(gd.chunks(glen))
                    .zip(dx.chunks_mut(glen))
                    .enumerate()
                {
                    let (mean, rstd) = stats[gi];
                    let c0 = (gi % groups) * cpg;
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..glen {
                        let ch = c0 + j / hw;
                        let xhat = (src[j] - mean) * rstd;
                        let dxhat = grow[j] * gam[ch];
                        s1 = s1 + dxhat;
                        s2 = s2 + dxhat * xhat;
                        dgamma[ch] = dgamma[ch] + grow[j] * xhat;
                        dbeta[ch] = dbeta[ch] + grow[j];
                    }
                    for j in 0..glen {
                        let ch = c0 + j / hw;
                        let xhat = (src[j] - mean) * rstd;
                        let dxhat = grow[j] * gam[ch];
                        dxr[j] = rstd * (dxhat - s1 / nf - xhat * s2 / nf);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), dx));
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let sw = self.shape(*w).to_vec();
                let batch = self.shape(*x)[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    batch,
                    geom,
                    self.value(*w).data(),
                    sw[0],
                    gd,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::from_parts(sw.clone(), dw));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let npos = g.shape()[2] * g.shape()[3];
                    let mut db = vec![F::zero(); sw[0]];
                    for (i, chunk) in gd.chunks(npos).enumerate() {
                        let o = i % sw[0];
                        db[o] = chunk.iter().fold(db[o], |acc, &v| acc + v);
                    }
                    accumulate(grads, b, Tensor::from_parts(vec![sw[0]], db));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.reshape(self.shape(*x))?);
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let (shape, d) = permute_data(gd, g.shape(), &inv);
                    accumulate(grads, *x, Tensor::from_parts(shape, d));
                }
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(grads, *p, Tensor::from_parts(self.shape(*p).to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = g.shape()[*axis] * inner;
                    let mut d = vec![F::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        let base = (o * xs[*axis] + start) * inner;
                        d[base..base + len].copy_from_slice(&gd[o * len..(o + 1) * len]);
                    }
                    accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), d));
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let t = self.value(*x);
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        F::one() / F::of(t.numel() as f64)
                    } else {
                        F::one()
                    };
                    accumulate(grads, *x, Tensor::full(t.shape(), gd[0] * scale));
                }
            }
            Op::MaxNormalizeLast(x) => {
                if self.wants(*x) {
                    let n = *g.shape().last().unwrap();
                    let xd = self.value(*x).data();
                    let mut d = vec![F::zero(); xd.len()];
                    for ((row, grow), dr) in xd.chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)) {
                        let mut arg = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > row[arg] {
                                arg = i;
                            }
                        }
                        let m = row[arg];
                        let mut dot = F::zero();
                        for (i, (&v, &gy)) in row.iter().zip(grow).enumerate() {
                            dr[i] = gy / m;
                            dot = dot + gy * v;
                        }
                        dr[arg] = dr[arg] - dot / (m * m);
                    }
                    accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::MaskKeys { x, mask } => {
                if self.wants(*x) {
                    let shape = g.shape();
                    let n = *shape.last().unwrap();
                    let per_batch = gd.len() / shape[0];
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * mask[(i / per_batch) * n + i % n])
                        .collect();
                    accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), d));
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let hw = g.shape()[2] * g.shape()[3];
                    let d = gd
                        .chunks(hw)
                        .map(|c| c.iter().fold(F::zero(), |acc, &v| acc + v))
                        .collect();
                    accumulate(grads, *bias, Tensor::from_parts(self.shape(*bias).to_vec(), d));
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let mut d = vec![F::zero(); self.value(*x).numel()];
                    for (plane, dst) in gd.chunks(4 * h * w).zip(d.chunks_mut(h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let o = (y / 2) * w + xx / 2;
                                dst[o] = dst[o] + plane[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_parts(xs, d));
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(&self, a: Var, b: Var, trans_b: bool, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = *g.shape().last().unwrap();
        let a_batched = sa.len() > 2;
        let b_batched = sb.len() > 2;
        let batch = g.numel() / (m * n);
        let gd = g.data();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());

        if self.wants(a) {
            let mut da = vec![F::zero(); ad.len()];
            // Bᵀ as a K x N-shaped read of b, viewed as N x K.
            let bt_strides = if trans_b { (k as isize, 1) } else { (1, n as isize) };
            for i in 0..batch {
                let b_off = if b_batched { i * k * n } else { 0 };
                let (dst, acc) = if a_batched {
                    (&mut da[i * m * k..(i + 1) * m * k], false)
                } else {
                    (&mut da[..], i > 0)
                };
                F::gemm(
                    m,
                    n,
                    k,
                    &gd[i * m * n..],
                    (n as isize, 1),
                    &bd[b_off..],
                    bt_strides,
                    dst,
                    acc,
                );
            }
            accumulate(grads, a, Tensor::from_parts(sa.clone(), da));
        }
        if self.wants(b) {
            let mut db = vec![F::zero(); bd.len()];
            for i in 0..batch {
                let a_off = if a_batched { i * m * k } else { 0 };
                let (dst, acc) = if b_batched {
                    (&mut db[i * k * n..(i + 1) * k * n], false)
                } else {
                    (&mut db[..], i > 0)
                };
                if trans_b {
                    // dB (N x K) = dCᵀ (N x M) · A (M x K)
                    F::gemm(
                        n,
                        m,
                        k,
                        &gd[i * m * n..],
                        (1, n as isize),
                        &ad[a_off..],
                        (k as isize, 1),
                        dst,
                        acc,
                    );
                } else {
                    // dB (K x N) = Aᵀ (K x M) · dC (M x N)
                    F::gemm(
                        k,
                        m,
                        n,
                        &ad[a_off..],
                        (1, k as isize),
                        &gd[i * m * n..],
                        (n as isize, 1),
                        dst,
                        acc,
                    );
                }
            }
            accumulate(grads, b, Tensor::from_parts(sb, db));
        }
    }
}
