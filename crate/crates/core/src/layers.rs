//! Named-parameter building blocks shared by the text encoder, the U-Net and
//! the image attention blocks.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Element, Graph, Tensor, Var};

/// A tensor with a stable, globally unique name.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

impl<F: Element> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn randn(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::new(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::ones(shape))
    }
}

/// Visits parameters in a fixed order.
pub trait Module<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>);

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = Vec::new();
        self.visit(&mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = Vec::new();
        self.visit_mut(&mut v);
        v
    }
}

impl<F, M: Module<F>> Module<F> for Vec<M> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.iter().for_each(|m| m.visit(out));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.iter_mut().for_each(|m| m.visit_mut(out));
    }
}

impl<F, M: Module<F>> Module<F> for Option<M> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        if let Some(m) = self {
            m.visit(out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        if let Some(m) = self {
            m.visit_mut(out);
        }
    }
}

/// Forward-pass context: the graph plus the policy deciding which named
/// parameters are lifted as trainable leaves. Each parameter is lifted once.
pub struct Ctx<F> {
    pub g: Graph<F>,
    trainable: Box<dyn Fn(&str) -> bool>,
    lifted: HashMap<String, Var>,
}

impl<F: Element> Ctx<F> {
    pub fn new(trainable: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            g: Graph::new(),
            trainable: Box::new(trainable),
            lifted: HashMap::new(),
        }
    }

    /// Context in which every parameter is a constant.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn lift(&mut self, p: &Param<F>) -> Var {
        if let Some(v) = self.lifted.get(&p.name) {
            return *v;
        }
        let v = self.g.leaf(&p.name, &p.value, (self.trainable)(&p.name));
        self.lifted.insert(p.name.clone(), v);
        v
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.g.value(v)
    }
}

pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Element> Linear<F> {
    /// `[in, out]` weight drawn with std `1/sqrt(in)`.
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::randn(format!("{name}.weight"), &[d_in, d_out], (d_in as f64).powf(-0.5), rng),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[d_out])),
        }
    }

    pub fn zeroed(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), &[d_in, d_out]),
            bias: Some(Param::zeros(format!("{name}.bias"), &[d_out])),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Applies to the trailing extent of `x`.
    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        let d_in = *shape.last().unwrap_or(&0);
        let rows = ctx.value(x).numel() / d_in.max(1);
        let w = ctx.lift(&self.weight);
        let flat = ctx.g.reshape(x, &[rows, d_in])?;
        let mut y = ctx.g.matmul(flat, w)?;
        if let Some(b) = &self.bias {
            let b = ctx.lift(b);
            y = ctx.g.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out();
        ctx.g.reshape(y, &out_shape)
    }
}

impl<F> Module<F> for Linear<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

impl<F: Element> LayerNorm<F> {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Param::ones(format!("{name}.gamma"), &[d]),
            beta: Param::zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.lift(&self.gamma), ctx.lift(&self.beta));
        ctx.g.layer_norm(x, g, b, 1e-5)
    }
}

impl<F> Module<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

pub struct GroupNorm<F> {
    pub groups: usize,
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

impl<F: Element> GroupNorm<F> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        Self {
            groups,
            gamma: Param::ones(format!("{name}.gamma"), &[channels]),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.lift(&self.gamma), ctx.lift(&self.beta));
        ctx.g.group_norm(x, self.groups, g, b, 1e-5)
    }
}

impl<F> Module<F> for GroupNorm<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Element> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Self {
            weight: Param::randn(
                format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                fan_in.powf(-0.5),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.lift(&self.weight), ctx.lift(&self.bias));
        ctx.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<F> Module<F> for Conv2d<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Optional modifiers of the attention probabilities.
#[derive(Clone, Default)]
pub struct AttnMasks<F> {
    /// Additive bias `[N, M]` on the scores (e.g. causal).
    pub score_bias: Option<Var>,
    /// Keys excluded from the softmax, `[B, M]`.
    pub key_mask: Option<Arc<Vec<bool>>>,
    /// Post-softmax multiplicative gate over keys, `[B, M]`, not renormalized.
    pub key_gate: Option<Arc<Vec<F>>>,
}

/// Multi-head attention of queries `x [B, N, d_q]` over `context [B, M, d_kv]`.
pub struct Attention<F> {
    pub heads: usize,
    pub to_q: Linear<F>,
    pub to_k: Linear<F>,
    pub to_v: Linear<F>,
    pub to_out: Linear<F>,
}

/// Result of one attention call: output tokens and the probabilities
/// `[B, heads, N, M]` before any key gate.
pub struct AttnOut {
    pub out: Var,
    pub probs: Var,
}

impl<F: Element> Attention<F> {
    pub fn new(name: &str, d_q: usize, d_kv: usize, heads: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        let to_out = if zero_out {
            Linear::zeroed(&format!("{name}.to_out"), d_q, d_q)
        } else {
            Linear::new(&format!("{name}.to_out"), d_q, d_q, true, rng)
        };
        Self {
            heads,
            to_q: Linear::new(&format!("{name}.to_q"), d_q, d_q, false, rng),
            to_k: Linear::new(&format!("{name}.to_k"), d_kv, d_q, false, rng),
            to_v: Linear::new(&format!("{name}.to_v"), d_kv, d_q, false, rng),
            to_out,
        }
    }

    fn split_heads(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let r = ctx.g.reshape(x, &[b, n, self.heads, d / self.heads])?;
        ctx.g.permute(r, &[0, 2, 1, 3])
    }

    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var, context: Var, masks: &AttnMasks<F>) -> Result<AttnOut> {
        let (b, n) = (ctx.g.shape(x)[0], ctx.g.shape(x)[1]);
        let d = self.to_q.d_out();
        let dh = d / self.heads;
        let q = self.to_q.forward(ctx, x)?;
        let k = self.to_k.forward(ctx, context)?;
        let v = self.to_v.forward(ctx, context)?;
        let (q, k, v) = (
            self.split_heads(ctx, q)?,
            self.split_heads(ctx, k)?,
            self.split_heads(ctx, v)?,
        );
        let scores = ctx.g.matmul_nt(q, k)?;
        let mut scores = ctx.g.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        if let Some(bias) = masks.score_bias {
            scores = ctx.g.add(scores, bias)?;
        }
        let probs = match &masks.key_mask {
            Some(m) => ctx.g.softmax_last_masked(scores, m.clone())?,
            None => ctx.g.softmax_last(scores)?,
        };
        let gated = match &masks.key_gate {
            Some(m) => ctx.g.mask_keys(probs, m.clone())?,
            None => probs,
        };
        let o = ctx.g.matmul(gated, v)?;
        let o = ctx.g.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.g.reshape(o, &[b, n, d])?;
        let out = self.to_out.forward(ctx, o)?;
        Ok(AttnOut { out, probs })
    }
}

impl<F> Module<F> for Attention<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.to_q.visit(out);
        self.to_k.visit(out);
        self.to_v.visit(out);
        self.to_out.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.to_q.visit_mut(out);
        self.to_k.visit_mut(out);
        self.to_v.visit_mut(out);
        self.to_out.visit_mut(out);
    }
}

/// Two-layer GELU feed-forward with 4× expansion.
pub struct FeedForward<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Element> FeedForward<F> {
    pub fn new(name: &str, d: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        let fc1 = Linear::new(&format!("{name}.fc1"), d, 4 * d, true, rng);
        let fc2 = if zero_out {
            Linear::zeroed(&format!("{name}.fc2"), 4 * d, d)
        } else {
            Linear::new(&format!("{name}.fc2"), 4 * d, d, true, rng)
        };
        Self { fc1, fc2 }
    }

    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

impl<F> Module<F> for FeedForward<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.fc1.visit(out);
        self.fc2.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.fc1.visit_mut(out);
        self.fc2.visit_mut(out);
    }
}

/// Pre-norm residual block: `x + attn(LN x, context)`, then `x + FF(LN x)`.
/// Serves as the text cross-attention block of the U-Net, the encoder layers
/// of the text model (context = itself) and the image cross-attention block.
pub struct AttnFfBlock<F> {
    pub norm1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm2: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

impl<F: Element> AttnFfBlock<F> {
    pub fn new(name: &str, d: usize, d_context: usize, heads: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), d),
            attn: Attention::new(&format!("{name}.attn"), d, d_context, heads, zero_out, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), d),
            ff: FeedForward::new(&format!("{name}.ff"), d, zero_out, rng),
        }
    }

    /// `context = None` attends to the normalized input itself.
    pub fn forward(&self, ctx: &mut Ctx<F>, x: Var, context: Option<Var>, masks: &AttnMasks<F>) -> Result<AttnOut> {
        let h = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, context.unwrap_or(h), masks)?;
        let x = ctx.g.add(x, a.out)?;
        let h = self.norm2.forward(ctx, x)?;
        let f = self.ff.forward(ctx, h)?;
        let out = ctx.g.add(x, f)?;
        Ok(AttnOut { out, probs: a.probs })
    }
}

impl<F> Module<F> for AttnFfBlock<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.norm1.visit(out);
        self.attn.visit(out);
        self.norm2.visit(out);
        self.ff.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.norm1.visit_mut(out);
        self.attn.visit_mut(out);
        self.norm2.visit_mut(out);
        self.ff.visit_mut(out);
    }
}

/// SHA-256 over a parameter's shape and little-endian values, hex encoded.
pub fn param_hash<F: Element>(p: &Param<F>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for d in p.value.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(p.value.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_block_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = AttnFfBlock::<f32>::new("b", 8, 6, 2, true, &mut rng);
        let mut ctx = Ctx::frozen();
        let x = ctx.constant(&Tensor::randn(&[2, 5, 8], 1.0, &mut rng));
        let c = ctx.constant(&Tensor::randn(&[2, 3, 6], 1.0, &mut rng));
        let y = block.forward(&mut ctx, x, Some(c), &AttnMasks::default()).unwrap();
        assert!(ctx.value(y.out).bit_eq(ctx.value(x)));
        assert_eq!(ctx.g.shape(y.probs), &[2, 2, 5, 3]);
    }

    #[test]
    fn lifting_is_cached_per_name() {
        let mut ctx = Ctx::<f64>::new(|n| n.starts_with("t."));
        let p = Param::ones("t.w", &[2]);
        let q = Param::ones("f.w", &[2]);
        assert_eq!(ctx.lift(&p), ctx.lift(&p));
        let (vp, vq) = (ctx.lift(&p), ctx.lift(&q));
        assert!(ctx.g.requires_grad(vp));
        assert!(!ctx.g.requires_grad(vq));
        assert_eq!(ctx.g.params().len(), 1);
    }

    #[test]
    fn hash_tracks_values_and_shape() {
        let a = Param::<f32>::ones("a", &[2, 2]);
        let mut b = Param::<f32>::ones("a", &[4]);
        assert_ne!(param_hash(&a), param_hash(&b));
        b.value = a.value.clone();
        assert_eq!(param_hash(&a), param_hash(&b));
    }
}
