//! Image cross-attention personalization on top of the frozen U-Net.
//!
//! A clean reference latent runs through the vanilla U-Net alongside the
//! noisy sample. At every vico block the reference stream's tokens pass the
//! frozen text attention, the S★ column of that attention map is binarized
//! with Otsu's method into an object mask, and a trainable image attention
//! block lets the sample's tokens attend to the masked reference tokens.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::layers::{AttnFfBlock, AttnMasks, AttnOut, Ctx, Module, Param};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::text::{TextConfig, TextEncoder, TokenSequence, Vocabulary, PLACEHOLDER_PARAM};
use crate::unet::{AttnBlock, AttnHook, TextCond, UNet, UNetConfig, VanillaHook};

/// Name prefix of every image attention parameter.
pub const PSI_PREFIX: &str = "psi.";

/// Largest sample count and bin count [`otsu_threshold`] accepts; keeps its
/// exact integer arithmetic inside 256 bits.
pub const OTSU_MAX_VALUES: usize = 1 << 24;
pub const OTSU_MAX_BINS: usize = 4096;

/// Otsu threshold over a `[min, max]` histogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Otsu {
    pub tau: f64,
    /// Boundary index `k`: bins `< k` form the background class.
    pub boundary: usize,
    /// Set when every value is equal and no threshold separates anything.
    pub degenerate: bool,
}

/// Histogram bin of `v` for `bins` equal bins over `[min, max]`.
pub fn histogram_bin(v: f64, min: f64, max: f64, bins: usize) -> usize {
    let w = (max - min) / bins as f64;
    (((v - min) / w).floor() as usize).min(bins - 1)
}

fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    let mask = u64::MAX as u128;
    let (a0, a1) = (a & mask, a >> 64);
    let (b0, b1) = (b & mask, b >> 64);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & mask) + (p10 & mask);
    let lo = (p00 & mask) | (mid << 64);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

/// Threshold maximizing the between-class variance `ω0·ω1·(μ0 − μ1)²` over
/// all bin boundaries; the lowest boundary wins ties. Class means are taken
/// over bin indices, so every comparison is exact integer arithmetic.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<Otsu> {
    if values.is_empty() {
        return Err(Error::invalid("otsu_threshold of an empty set"));
    }
    if !(2..=OTSU_MAX_BINS).contains(&bins) || values.len() > OTSU_MAX_VALUES {
        return Err(Error::invalid(format!(
            "otsu_threshold supports 2..={OTSU_MAX_BINS} bins and at most {OTSU_MAX_VALUES} values"
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("otsu_threshold input {v}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(Otsu {
            tau: min,
            boundary: 0,
            degenerate: true,
        });
    }
    let mut hist = vec![0u64; bins];
    for &v in values {
        hist[histogram_bin(v, min, max, bins)] += 1;
    }
    let n = values.len() as u128;
    let m_total: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut m0) = (0u128, 0u128);
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..bins {
        n0 += hist[k - 1] as u128;
        m0 += (k - 1) as u128 * hist[k - 1] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let m1 = m_total - m0;
        let diff = (n1 * m0).abs_diff(n0 * m1);
        let num = diff * diff;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => mul_wide(num, bd) > mul_wide(bn, den),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (k, ..) = best.expect("two distinct values occupy two bins");
    Ok(Otsu {
        tau: min + k as f64 * (max - min) / bins as f64,
        boundary: k,
        degenerate: false,
    })
}

/// Binary object mask over one reference's patches at one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub block: usize,
    pub values: Vec<bool>,
    pub tau: f64,
    /// True when the all-ones fallback replaced the thresholded mask.
    pub fallback: bool,
}

impl PatchMask {
    pub fn all_ones(block: usize, len: usize, tau: f64) -> Self {
        Self {
            block,
            values: vec![true; len],
            tau,
            fallback: true,
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Thresholds a similarity column into a mask; constant columns and empty
/// results fall back to all ones.
pub fn mask_from_column(block: usize, column: &[f64], bins: usize) -> Result<PatchMask> {
    let o = otsu_threshold(column, bins)?;
    if o.degenerate {
        return Ok(PatchMask::all_ones(block, column.len(), o.tau));
    }
    let values: Vec<bool> = column.iter().map(|&v| v > o.tau).collect();
    if values.iter().all(|&v| !v) {
        return Ok(PatchMask::all_ones(block, column.len(), o.tau));
    }
    Ok(PatchMask {
        block,
        values,
        tau: o.tau,
        fallback: false,
    })
}

/// Head-averaged column `token[b]` of `probs [B, heads, N, D_t]`, one per
/// batch element.
pub fn token_columns<F: Element>(probs: &Tensor<F>, token: &[usize]) -> Result<Vec<Vec<f64>>> {
    let s = probs.shape();
    if s.len() != 4 || s[0] != token.len() {
        return Err(Error::shape("token_columns", s, &[token.len()]));
    }
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    if let Some(&i) = token.iter().find(|&&i| i >= d) {
        return Err(Error::invalid(format!("token index {i} outside context {d}")));
    }
    let data = probs.data();
    Ok((0..b)
        .map(|bi| {
            (0..n)
                .map(|p| {
                    let s: f64 = (0..h)
                        .map(|hi| data[((bi * h + hi) * n + p) * d + token[bi]].f64())
                        .sum();
                    s / h as f64
                })
                .collect()
        })
        .collect())
}

/// Object masks from a reference-stream attention map. With `shared`, the
/// batch shares one reference and the column is also averaged over batch.
pub fn object_mask<F: Element>(
    block: usize,
    probs: &Tensor<F>,
    s_star: &[usize],
    shared: bool,
    bins: usize,
) -> Result<Vec<PatchMask>> {
    let cols = token_columns(probs, s_star)?;
    if shared {
        let n = cols[0].len();
        let avg: Vec<f64> = (0..n)
            .map(|p| cols.iter().map(|c| c[p]).sum::<f64>() / cols.len() as f64)
            .collect();
        let m = mask_from_column(block, &avg, bins)?;
        return Ok(vec![m; cols.len()]);
    }
    cols.iter().map(|c| mask_from_column(block, c, bins)).collect()
}

/// Max-normalized squared distance between two similarity columns.
pub fn regularizer_value(a_i: &[f64], a_j: &[f64]) -> f64 {
    let mi = a_i.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mj = a_j.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    a_i.iter().zip(a_j).map(|(x, y)| (x / mi - y / mj).powi(2)).sum()
}

/// `‖A_i/max A_i − A_j/max A_j‖²` on the graph for `probs [B, heads, N, D_t]`,
/// with the max over patches per (batch, head), summed over patches and
/// averaged over batch and heads.
pub fn attention_regularizer<F: Element>(g: &mut Graph<F>, probs: Var, s_star: &[usize], eot: &[usize]) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 4 || s[0] != s_star.len() || s[0] != eot.len() {
        return Err(Error::shape("attention_regularizer", &s, &[s_star.len(), eot.len()]));
    }
    let (b, h, n) = (s[0], s[1], s[2]);
    let mut total: Option<Var> = None;
    for bi in 0..b {
        let (i, j) = (s_star[bi], eot[bi]);
        if i == j {
            return Err(Error::invalid("regularizer needs distinct token indices"));
        }
        let item = g.narrow(probs, 0, bi, 1)?;
        let col = |g: &mut Graph<F>, k: usize| -> Result<Var> {
            let c = g.narrow(item, 3, k, 1)?;
            let c = g.reshape(c, &[h, n])?;
            g.max_normalize_last(c)
        };
        let ci = col(g, i)?;
        let cj = col(g, j)?;
        let d = g.sub(ci, cj)?;
        let sq = g.mul(d, d)?;
        let part = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("regularizer of an empty batch"))?;
    Ok(g.scale(total, F::of(1.0 / (b * h) as f64)))
}

/// Trainable image cross-attention block `ψ_l`: same structure as the text
/// block, with keys and values projected from image tokens.
pub struct ImageAttention<F> {
    pub block: usize,
    pub inner: AttnFfBlock<F>,
}

impl<F: Element> ImageAttention<F> {
    pub fn new(block: usize, channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            block,
            inner: AttnFfBlock::new(&format!("{PSI_PREFIX}{block}"), channels, channels, heads, true, rng),
        }
    }

    /// `n′ = A_I(n̂, ĉ_I)` with the object mask gating reference keys after
    /// the softmax. `gate` is `[B, M]`.
    pub fn forward(&self, ctx: &mut Ctx<F>, n_hat: Var, c_hat: Var, gate: Option<Arc<Vec<F>>>) -> Result<AttnOut> {
        let masks = AttnMasks {
            key_gate: gate,
            ..AttnMasks::default()
        };
        self.inner.forward(ctx, n_hat, Some(c_hat), &masks)
    }
}

impl<F> Module<F> for ImageAttention<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.inner.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.inner.visit_mut(out);
    }
}

/// Concatenates per-reference visual conditions along the token axis:
/// `[R, N, C]` becomes `[1, R·N, C]`.
pub fn concat_references<F: Element>(g: &mut Graph<F>, c_hat: Var) -> Result<Var> {
    let s = g.shape(c_hat).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("concat_references", &s, &[3]));
    }
    g.reshape(c_hat, &[1, s[0] * s[1], s[2]])
}

/// Which stream an attention map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Denoise,
    Reference,
}

/// Attention probabilities `[B, heads, D_p, D_t]` of one block.
#[derive(Clone, Debug)]
pub struct AttentionRecord<F> {
    pub block: usize,
    pub stream: Stream,
    pub map: Tensor<F>,
}

/// Reference-stream features captured at one vico block.
struct Captured {
    /// `ĉ_I = A_T(c_I, c_T)`.
    c_hat: Var,
    probs: Var,
}

struct CaptureHook<'a> {
    blocks: &'a [usize],
    captured: BTreeMap<usize, Captured>,
}

impl<F: Element> AttnHook<F> for CaptureHook<'_> {
    fn run(&mut self, ctx: &mut Ctx<F>, block: &AttnBlock<F>, tokens: Var, cond: &TextCond) -> Result<Var> {
        let a = block.text_attention(ctx, tokens, cond)?;
        if self.blocks.contains(&block.index) {
            self.captured.insert(
                block.index,
                Captured {
                    c_hat: a.out,
                    probs: a.probs,
                },
            );
        }
        Ok(a.out)
    }

    fn finished(&self, _l: usize) -> bool {
        self.captured.len() == self.blocks.len()
    }
}

struct VicoHook<'a, F> {
    psi: &'a [ImageAttention<F>],
    captured: &'a BTreeMap<usize, Captured>,
    gates: &'a BTreeMap<usize, Arc<Vec<F>>>,
    shared_refs: usize,
    maps: Vec<(usize, Var)>,
}

impl<F: Element> AttnHook<F> for VicoHook<'_, F> {
    fn run(&mut self, ctx: &mut Ctx<F>, block: &AttnBlock<F>, tokens: Var, cond: &TextCond) -> Result<Var> {
        let a = block.text_attention(ctx, tokens, cond)?;
        self.maps.push((block.index, a.probs));
        let Some(psi) = self.psi.iter().find(|p| p.block == block.index) else {
            return Ok(a.out);
        };
        let cap = self
            .captured
            .get(&block.index)
            .ok_or_else(|| Error::invalid(format!("no visual condition captured for block {}", block.index)))?;
        let c_hat = if self.shared_refs > 1 {
            concat_references(&mut ctx.g, cap.c_hat)?
        } else {
            cap.c_hat
        };
        Ok(psi
            .forward(ctx, a.out, c_hat, self.gates.get(&block.index).cloned())?
            .out)
    }
}

/// Knobs of one ViCo forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Apply the Otsu object mask to the image attention.
    pub use_mask: bool,
    pub otsu_bins: usize,
    /// Build the attention regularizer on the graph.
    pub regularizer: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            use_mask: true,
            otsu_bins: 256,
            regularizer: true,
        }
    }
}

/// Everything one forward pass produces.
pub struct ForwardOut<F> {
    pub eps: Var,
    /// Mean regularizer over vico blocks (absent when disabled).
    pub reg: Option<Var>,
    /// Per vico block, one mask per reference.
    pub masks: BTreeMap<usize, Vec<PatchMask>>,
    pub records: Vec<AttentionRecord<F>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub text: TextConfig,
    /// Seed of the image attention initialization.
    pub psi_seed: u64,
    /// Word whose embedding initializes S★.
    pub init_word: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            text: TextConfig::default(),
            psi_seed: 13,
            init_word: "object".into(),
        }
    }
}

impl ModelConfig {
    /// The tiny configuration used by gradient checks: 8×8×2 latent, four
    /// attention blocks, two of them vico blocks.
    pub fn micro() -> Self {
        Self {
            unet: UNetConfig {
                latent: [2, 8, 8],
                patch: 1,
                base_channels: 8,
                channel_mult: vec![1],
                attn_encoder: vec![1],
                attn_middle: 1,
                attn_decoder: vec![2],
                vico_blocks: vec![2, 3],
                heads: 2,
                norm_groups: 4,
                d_text: 8,
                seed: 5,
            },
            text: TextConfig {
                d_text: 8,
                heads: 2,
                ..TextConfig::default()
            },
            psi_seed: 13,
            init_word: "object".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.unet.d_text != self.text.d_text {
            return Err(Error::invalid(format!(
                "unet.d_text {} differs from text.d_text {}",
                self.unet.d_text, self.text.d_text
            )));
        }
        Ok(())
    }
}

/// Frozen text encoder and U-Net plus the trainable S★ and ψ.
pub struct ViCoModel<F> {
    pub cfg: ModelConfig,
    pub text: TextEncoder<F>,
    pub unet: UNet<F>,
    pub psi: Vec<ImageAttention<F>>,
}

/// Whether a parameter name belongs to the trainable set {S★} ∪ ψ.
pub fn is_trainable(name: &str) -> bool {
    name == PLACEHOLDER_PARAM || name.starts_with(PSI_PREFIX)
}

impl<F: Element> ViCoModel<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut text = TextEncoder::new(cfg.text.clone(), Vocabulary::default())?;
        text.init_placeholder(&cfg.init_word)?;
        let unet = UNet::new(cfg.unet.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.psi_seed);
        let psi = cfg
            .unet
            .vico_blocks
            .iter()
            .map(|&l| {
                Ok(ImageAttention::new(
                    l,
                    cfg.unet.block_channels(l)?,
                    cfg.unet.heads,
                    &mut rng,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, text, unet, psi })
    }

    /// Trainable parameters in a fixed order: S★ first, then ψ.
    pub fn trainable_params(&self) -> Vec<&Param<F>> {
        let mut v = vec![self.text.placeholder_param()];
        self.psi.visit(&mut v);
        v
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        self.text.visit_mut(&mut v);
        v.retain(|p| p.name == PLACEHOLDER_PARAM);
        self.psi.visit_mut(&mut v);
        v
    }

    /// Frozen parameters: the U-Net θ and the text encoder except S★.
    pub fn frozen_params(&self) -> Vec<&Param<F>> {
        let mut v = self.unet.params();
        v.extend(self.text.frozen_params());
        v
    }

    pub fn zero_psi_outputs(&mut self) {
        for p in self.psi.params_mut() {
            if p.name.contains(".to_out.") || p.name.contains(".ff.fc2.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    /// Encoded prompts with their key mask.
    pub fn text_cond(&self, ctx: &mut Ctx<F>, tokens: &[TokenSequence]) -> Result<TextCond> {
        let c_t = self.text.encode(ctx, tokens)?;
        Ok(TextCond {
            c_t,
            key_mask: Arc::new(self.text.key_mask(tokens)),
        })
    }

    /// Vanilla frozen U-Net prediction (no image attention).
    pub fn forward_vanilla(
        &self,
        ctx: &mut Ctx<F>,
        z_t: &Tensor<F>,
        ts: &[usize],
        tokens: &[TokenSequence],
    ) -> Result<Var> {
        let cond = self.text_cond(ctx, tokens)?;
        let z = ctx.constant(z_t);
        let mut hook = VanillaHook::default();
        Ok(self
            .unet
            .forward_hooked(ctx, z, ts, &cond, &mut hook)?
            .expect("runs to completion"))
    }

    /// ViCo pass. `z_t [B, C, H, W]` with per-element `ts` and `tokens`.
    /// `z_ref` holds either one reference per batch element (`[B, ..]`) or,
    /// for `B = 1`, any number of references whose visual conditions are
    /// concatenated.
    pub fn forward(
        &self,
        ctx: &mut Ctx<F>,
        z_t: &Tensor<F>,
        ts: &[usize],
        tokens: &[TokenSequence],
        z_ref: &Tensor<F>,
        opts: ForwardOptions,
    ) -> Result<ForwardOut<F>> {
        self.forward_pinned(ctx, z_t, ts, tokens, z_ref, opts, None)
    }

    /// [`Self::forward`] with the object masks taken from `pinned` instead of
    /// being recomputed from the reference attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_pinned(
        &self,
        ctx: &mut Ctx<F>,
        z_t: &Tensor<F>,
        ts: &[usize],
        tokens: &[TokenSequence],
        z_ref: &Tensor<F>,
        opts: ForwardOptions,
        pinned: Option<&BTreeMap<usize, Vec<PatchMask>>>,
    ) -> Result<ForwardOut<F>> {
        let b = z_t.shape()[0];
        let r = z_ref.shape()[0];
        if ts.len() != b || tokens.len() != b {
            return Err(Error::shape("vico forward", &[b], &[ts.len(), tokens.len()]));
        }
        if z_ref.shape()[1..] != z_t.shape()[1..] || (r != b && b != 1) {
            return Err(Error::shape("vico reference", z_t.shape(), z_ref.shape()));
        }
        let shared_refs = if b == 1 { r } else { 1 };
        let s_star = tokens.iter().map(|t| t.s_star_index()).collect::<Result<Vec<_>>>()?;
        let cond = self.text_cond(ctx, tokens)?;

        let vico = &self.cfg.unet.vico_blocks;
        let ref_tokens: Vec<TokenSequence> = (0..r).map(|k| tokens[k.min(b - 1)].clone()).collect();
        let ref_cond = if r == b {
            cond.clone()
        } else {
            let reps = vec![cond.c_t; r];
            let c_t = ctx.g.concat(&reps, 0)?;
            TextCond {
                c_t,
                key_mask: Arc::new(self.text.key_mask(&ref_tokens)),
            }
        };
        let ref_star: Vec<usize> = (0..r).map(|k| s_star[k.min(b - 1)]).collect();
        let ref_eot: Vec<usize> = ref_tokens.iter().map(|t| t.eot).collect();
        let ref_ts: Vec<usize> = (0..r).map(|k| ts[k.min(b - 1)]).collect();

        let zr = ctx.constant(z_ref);
        let mut capture = CaptureHook {
            blocks: vico,
            captured: BTreeMap::new(),
        };
        if !vico.is_empty() {
            self.unet.forward_hooked(ctx, zr, &ref_ts, &ref_cond, &mut capture)?;
        }

        let mut masks = BTreeMap::new();
        let mut gates = BTreeMap::new();
        let mut records = Vec::new();
        let mut reg_terms = Vec::new();
        for (&l, cap) in &capture.captured {
            let probs = ctx.value(cap.probs).clone();
            let m = match pinned.and_then(|p| p.get(&l)) {
                Some(m) => m.clone(),
                None => object_mask(l, &probs, &ref_star, false, opts.otsu_bins)?,
            };
            if opts.use_mask {
                let gate: Vec<F> = m
                    .iter()
                    .flat_map(|pm| pm.values.iter().map(|&v| if v { F::one() } else { F::zero() }))
                    .collect();
                gates.insert(l, Arc::new(gate));
            }
            masks.insert(l, m);
            if opts.regularizer {
                reg_terms.push(attention_regularizer(&mut ctx.g, cap.probs, &ref_star, &ref_eot)?);
            }
            records.push(AttentionRecord {
                block: l,
                stream: Stream::Reference,
                map: probs,
            });
        }

        let zv = ctx.constant(z_t);
        let mut hook = VicoHook {
            psi: &self.psi,
            captured: &capture.captured,
            gates: &gates,
            shared_refs,
            maps: Vec::new(),
        };
        let eps = self
            .unet
            .forward_hooked(ctx, zv, ts, &cond, &mut hook)?
            .expect("runs to completion");
        for (l, v) in hook.maps {
            if vico.contains(&l) {
                records.push(AttentionRecord {
                    block: l,
                    stream: Stream::Denoise,
                    map: ctx.value(v).clone(),
                });
            }
        }

        let reg = match reg_terms.split_first() {
            None => None,
            Some((first, rest)) => {
                let mut acc = *first;
                for t in rest {
                    acc = ctx.g.add(acc, *t)?;
                }
                Some(ctx.g.scale(acc, F::of(1.0 / reg_terms.len() as f64)))
            }
        };
        Ok(ForwardOut {
            eps,
            reg,
            masks,
            records,
        })
    }

    /// Object masks of each reference in `z_ref [R, C, H, W]` at timestep
    /// `t`, from the reference stream alone.
    pub fn reference_masks(
        &self,
        tokens: &TokenSequence,
        z_ref: &Tensor<F>,
        t: usize,
        bins: usize,
    ) -> Result<BTreeMap<usize, Vec<PatchMask>>> {
        let r = z_ref.shape()[0];
        let s_star = tokens.s_star_index()?;
        self.reference_attention(tokens, z_ref, t)?
            .into_iter()
            .map(|(l, probs)| Ok((l, object_mask(l, &probs, &vec![s_star; r], false, bins)?)))
            .collect()
    }

    /// Text cross-attention probabilities `[R, h, N, D_t]` of the reference
    /// stream at every vico block.
    pub fn reference_attention(
        &self,
        tokens: &TokenSequence,
        z_ref: &Tensor<F>,
        t: usize,
    ) -> Result<BTreeMap<usize, Tensor<F>>> {
        let r = z_ref.shape()[0];
        let toks = vec![tokens.clone(); r];
        let mut ctx = Ctx::frozen();
        let cond = self.text_cond(&mut ctx, &toks)?;
        let zr = ctx.constant(z_ref);
        let vico = &self.cfg.unet.vico_blocks;
        let mut capture = CaptureHook {
            blocks: vico,
            captured: BTreeMap::new(),
        };
        if !vico.is_empty() {
            self.unet
                .forward_hooked(&mut ctx, zr, &vec![t; r], &cond, &mut capture)?;
        }
        Ok(capture
            .captured
            .iter()
            .map(|(&l, cap)| (l, ctx.value(cap.probs).clone()))
            .collect())
    }

    /// Deterministic DDIM generation of one image. Returns the final latent
    /// and, for every step index selected by `keep_step`, that step's masks
    /// and reference/denoise records.
    pub fn sample(
        &self,
        tokens: &TokenSequence,
        references: &Tensor<F>,
        sched: &NoiseSchedule,
        steps: usize,
        seed: u64,
        mut keep_step: impl FnMut(usize) -> bool,
    ) -> Result<SampleOut<F>> {
        let [c, h, w] = self.cfg.unet.latent;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_start = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
        let mut kept = Vec::new();
        let opts = ForwardOptions {
            regularizer: false,
            ..ForwardOptions::default()
        };
        let z = ddim_sample(
            |z: &Tensor<F>, t, k| {
                let mut ctx = Ctx::frozen();
                let out = self.forward(&mut ctx, z, &[t], std::slice::from_ref(tokens), references, opts)?;
                let eps = ctx.value(out.eps).clone();
                if keep_step(k) {
                    kept.push(StepRecord {
                        step: k,
                        t,
                        masks: out.masks,
                        records: out.records,
                    });
                }
                Ok(eps)
            },
            z_start,
            sched,
            steps,
        )?;
        Ok(SampleOut {
            latent: z.cast(),
            steps: kept,
        })
    }
}

/// What [`ViCoModel::sample`] keeps for one step.
pub struct StepRecord<F> {
    pub step: usize,
    pub t: usize,
    pub masks: BTreeMap<usize, Vec<PatchMask>>,
    pub records: Vec<AttentionRecord<F>>,
}

pub struct SampleOut<F> {
    /// `[1, C, H, W]`.
    pub latent: Tensor<F>,
    pub steps: Vec<StepRecord<F>>,
}
