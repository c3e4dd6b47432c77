//! Mini U-Net denoiser with indexed text cross-attention blocks.
//!
//! Attention blocks are numbered in traversal order: encoder (fine to
//! coarse), middle, then decoder (coarse to fine). The token-space part of
//! every block runs through an [`AttnHook`], which is how the reference
//! stream is captured and how image attention is spliced in.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttnFfBlock, AttnMasks, AttnOut, Conv2d, Ctx, GroupNorm, Linear, Module, Param};
use crate::numerics::{Element, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Latent `[C, H, W]`.
    pub latent: [usize; 3],
    /// Side of the non-overlapping patches the input convolution embeds.
    pub patch: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Attention blocks per encoder level, fine to coarse.
    pub attn_encoder: Vec<usize>,
    pub attn_middle: usize,
    /// Attention blocks per decoder level, coarse to fine.
    pub attn_decoder: Vec<usize>,
    /// Decoder blocks that receive image cross-attention.
    pub vico_blocks: Vec<usize>,
    pub heads: usize,
    pub norm_groups: usize,
    pub d_text: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent: [3, 32, 32],
            patch: 2,
            base_channels: 32,
            channel_mult: vec![1, 2],
            attn_encoder: vec![1, 2],
            attn_middle: 1,
            attn_decoder: vec![2, 2],
            vico_blocks: vec![4, 6],
            heads: 4,
            norm_groups: 8,
            d_text: 32,
            seed: 11,
        }
    }
}

/// Position of an attention block within the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPosition {
    Encoder {
        level: usize,
        k: usize,
    },
    Middle {
        k: usize,
    },
    /// `level` counts decoder levels in traversal order (coarsest first).
    Decoder {
        level: usize,
        k: usize,
    },
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn encoder_blocks(&self) -> usize {
        self.attn_encoder.iter().sum()
    }

    pub fn total_blocks(&self) -> usize {
        self.encoder_blocks() + self.attn_middle + self.attn_decoder.iter().sum::<usize>()
    }

    pub fn decoder_indices(&self) -> std::ops::Range<usize> {
        self.encoder_blocks() + self.attn_middle..self.total_blocks()
    }

    /// Stable global index of an attention block.
    pub fn attention_block_index(&self, pos: BlockPosition) -> Result<usize> {
        let bad = || Error::invalid(format!("no attention block at {pos:?}"));
        match pos {
            BlockPosition::Encoder { level, k } => {
                if level >= self.levels() || k >= self.attn_encoder[level] {
                    return Err(bad());
                }
                Ok(self.attn_encoder[..level].iter().sum::<usize>() + k)
            }
            BlockPosition::Middle { k } => {
                if k >= self.attn_middle {
                    return Err(bad());
                }
                Ok(self.encoder_blocks() + k)
            }
            BlockPosition::Decoder { level, k } => {
                if level >= self.levels() || k >= self.attn_decoder[level] {
                    return Err(bad());
                }
                Ok(self.decoder_indices().start + self.attn_decoder[..level].iter().sum::<usize>() + k)
            }
        }
    }

    /// Token grid `(H, W)` of attention block `l`.
    pub fn block_grid(&self, l: usize) -> Result<(usize, usize)> {
        let level = self.block_level(l)?;
        let s = self.patch << level;
        Ok((self.latent[1] / s, self.latent[2] / s))
    }

    /// Channel count of attention block `l`.
    pub fn block_channels(&self, l: usize) -> Result<usize> {
        Ok(self.base_channels * self.channel_mult[self.block_level(l)?])
    }

    /// Resolution level (0 = finest) of attention block `l`.
    pub fn block_level(&self, l: usize) -> Result<usize> {
        let mut i = 0;
        for (level, &n) in self.attn_encoder.iter().enumerate() {
            if l < i + n {
                return Ok(level);
            }
            i += n;
        }
        if l < i + self.attn_middle {
            return Ok(self.levels() - 1);
        }
        i += self.attn_middle;
        for (j, &n) in self.attn_decoder.iter().enumerate() {
            if l < i + n {
                return Ok(self.levels() - 1 - j);
            }
            i += n;
        }
        Err(Error::invalid(format!("attention block {l} out of range")))
    }

    /// Vico block with the fewest patches (first on ties).
    pub fn coarsest_vico_block(&self) -> Option<usize> {
        self.vico_blocks
            .iter()
            .copied()
            .min_by_key(|&l| self.block_grid(l).map(|(h, w)| h * w).unwrap_or(usize::MAX))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        let levels = self.levels();
        if levels == 0 || self.attn_encoder.len() != levels || self.attn_decoder.len() != levels {
            return bad("channel_mult, attn_encoder and attn_decoder need one entry per level".into());
        }
        if !self.patch.is_power_of_two() {
            return bad(format!("patch {} must be a power of two", self.patch));
        }
        let scale = self.patch << (levels - 1);
        let [c, h, w] = self.latent;
        if c == 0 || h == 0 || w == 0 || h % scale != 0 || w % scale != 0 {
            return bad(format!("latent {:?} must be divisible by {scale}", self.latent));
        }
        if self.heads == 0 || self.norm_groups == 0 {
            return bad("heads and norm_groups must be positive".into());
        }
        for (i, &m) in self.channel_mult.iter().enumerate() {
            let ch = self.base_channels * m;
            if ch == 0 || !ch.is_multiple_of(self.heads) || !ch.is_multiple_of(self.norm_groups) {
                return bad(format!(
                    "level {i} has {ch} channels, which must be a positive multiple of heads ({}) and norm_groups ({})",
                    self.heads, self.norm_groups
                ));
            }
        }
        if !self.base_channels.is_multiple_of(2) {
            return bad("base_channels must be even for the timestep embedding".into());
        }
        let dec = self.decoder_indices();
        let mut seen = Vec::new();
        for &l in &self.vico_blocks {
            if !dec.contains(&l) {
                return bad(format!("vico block {l} is not a decoder attention block ({dec:?})"));
            }
            if seen.contains(&l) {
                return bad(format!("vico block {l} listed twice"));
            }
            seen.push(l);
        }
        Ok(())
    }
}

/// Text condition shared by every attention block of one pass.
#[derive(Clone)]
pub struct TextCond {
    /// `c_T [B, D_t, d_text]`.
    pub c_t: Var,
    /// Keys kept per sequence, `[B, D_t]`.
    pub key_mask: Arc<Vec<bool>>,
}

pub struct ResBlock<F> {
    norm1: GroupNorm<F>,
    conv1: Conv2d<F>,
    time: Linear<F>,
    norm2: GroupNorm<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
}

impl<F: Element> ResBlock<F> {
    fn new(name: &str, c_in: usize, c_out: usize, d_time: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), groups, c_in),
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            time: Linear::new(&format!("{name}.time"), d_time, c_out, true, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), groups, c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(&format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)),
        }
    }

    fn forward(&self, ctx: &mut Ctx<F>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let h = ctx.g.silu(h);
        let h = self.conv1.forward(ctx, h)?;
        let t = self.time.forward(ctx, temb)?;
        let h = ctx.g.add_channel_bias(h, t)?;
        let h = self.norm2.forward(ctx, h)?;
        let h = ctx.g.silu(h);
        let h = self.conv2.forward(ctx, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        ctx.g.add(h, s)
    }
}

impl<F> Module<F> for ResBlock<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.norm1.visit(out);
        self.conv1.visit(out);
        self.time.visit(out);
        self.norm2.visit(out);
        self.conv2.visit(out);
        self.skip.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.norm1.visit_mut(out);
        self.conv1.visit_mut(out);
        self.time.visit_mut(out);
        self.norm2.visit_mut(out);
        self.conv2.visit_mut(out);
        self.skip.visit_mut(out);
    }
}

/// Spatial attention block: group norm, token projection, the text
/// cross-attention transformer `A_T`, projection back and a residual.
pub struct AttnBlock<F> {
    pub index: usize,
    norm: GroupNorm<F>,
    proj_in: Linear<F>,
    pub transformer: AttnFfBlock<F>,
    proj_out: Linear<F>,
}

impl<F: Element> AttnBlock<F> {
    fn new(index: usize, channels: usize, cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let name = format!("unet.attn{index}");
        Self {
            index,
            norm: GroupNorm::new(&format!("{name}.norm"), cfg.norm_groups, channels),
            proj_in: Linear::new(&format!("{name}.proj_in"), channels, channels, true, rng),
            transformer: AttnFfBlock::new(&format!("{name}.text"), channels, cfg.d_text, cfg.heads, false, rng),
            proj_out: Linear::new(&format!("{name}.proj_out"), channels, channels, true, rng),
        }
    }

    /// `A_T(x, c_T)` on tokens `x [B, N, C]`.
    pub fn text_attention(&self, ctx: &mut Ctx<F>, x: Var, cond: &TextCond) -> Result<AttnOut> {
        let masks = AttnMasks {
            key_mask: Some(cond.key_mask.clone()),
            ..AttnMasks::default()
        };
        self.transformer.forward(ctx, x, Some(cond.c_t), &masks)
    }

    fn forward(&self, ctx: &mut Ctx<F>, x: Var, cond: &TextCond, hook: &mut dyn AttnHook<F>) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = self.norm.forward(ctx, x)?;
        let n = ctx.g.reshape(n, &[b, c, h * w])?;
        let n = ctx.g.permute(n, &[0, 2, 1])?;
        let tokens = self.proj_in.forward(ctx, n)?;
        let tokens = hook.run(ctx, self, tokens, cond)?;
        let out = self.proj_out.forward(ctx, tokens)?;
        let out = ctx.g.permute(out, &[0, 2, 1])?;
        let out = ctx.g.reshape(out, &s)?;
        ctx.g.add(x, out)
    }
}

impl<F> Module<F> for AttnBlock<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.norm.visit(out);
        self.proj_in.visit(out);
        self.transformer.visit(out);
        self.proj_out.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.norm.visit_mut(out);
        self.proj_in.visit_mut(out);
        self.transformer.visit_mut(out);
        self.proj_out.visit_mut(out);
    }
}

/// Token-space computation of each attention block.
pub trait AttnHook<F: Element> {
    /// Maps the block's input tokens `[B, N, C]` to its output tokens.
    fn run(&mut self, ctx: &mut Ctx<F>, block: &AttnBlock<F>, tokens: Var, cond: &TextCond) -> Result<Var>;

    /// The pass stops once this returns true after a block.
    fn finished(&self, _l: usize) -> bool {
        false
    }
}

/// Plain `A_T` at every block, optionally keeping each block's probabilities.
#[derive(Default)]
pub struct VanillaHook {
    pub keep_maps: bool,
    pub maps: Vec<(usize, Var)>,
}

impl<F: Element> AttnHook<F> for VanillaHook {
    fn run(&mut self, ctx: &mut Ctx<F>, block: &AttnBlock<F>, tokens: Var, cond: &TextCond) -> Result<Var> {
        let a = block.text_attention(ctx, tokens, cond)?;
        if self.keep_maps {
            self.maps.push((block.index, a.probs));
        }
        Ok(a.out)
    }
}

struct Stage<F> {
    res: ResBlock<F>,
    attn: Vec<AttnBlock<F>>,
}

impl<F> Module<F> for Stage<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.res.visit(out);
        self.attn.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.res.visit_mut(out);
        self.attn.visit_mut(out);
    }
}

pub struct UNet<F> {
    pub cfg: UNetConfig,
    conv_in: Conv2d<F>,
    time1: Linear<F>,
    time2: Linear<F>,
    down: Vec<Stage<F>>,
    downsample: Vec<Conv2d<F>>,
    mid: Stage<F>,
    mid_res: ResBlock<F>,
    up: Vec<Stage<F>>,
    upsample: Vec<Conv2d<F>>,
    out_norm: GroupNorm<F>,
    out_conv: Conv2d<F>,
}

impl<F: Element> UNet<F> {
    /// Seeded random initialization.
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let ch: Vec<usize> = cfg.channel_mult.iter().map(|m| m * cfg.base_channels).collect();
        let levels = cfg.levels();
        let d_time = 4 * cfg.base_channels;
        let g = cfg.norm_groups;
        let [c_lat, ..] = cfg.latent;
        let conv_in = if cfg.patch == 1 {
            Conv2d::new("unet.conv_in", c_lat, ch[0], 3, 1, 1, rng)
        } else {
            Conv2d::new("unet.conv_in", c_lat, ch[0], cfg.patch, cfg.patch, 0, rng)
        };
        let time1 = Linear::new("unet.time1", cfg.base_channels, d_time, true, rng);
        let time2 = Linear::new("unet.time2", d_time, d_time, true, rng);

        let mut index = 0;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cur = ch[0];
        for level in 0..levels {
            let res = ResBlock::new(&format!("unet.down{level}.res"), cur, ch[level], d_time, g, rng);
            cur = ch[level];
            let attn = (0..cfg.attn_encoder[level])
                .map(|_| {
                    index += 1;
                    AttnBlock::new(index - 1, cur, &cfg, rng)
                })
                .collect();
            down.push(Stage { res, attn });
            if level + 1 < levels {
                downsample.push(Conv2d::new(
                    &format!("unet.down{level}.sample"),
                    cur,
                    ch[level + 1],
                    2,
                    2,
                    0,
                    rng,
                ));
                cur = ch[level + 1];
            }
        }
        let mid_attn = (0..cfg.attn_middle)
            .map(|_| {
                index += 1;
                AttnBlock::new(index - 1, cur, &cfg, rng)
            })
            .collect();
        let mid = Stage {
            res: ResBlock::new("unet.mid.res1", cur, cur, d_time, g, rng),
            attn: mid_attn,
        };
        let mid_res = ResBlock::new("unet.mid.res2", cur, cur, d_time, g, rng);
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for j in 0..levels {
            let level = levels - 1 - j;
            let res = ResBlock::new(&format!("unet.up{j}.res"), cur + ch[level], ch[level], d_time, g, rng);
            cur = ch[level];
            let attn = (0..cfg.attn_decoder[j])
                .map(|_| {
                    index += 1;
                    AttnBlock::new(index - 1, cur, &cfg, rng)
                })
                .collect();
            up.push(Stage { res, attn });
            if level > 0 {
                upsample.push(Conv2d::new(
                    &format!("unet.up{j}.sample"),
                    cur,
                    ch[level - 1],
                    3,
                    1,
                    1,
                    rng,
                ));
                cur = ch[level - 1];
            }
        }
        let out_norm = GroupNorm::new("unet.out_norm", g, cur);
        let out_conv = Conv2d::new("unet.out_conv", cur, c_lat, 3, 1, 1, rng);
        Ok(Self {
            cfg,
            conv_in,
            time1,
            time2,
            down,
            downsample,
            mid,
            mid_res,
            up,
            upsample,
            out_norm,
            out_conv,
        })
    }

    pub fn attn_block(&self, l: usize) -> Option<&AttnBlock<F>> {
        self.down
            .iter()
            .chain(std::iter::once(&self.mid))
            .chain(&self.up)
            .flat_map(|s| &s.attn)
            .find(|b| b.index == l)
    }

    /// Sinusoidal embedding of each timestep, `[B, base_channels]`.
    fn timestep_embedding(&self, ts: &[usize]) -> Tensor<F> {
        let d = self.cfg.base_channels;
        let half = d / 2;
        Tensor::from_fn(&[ts.len(), d], |i| {
            let (b, k) = (i / d, i % d);
            let freq = (-(10000f64.ln()) * (k % half) as f64 / half as f64).exp();
            let arg = ts[b] as f64 * freq;
            F::of(if k < half { arg.sin() } else { arg.cos() })
        })
    }

    fn check_input(&self, ctx: &Ctx<F>, z: Var, ts: &[usize]) -> Result<()> {
        let s = ctx.g.shape(z);
        let [c, h, w] = self.cfg.latent;
        if s.len() != 4 || s[1..] != [c, h, w] || s[0] != ts.len() {
            return Err(Error::shape("unet input", s, &[ts.len(), c, h, w]));
        }
        Ok(())
    }

    /// Full pass with `hook` computing every attention block's token map.
    /// Returns `None` when the hook finished the pass early.
    pub fn forward_hooked(
        &self,
        ctx: &mut Ctx<F>,
        z: Var,
        ts: &[usize],
        cond: &TextCond,
        hook: &mut dyn AttnHook<F>,
    ) -> Result<Option<Var>> {
        self.check_input(ctx, z, ts)?;
        let temb = ctx.constant(&self.timestep_embedding(ts));
        let temb = self.time1.forward(ctx, temb)?;
        let temb = ctx.g.silu(temb);
        let temb = self.time2.forward(ctx, temb)?;
        let temb = ctx.g.silu(temb);

        macro_rules! attn {
            ($stage:expr, $x:ident) => {
                for block in &$stage.attn {
                    $x = block.forward(ctx, $x, cond, hook)?;
                    if hook.finished(block.index) {
                        return Ok(None);
                    }
                }
            };
        }

        let mut x = self.conv_in.forward(ctx, z)?;
        let mut skips = Vec::new();
        for (level, stage) in self.down.iter().enumerate() {
            x = stage.res.forward(ctx, x, temb)?;
            attn!(stage, x);
            skips.push(x);
            if let Some(ds) = self.downsample.get(level) {
                x = ds.forward(ctx, x)?;
            }
        }
        x = self.mid.res.forward(ctx, x, temb)?;
        attn!(self.mid, x);
        x = self.mid_res.forward(ctx, x, temb)?;
        for (j, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            x = ctx.g.concat(&[x, skip], 1)?;
            x = stage.res.forward(ctx, x, temb)?;
            attn!(stage, x);
            if let Some(us) = self.upsample.get(j) {
                x = ctx.g.upsample2x(x)?;
                x = us.forward(ctx, x)?;
            }
        }
        let mut p = self.cfg.patch;
        while p > 1 {
            x = ctx.g.upsample2x(x)?;
            p /= 2;
        }
        x = self.out_norm.forward(ctx, x)?;
        x = ctx.g.silu(x);
        Ok(Some(self.out_conv.forward(ctx, x)?))
    }

    /// Vanilla ε̂ plus every block's text-attention probabilities.
    pub fn forward_denoise(
        &self,
        ctx: &mut Ctx<F>,
        z: Var,
        ts: &[usize],
        cond: &TextCond,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let mut hook = VanillaHook {
            keep_maps: true,
            maps: Vec::new(),
        };
        let eps = self
            .forward_hooked(ctx, z, ts, cond, &mut hook)?
            .expect("vanilla hook runs to completion");
        Ok((eps, hook.maps))
    }
}

impl<F> Module<F> for UNet<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.conv_in.visit(out);
        self.time1.visit(out);
        self.time2.visit(out);
        self.down.visit(out);
        self.downsample.visit(out);
        self.mid.visit(out);
        self.mid_res.visit(out);
        self.up.visit(out);
        self.upsample.visit(out);
        self.out_norm.visit(out);
        self.out_conv.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.conv_in.visit_mut(out);
        self.time1.visit_mut(out);
        self.time2.visit_mut(out);
        self.down.visit_mut(out);
        self.downsample.visit_mut(out);
        self.mid.visit_mut(out);
        self.mid_res.visit_mut(out);
        self.up.visit_mut(out);
        self.upsample.visit_mut(out);
        self.out_norm.visit_mut(out);
        self.out_conv.visit_mut(out);
    }
}
