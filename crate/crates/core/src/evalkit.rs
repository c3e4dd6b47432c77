//! Feature-similarity metrics with pluggable embedders, and mask IoU.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, Linear};
use crate::numerics::Tensor;
use crate::text::{tokenize_without_placeholder, TextEncoder};

/// Deterministic frozen map from images and/or text to vectors.
pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;

    /// `image` is a latent `[C, H, W]`.
    fn embed_image(&self, _image: &Tensor<f32>) -> Result<Vec<f64>> {
        Err(Error::invalid(format!(
            "embedder `{}` does not embed images",
            self.name()
        )))
    }

    fn embed_text(&self, _prompt: &str) -> Result<Vec<f64>> {
        Err(Error::invalid(format!(
            "embedder `{}` does not embed text",
            self.name()
        )))
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.is_empty() || u.len() != v.len() {
        return Err(Error::shape("cosine_sim", &[u.len()], &[v.len()]));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine_sim of a zero-norm vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Per-pair similarities and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub mean: f64,
    pub pairs: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean cosine over all (generated, real) pairs.
pub fn image_similarity(
    generated: &[Tensor<f32>],
    real: &[Tensor<f32>],
    embedder: &dyn Embedder,
) -> Result<Similarity> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::invalid("image_similarity of an empty set"));
    }
    let g = generated
        .iter()
        .map(|x| embedder.embed_image(x))
        .collect::<Result<Vec<_>>>()?;
    let r = real
        .iter()
        .map(|x| embedder.embed_image(x))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(g.len() * r.len());
    for a in &g {
        for b in &r {
            pairs.push(cosine_sim(a, b)?);
        }
    }
    Ok(Similarity {
        mean: mean(&pairs),
        pairs,
    })
}

/// Prompt text with the placeholder slot and its surrounding whitespace
/// removed.
pub fn strip_placeholder(prompt: &str) -> String {
    prompt
        .replace("{}", " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mean cosine between each generated image and the prompt, embedded
/// without its placeholder.
pub fn text_similarity(
    generated: &[Tensor<f32>],
    prompt: &str,
    image_embedder: &dyn Embedder,
    text_embedder: &dyn Embedder,
) -> Result<Similarity> {
    if generated.is_empty() {
        return Err(Error::invalid("text_similarity of an empty set"));
    }
    if image_embedder.dim() != text_embedder.dim() {
        return Err(Error::shape(
            "text_similarity embedders",
            &[image_embedder.dim()],
            &[text_embedder.dim()],
        ));
    }
    let t = text_embedder.embed_text(&strip_placeholder(prompt))?;
    let pairs = generated
        .iter()
        .map(|x| cosine_sim(&image_embedder.embed_image(x)?, &t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Similarity {
        mean: mean(&pairs),
        pairs,
    })
}

/// Downsamples an `h × w` binary grid to `gh × gw` by majority vote: a cell
/// is set when strictly more than half of its pixels are.
pub fn downsample_majority(truth: &[bool], h: usize, w: usize, gh: usize, gw: usize) -> Result<Vec<bool>> {
    if truth.len() != h * w || gh == 0 || gw == 0 || !h.is_multiple_of(gh) || !w.is_multiple_of(gw) {
        return Err(Error::shape("downsample_majority", &[h, w], &[gh, gw]));
    }
    let (sy, sx) = (h / gh, w / gw);
    Ok((0..gh * gw)
        .map(|c| {
            let (cy, cx) = (c / gw, c % gw);
            let on = (0..sy)
                .flat_map(|y| (0..sx).map(move |x| (cy * sy + y) * w + cx * sx + x))
                .filter(|&i| truth[i])
                .count();
            2 * on > sy * sx
        })
        .collect())
}

/// `|∩| / |∪|` of two equal-length masks; 1 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("iou", &[a.len()], &[b.len()]));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of a `gh × gw` predicted mask against an `h × w` ground truth
/// downsampled by majority vote.
pub fn mask_iou(pred: &[bool], grid: (usize, usize), truth: &[bool], truth_hw: (usize, usize)) -> Result<f64> {
    if pred.len() != grid.0 * grid.1 {
        return Err(Error::shape("mask_iou", &[pred.len()], &[grid.0, grid.1]));
    }
    let t = downsample_majority(truth, truth_hw.0, truth_hw.1, grid.0, grid.1)?;
    iou(pred, &t)
}

/// Seeded random convolutional feature stack: stride-2 4×4 convolutions with
/// SiLU, global average pooling, then a linear head.
pub struct ConvEmbedder {
    convs: Vec<Conv2d<f32>>,
    head: Linear<f32>,
    dim: usize,
}

impl ConvEmbedder {
    pub fn new(in_channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [in_channels, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&format!("embed.conv{i}"), w[0], w[1], 4, 2, 1, &mut rng))
            .collect();
        Self {
            convs,
            head: Linear::new("embed.head", widths[3], dim, false, &mut rng),
            dim,
        }
    }
}

impl Embedder for ConvEmbedder {
    fn name(&self) -> &str {
        "conv-random"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("embed_image", s, &[0, 0, 0]));
        }
        let mut ctx = Ctx::<f32>::frozen();
        let mut x = ctx.constant(&image.reshape(&[1, s[0], s[1], s[2]])?);
        for c in &self.convs {
            x = c.forward(&mut ctx, x)?;
            x = ctx.g.silu(x);
        }
        let (ch, hw) = {
            let xs = ctx.g.shape(x);
            (xs[1], xs[2] * xs[3])
        };
        let flat = ctx.g.reshape(x, &[1, ch, hw])?;
        let ones = ctx.constant(&Tensor::full(&[hw, 1], 1.0 / hw as f32));
        let pooled = ctx.g.matmul(flat, ones)?;
        let pooled = ctx.g.reshape(pooled, &[1, ch])?;
        let out = self.head.forward(&mut ctx, pooled)?;
        Ok(ctx.value(out).data().iter().map(|&v| v as f64).collect())
    }
}

/// The frozen text encoder as an embedder: the output at the EOT position.
pub struct TextEmbedder<'a> {
    pub encoder: &'a TextEncoder<f32>,
}

impl Embedder for TextEmbedder<'_> {
    fn name(&self) -> &str {
        "text-encoder"
    }

    fn dim(&self) -> usize {
        self.encoder.cfg.d_text
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let e = self.encoder;
        let tokens = tokenize_without_placeholder(&e.vocab, prompt, e.cfg.context)?;
        let out = e.encode_value(&tokens)?;
        let d = e.cfg.d_text;
        Ok(out.data()[tokens.eot * d..(tokens.eot + 1) * d]
            .iter()
            .map(|&v| v as f64)
            .collect())
    }
}

/// Metrics for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub prompt: String,
    pub samples: usize,
    pub image_similarity: Similarity,
    pub text_similarity: Similarity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

/// Aggregates over all prompts plus the per-prompt breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub image_embedder: String,
    pub text_embedder: String,
    pub image_similarity: f64,
    pub text_similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
    pub samples: usize,
    pub per_prompt: Vec<PromptReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl MetricReport {
    /// Sample-weighted means of the per-prompt pair similarities.
    pub fn aggregate(image_embedder: &str, text_embedder: &str, per_prompt: Vec<PromptReport>) -> Result<Self> {
        if per_prompt.is_empty() {
            return Err(Error::invalid("metric report without prompts"));
        }
        let img: Vec<f64> = per_prompt
            .iter()
            .flat_map(|p| p.image_similarity.pairs.iter().copied())
            .collect();
        let txt: Vec<f64> = per_prompt
            .iter()
            .flat_map(|p| p.text_similarity.pairs.iter().copied())
            .collect();
        let ious: Vec<f64> = per_prompt.iter().filter_map(|p| p.mask_iou).collect();
        Ok(Self {
            image_embedder: image_embedder.into(),
            text_embedder: text_embedder.into(),
            image_similarity: mean(&img),
            text_similarity: mean(&txt),
            mask_iou: (!ious.is_empty()).then(|| mean(&ious)),
            samples: per_prompt.iter().map(|p| p.samples).sum(),
            per_prompt,
            notes: BTreeMap::new(),
        })
    }
}
