//! Word-level tokenizer and the frozen text encoder carrying the learnable
//! placeholder embedding S★.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttnFfBlock, AttnMasks, Ctx, LayerNorm, Module, Param};
use crate::numerics::{Element, Tensor, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOT: u32 = 2;
pub const PLACEHOLDER: u32 = 3;

/// Parameter name of the learnable S★ row.
pub const PLACEHOLDER_PARAM: &str = "text.placeholder";

/// Training prompt templates (the textual-inversion "small" set).
pub const TRAIN_TEMPLATES: &[&str] = &[
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a photo of my {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a photo of one {}",
    "a close-up photo of the {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a good photo of a {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "a photo of the large {}",
    "a photo of a cool {}",
    "a photo of a small {}",
];

/// Evaluation prompts for objects.
pub const EVAL_PROMPTS: &[&str] = &[
    "a {} in the jungle",
    "a {} in the snow",
    "a {} on the beach",
    "a {} on a cobblestone street",
    "a {} on top of pink fabric",
    "a {} on top of a wooden floor",
    "a {} with a city in the background",
    "a {} with a mountain in the background",
    "a {} with a blue house in the background",
    "a {} on top of a purple rug in a forest",
    "a {} with a wheat field in the background",
    "a {} with a tree and autumn leaves in the background",
    "a {} with the eiffel tower in the background",
    "a {} floating on top of water",
    "a {} floating in an ocean of milk",
    "a {} on top of green grass with sunflowers around it",
    "a {} on top of a mirror",
    "a {} on top of the sidewalk in a crowded street",
    "a {} on top of a dirt road",
    "a {} on top of a white rug",
    "a red {}",
    "a purple {}",
    "a shiny {}",
    "a wet {}",
    "a {} with japanese modern city street in the background",
    "a {} with a landscape from the moon",
    "a {} among the skyscrapers in new york city",
    "a {} with a beautiful sunset",
    "a {} in a movie theater",
    "a {} in a luxurious interior living room",
    "a {} in a dream of a distant galaxy",
];

/// Extra prompts for live subjects.
pub const EVAL_PROMPTS_LIVE: &[&str] = &[
    "a {} wearing a red hat",
    "a {} wearing a santa hat",
    "a {} wearing a rainbow scarf",
    "a {} wearing a black top hat and a monocle",
    "a {} in a chef outfit",
    "a {} in a firefighter outfit",
    "a {} in a police outfit",
    "a {} wearing pink glasses",
    "a {} wearing a yellow shirt",
    "a {} in a purple wizard outfit",
];

/// Initialization words for S★ and a few generic nouns.
const EXTRA_WORDS: &[&str] = &[
    "object",
    "animal",
    "toy",
    "sprite",
    "cat",
    "dog",
    "pot",
    "shape",
    "background",
];

/// Word table. Ids are dense: the four specials first, then words sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut all: Vec<&str> = Vec::new();
        for p in TRAIN_TEMPLATES.iter().chain(EVAL_PROMPTS).chain(EVAL_PROMPTS_LIVE) {
            all.extend(p.split_whitespace().filter(|w| *w != "{}"));
        }
        all.extend(EXTRA_WORDS);
        Self::from_words(all)
    }
}

impl Vocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<String> = words.into_iter().map(str::to_lowercase).collect();
        sorted.sort();
        sorted.dedup();
        let words = sorted
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, PLACEHOLDER + 1 + i as u32))
            .collect();
        Self { words }
    }

    /// Number of ids including the specials.
    pub fn len(&self) -> usize {
        self.words.len() + PLACEHOLDER as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.words
            .get(&word.to_lowercase())
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn words(&self) -> &BTreeMap<String, u32> {
        &self.words
    }
}

/// Padded token ids plus the S★ and EOT positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub s_star: Option<usize>,
    pub eot: usize,
}

impl TokenSequence {
    /// `s_star` for prompts that must contain the placeholder.
    pub fn s_star_index(&self) -> Result<usize> {
        self.s_star
            .ok_or_else(|| Error::invalid("token sequence has no placeholder"))
    }
}

fn split_words(prompt: &str) -> Vec<&str> {
    prompt.split_whitespace().collect()
}

/// Tokenizes a prompt with exactly one `{}` slot.
pub fn tokenize(vocab: &Vocabulary, prompt: &str, context: usize) -> Result<TokenSequence> {
    let slots = prompt.matches("{}").count();
    if slots != 1 {
        return Err(Error::PlaceholderCount(slots));
    }
    tokenize_words(vocab, &split_words(&prompt.replace("{}", " {} ")), context)
}

/// Tokenizes a prompt with the placeholder slot removed (for text metrics).
pub fn tokenize_without_placeholder(vocab: &Vocabulary, prompt: &str, context: usize) -> Result<TokenSequence> {
    let stripped = prompt.replace("{}", " ");
    tokenize_words(vocab, &split_words(&stripped), context)
}

fn tokenize_words(vocab: &Vocabulary, words: &[&str], context: usize) -> Result<TokenSequence> {
    let needed = words.len() + 2;
    if needed > context {
        return Err(Error::PromptTooLong { needed, max: context });
    }
    let mut ids = Vec::with_capacity(context);
    let mut s_star = None;
    ids.push(BOS);
    for w in words {
        if *w == "{}" {
            s_star = Some(ids.len());
            ids.push(PLACEHOLDER);
        } else {
            ids.push(vocab.id(w)?);
        }
    }
    let eot = ids.len();
    ids.push(EOT);
    ids.resize(context, PAD);
    Ok(TokenSequence { ids, s_star, eot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub d_text: usize,
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            context: 16,
            layers: 2,
            heads: 4,
            seed: 7,
        }
    }
}

/// Seeded random causal transformer encoder. Every weight is frozen except
/// the placeholder row, which lives outside the embedding table.
pub struct TextEncoder<F> {
    pub cfg: TextConfig,
    pub vocab: Vocabulary,
    embedding: Param<F>,
    positional: Param<F>,
    layers: Vec<AttnFfBlock<F>>,
    final_norm: LayerNorm<F>,
    placeholder: Param<F>,
}

impl<F: Element> TextEncoder<F> {
    pub fn new(cfg: TextConfig, vocab: Vocabulary) -> Result<Self> {
        if cfg.d_text == 0 || cfg.heads == 0 || !cfg.d_text.is_multiple_of(cfg.heads) {
            return Err(Error::invalid(format!(
                "d_text {} must be a positive multiple of heads {}",
                cfg.d_text, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_text;
        let embedding = Param::randn("text.embedding", &[vocab.len(), d], 1.0, &mut rng);
        let positional = Param::randn("text.positional", &[cfg.context, d], 0.1, &mut rng);
        let layers = (0..cfg.layers)
            .map(|i| AttnFfBlock::new(&format!("text.layer{i}"), d, d, cfg.heads, false, &mut rng))
            .collect();
        let final_norm = LayerNorm::new("text.final_norm", d);
        let placeholder = Param::new(PLACEHOLDER_PARAM, embedding.value.index0(PLACEHOLDER as usize)?);
        Ok(Self {
            cfg,
            vocab,
            embedding,
            positional,
            layers,
            final_norm,
            placeholder,
        })
    }

    pub fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        tokenize(&self.vocab, prompt, self.cfg.context)
    }

    /// Copies a vocabulary word's frozen row into S★.
    pub fn init_placeholder(&mut self, word: &str) -> Result<()> {
        let id = self.vocab.id(word)?;
        self.placeholder.value = self.embedding.value.index0(id as usize)?;
        Ok(())
    }

    pub fn placeholder(&self) -> &Tensor<F> {
        &self.placeholder.value
    }

    pub fn placeholder_param(&self) -> &Param<F> {
        &self.placeholder
    }

    pub fn set_placeholder(&mut self, v: Tensor<F>) -> Result<()> {
        if v.shape() != [self.cfg.d_text] {
            return Err(Error::shape("set_placeholder", &[self.cfg.d_text], v.shape()));
        }
        self.placeholder.value = v;
        Ok(())
    }

    /// Named write access; only the placeholder row may be written.
    pub fn set_param(&mut self, name: &str, v: Tensor<F>) -> Result<()> {
        if name == PLACEHOLDER_PARAM {
            return self.set_placeholder(v);
        }
        if self.frozen_params().iter().any(|p| p.name == name) {
            return Err(Error::FrozenParameter(name.to_string()));
        }
        Err(Error::invalid(format!("no text parameter named `{name}`")))
    }

    /// Every frozen parameter (the whole encoder except S★).
    pub fn frozen_params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.embedding, &self.positional];
        self.layers.visit(&mut v);
        self.final_norm.visit(&mut v);
        v
    }

    /// Key mask `[B, D_t]` keeping BOS..=EOT of each sequence.
    pub fn key_mask(&self, tokens: &[TokenSequence]) -> Vec<bool> {
        tokens
            .iter()
            .flat_map(|t| (0..self.cfg.context).map(move |k| k <= t.eot))
            .collect()
    }

    /// Encodes a batch into `c_T [B, D_t, d_text]`.
    pub fn encode(&self, ctx: &mut Ctx<F>, tokens: &[TokenSequence]) -> Result<Var> {
        let (b, n, d) = (tokens.len(), self.cfg.context, self.cfg.d_text);
        if b == 0 {
            return Err(Error::invalid("encode of an empty batch"));
        }
        let table = self.embedding.value.data();
        let pos = self.positional.value.data();
        let mut base = vec![F::zero(); b * n * d];
        let mut onehot = vec![F::zero(); b * n];
        for (bi, t) in tokens.iter().enumerate() {
            if t.ids.len() != n {
                return Err(Error::shape("encode", &[n], &[t.ids.len()]));
            }
            for (k, &id) in t.ids.iter().enumerate() {
                let dst = &mut base[(bi * n + k) * d..(bi * n + k + 1) * d];
                if id == PLACEHOLDER {
                    onehot[bi * n + k] = F::one();
                } else {
                    let id = id as usize;
                    if id >= self.vocab.len() {
                        return Err(Error::invalid(format!("token id {id} outside vocabulary")));
                    }
                    dst.copy_from_slice(&table[id * d..(id + 1) * d]);
                }
                for (o, &p) in dst.iter_mut().zip(&pos[k * d..(k + 1) * d]) {
                    *o = *o + p;
                }
            }
        }
        let base = ctx.constant(&Tensor::new(&[b, n, d], base)?);
        let onehot = ctx.constant(&Tensor::new(&[b, n, 1], onehot)?);
        let s_star = ctx.lift(&self.placeholder);
        let row = ctx.g.reshape(s_star, &[1, d])?;
        let placed = ctx.g.matmul(onehot, row)?;
        let mut x = ctx.g.add(base, placed)?;

        let causal = Tensor::from_fn(&[n, n], |i| if i % n > i / n { F::of(-1e9) } else { F::zero() });
        let masks = AttnMasks {
            score_bias: Some(ctx.constant(&causal)),
            ..AttnMasks::default()
        };
        for layer in &self.layers {
            x = layer.forward(ctx, x, None, &masks)?.out;
        }
        self.final_norm.forward(ctx, x)
    }

    /// Value-only encoding of a single prompt, `[D_t, d_text]`.
    pub fn encode_value(&self, tokens: &TokenSequence) -> Result<Tensor<F>> {
        let mut ctx = Ctx::frozen();
        let v = self.encode(&mut ctx, std::slice::from_ref(tokens))?;
        ctx.value(v).reshape(&[self.cfg.context, self.cfg.d_text])
    }
}

impl<F> Module<F> for TextEncoder<F> {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.embedding);
        out.push(&self.positional);
        self.layers.visit(out);
        self.final_norm.visit(out);
        out.push(&self.placeholder);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.embedding);
        out.push(&mut self.positional);
        self.layers.visit_mut(out);
        self.final_norm.visit_mut(out);
        out.push(&mut self.placeholder);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_coords, relative_error};

    fn encoder<F: Element>() -> TextEncoder<F> {
        TextEncoder::new(TextConfig::default(), Vocabulary::default()).unwrap()
    }

    #[test]
    fn tokenize_structure() {
        let v = Vocabulary::default();
        let t = tokenize(&v, "a photo of a {}", 16).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(
            &t.ids[..7],
            &[BOS, a, v.id("photo").unwrap(), v.id("of").unwrap(), a, PLACEHOLDER, EOT]
        );
        assert!(t.ids[7..].iter().all(|&i| i == PAD));
        assert_eq!((t.s_star, t.eot), (Some(5), 6));

        let t = tokenize(&v, "{}", 16).unwrap();
        assert_eq!((t.s_star, t.eot), (Some(1), 2));

        let t = tokenize(&v, "a {} on the beach", 16).unwrap();
        assert_eq!((t.s_star, t.eot), (Some(2), 6));
    }

    #[test]
    fn tokenize_errors() {
        let v = Vocabulary::default();
        assert!(matches!(tokenize(&v, "a photo", 16), Err(Error::PlaceholderCount(0))));
        assert!(matches!(tokenize(&v, "{} and {}", 16), Err(Error::PlaceholderCount(2))));
        assert!(matches!(tokenize(&v, "a zorblax {}", 16), Err(Error::UnknownWord(_))));
        assert!(matches!(
            tokenize(&v, "a a a a a a a a a a a a a a a {}", 16),
            Err(Error::PromptTooLong { .. })
        ));
    }

    #[test]
    fn every_shipped_prompt_fits_the_context() {
        let v = Vocabulary::default();
        for p in TRAIN_TEMPLATES.iter().chain(EVAL_PROMPTS).chain(EVAL_PROMPTS_LIVE) {
            let t = tokenize(&v, p, 16).unwrap();
            let i = t.s_star.unwrap();
            assert!(i < t.eot);
            assert_eq!(t.ids[i], PLACEHOLDER);
            assert_eq!(t.ids[t.eot], EOT);
        }
    }

    #[test]
    fn placeholder_removal() {
        let v = Vocabulary::default();
        let a = tokenize_without_placeholder(&v, "a photo of a {}", 16).unwrap();
        assert_eq!(a.s_star, None);
        assert_eq!(a.eot, 5);
    }

    #[test]
    fn vocabulary_ids_are_dense() {
        let v = Vocabulary::default();
        let mut ids: Vec<u32> = v.words().values().copied().collect();
        ids.sort();
        assert_eq!(ids.first(), Some(&(PLACEHOLDER + 1)));
        assert_eq!(*ids.last().unwrap() as usize, v.len() - 1);
    }

    #[test]
    fn encode_is_deterministic_and_depends_on_placeholder() {
        let mut enc = encoder::<f32>();
        let t = enc.tokenize("a photo of a {}").unwrap();
        let a = enc.encode_value(&t).unwrap();
        let b = enc.encode_value(&t).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[16, 32]);
        let mut p = enc.placeholder().clone();
        p.data_mut()[0] += 0.5;
        enc.set_placeholder(p).unwrap();
        let c = enc.encode_value(&t).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn causal_encoding_ignores_pad_positions() {
        let enc = encoder::<f64>();
        let t = enc.tokenize("a {}").unwrap();
        let mut u = t.clone();
        u.ids[10] = enc.vocab.id("beach").unwrap();
        let (a, b) = (enc.encode_value(&t).unwrap(), enc.encode_value(&u).unwrap());
        assert_eq!(&a.data()[..(t.eot + 1) * 32], &b.data()[..(t.eot + 1) * 32]);
    }

    #[test]
    fn placeholder_setters() {
        let mut enc = encoder::<f32>();
        enc.init_placeholder("object").unwrap();
        let id = enc.vocab.id("object").unwrap() as usize;
        assert!(enc.placeholder().bit_eq(&enc.embedding.value.index0(id).unwrap()));
        assert!(enc.init_placeholder("zorblax").is_err());
        let v = Tensor::from_fn(&[32], |i| i as f32);
        enc.set_placeholder(v.clone()).unwrap();
        assert!(enc.placeholder().bit_eq(&v));
        assert!(enc.set_placeholder(Tensor::zeros(&[31])).is_err());
        assert!(matches!(
            enc.set_param("text.embedding", Tensor::zeros(&[1])),
            Err(Error::FrozenParameter(_))
        ));
    }

    #[test]
    fn gradient_reaches_only_the_placeholder() {
        let enc = encoder::<f64>();
        let t = enc.tokenize("a {} on the beach").unwrap();
        let loss_of = |enc: &TextEncoder<f64>, trainable: bool| -> (f64, Option<Tensor<f64>>) {
            let mut ctx = Ctx::new(move |n| trainable && n == PLACEHOLDER_PARAM);
            let c = enc.encode(&mut ctx, std::slice::from_ref(&t)).unwrap();
            let w = ctx.constant(&Tensor::from_fn(&[1, 16, 32], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5));
            let p = ctx.g.mul(c, w).unwrap();
            let l = ctx.g.sum(p);
            let value = ctx.value(l).item();
            if !trainable {
                return (value, None);
            }
            let grads = ctx.g.backward(l).unwrap();
            assert_eq!(ctx.g.params().len(), 1);
            (value, ctx.g.param_grads(&grads).remove(PLACEHOLDER_PARAM))
        };
        let analytic = loss_of(&enc, true).1.unwrap();
        let coords: Vec<(usize, usize)> = (0..32).map(|i| (0, i)).collect();
        let numeric = finite_diff_coords(
            |p| {
                let mut e = encoder::<f64>();
                e.set_placeholder(p[0].clone())?;
                Ok(loss_of(&e, false).0)
            },
            &[enc.placeholder().clone()],
            &coords,
            1e-3,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-3, "{a} vs {n}");
        }
    }
}
