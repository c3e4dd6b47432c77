//! Training loop for S★ and the image attention blocks over a frozen backbone.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{generate_warmup_corpus, WarmupCorpusConfig};
use crate::diffusion::{denoising_loss, q_sample_batch, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::layers::{param_hash, Ctx, Module, Param};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::text::{tokenize_without_placeholder, TokenSequence, Vocabulary, PLACEHOLDER_PARAM, TRAIN_TEMPLATES};
use crate::vico::{is_trainable, ForwardOptions, ModelConfig, PatchMask, ViCoModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optional pre-training of θ alone, on a generic sprite corpus, before it
/// is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Word filling the template slot for images with an object.
    pub object_word: String,
    /// Word filling the template slot for empty backgrounds.
    pub empty_word: String,
    /// Weight of the attention grounding term.
    pub grounding: f64,
    pub seed: u64,
    pub corpus: WarmupCorpusConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: 1e-3,
            batch: 4,
            object_word: "object".into(),
            empty_word: "background".into(),
            grounding: 1.0,
            seed: 17,
            corpus: WarmupCorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_s_star: f64,
    pub lr_psi: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint_every: usize,
    pub use_mask: bool,
    pub otsu_bins: usize,
    pub adam: AdamConfig,
    pub warmup: WarmupConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            lr_s_star: 5e-3,
            lr_psi: 1e-5,
            batch: 4,
            steps: 400,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 100,
            use_mask: true,
            otsu_bins: 256,
            adam: AdamConfig::default(),
            warmup: WarmupConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if !(self.lr_s_star > 0.0 && self.lr_psi > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.otsu_bins < 2 {
            return bad("otsu_bins must be at least 2");
        }
        if self.warmup.steps > 0 && !(self.warmup.lr > 0.0 && self.warmup.batch > 0) {
            return bad("warm-up needs a positive lr and batch");
        }
        if !(self.warmup.grounding >= 0.0 && self.warmup.grounding.is_finite()) {
            return bad("warmup.grounding must be finite and non-negative");
        }
        Ok(())
    }

    /// Steps after which a checkpoint is written; the final step is always
    /// included.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = if self.checkpoint_every == 0 {
            Vec::new()
        } else {
            (1..=self.steps).filter(|s| s % self.checkpoint_every == 0).collect()
        };
        if self.steps > 0 && v.last() != Some(&self.steps) {
            v.push(self.steps);
        }
        v
    }
}

/// Training images as latents `[C, H, W]` plus prompt templates.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    pub images: Vec<Tensor<F>>,
    pub templates: Vec<String>,
}

impl<F: Element> Dataset<F> {
    pub fn new(images: Vec<Tensor<F>>, templates: Vec<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset has no images"));
        }
        if templates.is_empty() {
            return Err(Error::invalid("dataset has no prompt templates"));
        }
        if let Some(n) = templates.iter().map(|t| t.matches("{}").count()).find(|&n| n != 1) {
            return Err(Error::PlaceholderCount(n));
        }
        let s = images[0].shape().to_vec();
        if let Some(im) = images.iter().find(|im| im.shape() != s.as_slice()) {
            return Err(Error::shape("dataset image", &s, im.shape()));
        }
        Ok(Self { images, templates })
    }

    pub fn with_default_templates(images: Vec<Tensor<F>>) -> Result<Self> {
        Self::new(images, TRAIN_TEMPLATES.iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Indices chosen for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub targets: Vec<usize>,
    pub references: Vec<usize>,
    pub templates: Vec<usize>,
}

/// Targets in sequential order `(step·batch + k) mod n`; each reference drawn
/// uniformly from the other images, or the target itself when `n == 1`.
pub fn plan_batch(n: usize, n_templates: usize, step: usize, batch: usize, rng: &mut impl Rng) -> Result<BatchPlan> {
    if n == 0 || n_templates == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let mut plan = BatchPlan {
        targets: Vec::with_capacity(batch),
        references: Vec::with_capacity(batch),
        templates: Vec::with_capacity(batch),
    };
    for k in 0..batch {
        let target = (step * batch + k) % n;
        let reference = if n == 1 {
            target
        } else {
            let r = rng.random_range(0..n - 1);
            if r >= target {
                r + 1
            } else {
                r
            }
        };
        plan.targets.push(target);
        plan.references.push(reference);
        plan.templates.push(rng.random_range(0..n_templates));
    }
    Ok(plan)
}

/// Stacked inputs of one training batch.
pub struct Batch<F> {
    pub plan: BatchPlan,
    pub targets: Tensor<F>,
    pub references: Tensor<F>,
    pub prompts: Vec<String>,
}

pub fn sample_batch<F: Element>(data: &Dataset<F>, step: usize, batch: usize, rng: &mut impl Rng) -> Result<Batch<F>> {
    let plan = plan_batch(data.len(), data.templates.len(), step, batch, rng)?;
    let gather = |ix: &[usize]| Tensor::stack(&ix.iter().map(|&i| data.images[i].clone()).collect::<Vec<_>>());
    Ok(Batch {
        targets: gather(&plan.targets)?,
        references: gather(&plan.references)?,
        prompts: plan.templates.iter().map(|&i| data.templates[i].clone()).collect(),
        plan,
    })
}

/// One optimizer group with its own learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<String>,
}

/// Adam with per-group learning rates.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub groups: Vec<ParamGroup>,
    pub t: u64,
    /// First and second moments per parameter.
    pub moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Element> Adam<F> {
    pub fn new(cfg: AdamConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if let Some(p) = g.params.iter().find(|p| !seen.insert(p.as_str())) {
                return Err(Error::invalid(format!("parameter `{p}` registered twice")));
            }
        }
        Ok(Self {
            cfg,
            groups,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Every parameter name the optimizer updates.
    pub fn registered(&self) -> BTreeSet<String> {
        self.groups.iter().flat_map(|g| g.params.iter().cloned()).collect()
    }

    /// Updates each registered parameter found in `params` from `grads`.
    pub fn step(&mut self, params: Vec<&mut Param<F>>, grads: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr_of: BTreeMap<&str, f64> = self
            .groups
            .iter()
            .flat_map(|g| g.params.iter().map(move |p| (p.as_str(), g.lr)))
            .collect();
        for p in params {
            let Some(&lr) = lr_of.get(p.name.as_str()) else {
                continue;
            };
            let shape = p.value.shape().to_vec();
            let g = match grads.get(&p.name) {
                Some(g) => g.clone(),
                None => Tensor::zeros(&shape),
            };
            if g.shape() != shape.as_slice() {
                return Err(Error::shape("adam gradient", &shape, g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for (i, gi) in g.data().iter().enumerate() {
                let gi = gi.f64();
                let mi = c.beta1 * md[i].f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * vd[i].f64() + (1.0 - c.beta2) * gi * gi;
                md[i] = F::of(mi);
                vd[i] = F::of(vi);
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                pd[i] = F::of(pd[i].f64() - step);
            }
        }
        Ok(())
    }
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub denoise: f64,
    pub reg: f64,
}

/// Hashes of every frozen parameter, by name.
pub fn frozen_hashes<F: Element>(model: &ViCoModel<F>) -> BTreeMap<String, String> {
    model
        .frozen_params()
        .into_iter()
        .map(|p| (p.name.clone(), param_hash(p)))
        .collect()
}

/// Names of frozen parameters whose hash differs from `baseline` (or that
/// are missing from either side).
pub fn assert_frozen<F: Element>(model: &ViCoModel<F>, baseline: &BTreeMap<String, String>) -> Vec<String> {
    let now = frozen_hashes(model);
    let mut changed: Vec<String> = now
        .iter()
        .filter(|(n, h)| baseline.get(*n) != Some(*h))
        .map(|(n, _)| n.clone())
        .collect();
    changed.extend(baseline.keys().filter(|n| !now.contains_key(*n)).cloned());
    changed
}

/// Graph nodes of the training objective.
pub struct Objective {
    pub total: Var,
    pub denoise: Var,
    pub reg: Var,
}

/// Denoising MSE plus `lambda` times the attention regularizer.
#[allow(clippy::too_many_arguments)]
pub fn objective<F: Element>(
    model: &ViCoModel<F>,
    ctx: &mut Ctx<F>,
    z_t: &Tensor<F>,
    ts: &[usize],
    tokens: &[TokenSequence],
    references: &Tensor<F>,
    eps: &Tensor<F>,
    lambda: f64,
    opts: ForwardOptions,
) -> Result<Objective> {
    objective_pinned(model, ctx, z_t, ts, tokens, references, eps, lambda, opts, None).map(|(o, _)| o)
}

/// [`objective`] with optionally pinned object masks; also returns the masks
/// the pass used.
#[allow(clippy::too_many_arguments)]
pub fn objective_pinned<F: Element>(
    model: &ViCoModel<F>,
    ctx: &mut Ctx<F>,
    z_t: &Tensor<F>,
    ts: &[usize],
    tokens: &[TokenSequence],
    references: &Tensor<F>,
    eps: &Tensor<F>,
    lambda: f64,
    opts: ForwardOptions,
    pinned: Option<&BTreeMap<usize, Vec<PatchMask>>>,
) -> Result<(Objective, BTreeMap<usize, Vec<PatchMask>>)> {
    let out = model.forward_pinned(ctx, z_t, ts, tokens, references, opts, pinned)?;
    let eps_v = ctx.constant(eps);
    let denoise = denoising_loss(&mut ctx.g, eps_v, out.eps)?;
    let reg = match out.reg {
        Some(r) => r,
        None => ctx.constant(&Tensor::scalar(F::zero())),
    };
    let weighted = ctx.g.scale(reg, F::of(lambda));
    let total = ctx.g.add(denoise, weighted)?;
    Ok((Objective { total, denoise, reg }, out.masks))
}

/// Model, optimizer and RNG of a training run.
pub struct TrainState<F> {
    pub cfg: TrainConfig,
    pub schedule: ScheduleConfig,
    pub model: ViCoModel<F>,
    pub adam: Adam<F>,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub baseline: BTreeMap<String, String>,
}

impl<F: Element> TrainState<F> {
    /// Wraps `model`, whose backbone is treated as frozen from here on.
    pub fn new(model: ViCoModel<F>, cfg: TrainConfig, schedule: ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = vec![
            ParamGroup {
                name: "s_star".into(),
                lr: cfg.lr_s_star,
                params: vec![PLACEHOLDER_PARAM.into()],
            },
            ParamGroup {
                name: "psi".into(),
                lr: cfg.lr_psi,
                params: model.psi.params().iter().map(|p| p.name.clone()).collect(),
            },
        ];
        let adam = Adam::new(cfg.adam.clone(), groups)?;
        let baseline = frozen_hashes(&model);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            schedule,
            model,
            adam,
            step: 0,
            baseline,
        })
    }

    /// Names the model marks trainable: S★ and every ψ parameter.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.model.trainable_params().iter().map(|p| p.name.clone()).collect()
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            use_mask: self.cfg.use_mask,
            otsu_bins: self.cfg.otsu_bins,
            regularizer: true,
        }
    }

    /// One optimization step on the next batch.
    pub fn train_step(&mut self, data: &Dataset<F>, sched: &NoiseSchedule) -> Result<StepLoss> {
        let batch = sample_batch(data, self.step, self.cfg.batch, &mut self.rng)?;
        let b = self.cfg.batch;
        let ts: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..sched.len())).collect();
        let eps = Tensor::<F>::randn(batch.targets.shape(), 1.0, &mut self.rng);
        let z_t = q_sample_batch(&batch.targets, &ts, &eps, sched)?;
        let tokens = batch
            .prompts
            .iter()
            .map(|p| self.model.text.tokenize(p))
            .collect::<Result<Vec<TokenSequence>>>()?;

        let mut ctx = Ctx::new(is_trainable);
        let Objective { total, denoise, reg } = objective(
            &self.model,
            &mut ctx,
            &z_t,
            &ts,
            &tokens,
            &batch.references,
            &eps,
            self.cfg.lambda,
            self.forward_options(),
        )?;
        let (d, r) = (ctx.value(denoise).item().f64(), ctx.value(reg).item().f64());
        let loss = StepLoss {
            step: self.step,
            total: d + self.cfg.lambda * r,
            denoise: d,
            reg: r,
        };
        if !(loss.total.is_finite() && loss.denoise.is_finite() && loss.reg.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {}: total {}, denoise {}, reg {} (targets {:?}, t {:?})",
                self.step, loss.total, loss.denoise, loss.reg, batch.plan.targets, ts
            )));
        }
        let grads = ctx.g.backward(total)?;
        let grads = ctx.g.param_grads(&grads);
        if let Some(extra) = grads.keys().find(|n| !self.adam.registered().contains(*n)) {
            return Err(Error::FrozenParameter(extra.clone()));
        }
        self.adam.step(self.model.trainable_params_mut(), &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining steps up to `cfg.steps`, calling `after_step` after
    /// each one.
    pub fn fit(
        &mut self,
        data: &Dataset<F>,
        sched: &NoiseSchedule,
        mut after_step: impl FnMut(&Self, &StepLoss) -> Result<()>,
    ) -> Result<Vec<StepLoss>> {
        let mut curve = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let loss = self.train_step(data, sched)?;
            after_step(self, &loss)?;
            curve.push(loss);
        }
        Ok(curve)
    }
}

/// Per-patch object coverage of a `size × size` mask on a `gh × gw` grid.
pub fn patch_coverage(mask: &[bool], size: usize, gh: usize, gw: usize) -> Result<Vec<f64>> {
    if mask.len() != size * size || gh == 0 || gw == 0 || !size.is_multiple_of(gh) || !size.is_multiple_of(gw) {
        return Err(Error::shape("patch_coverage", &[size, size], &[gh, gw]));
    }
    let (sy, sx) = (size / gh, size / gw);
    Ok((0..gh * gw)
        .map(|c| {
            let (cy, cx) = (c / gw, c % gw);
            let on = (0..sy)
                .flat_map(|y| (0..sx).map(move |x| (cy * sy + y) * size + cx * sx + x))
                .filter(|&i| mask[i])
                .count();
            on as f64 / (sy * sx) as f64
        })
        .collect())
}

/// `Σ ‖A_k/max A_k − coverage‖²` over the given token columns of one batch
/// element's `probs [B, heads, N, D_t]`, averaged over heads.
fn grounding_term<F: Element>(
    g: &mut Graph<F>,
    probs: Var,
    item: usize,
    tokens: &[usize],
    coverage: &[f64],
) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    let (h, n) = (s[1], s[2]);
    if coverage.len() != n {
        return Err(Error::shape("grounding", &[n], &[coverage.len()]));
    }
    let target = g.constant(&Tensor::from_fn(&[h, n], |i| F::of(coverage[i % n])));
    let one = g.narrow(probs, 0, item, 1)?;
    let mut total: Option<Var> = None;
    for &k in tokens {
        let c = g.narrow(one, 3, k, 1)?;
        let c = g.reshape(c, &[h, n])?;
        let c = g.max_normalize_last(c)?;
        let d = g.sub(c, target)?;
        let sq = g.mul(d, d)?;
        let part = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("grounding needs at least one token"))?;
    Ok(g.scale(total, F::of(1.0 / h as f64)))
}

/// Trains the U-Net θ alone on the generic warm-up corpus: the denoising
/// loss plus, for images with an object, `grounding` times the distance
/// between the object word's and EOT's attention columns and the object's
/// patch coverage at every attention block. Returns the loss per step.
pub fn warm_up_backbone<F: Element>(
    model: &mut ViCoModel<F>,
    templates: &[String],
    sched: &NoiseSchedule,
    cfg: &WarmupConfig,
) -> Result<Vec<f64>> {
    let [_, h, w] = model.cfg.unet.latent;
    if cfg.corpus.image_size != h || h != w {
        return Err(Error::invalid(format!(
            "warm-up corpus size {} does not match the {h}x{w} latent",
            cfg.corpus.image_size
        )));
    }
    if templates.is_empty() {
        return Err(Error::invalid("warm-up needs prompt templates"));
    }
    let object_id = model.text.vocab.id(&cfg.object_word)?;
    model.text.vocab.id(&cfg.empty_word)?;
    let blocks: Vec<usize> = (0..model.cfg.unet.total_blocks())
        .filter(|&l| model.unet.attn_block(l).is_some())
        .collect();
    let mut corpus = Vec::new();
    for (im, mask) in generate_warmup_corpus(&cfg.corpus)? {
        let coverage = match &mask {
            Some(m) => Some(
                blocks
                    .iter()
                    .map(|&l| {
                        let (gh, gw) = model.cfg.unet.block_grid(l)?;
                        Ok((l, patch_coverage(m, h, gh, gw)?))
                    })
                    .collect::<Result<BTreeMap<usize, Vec<f64>>>>()?,
            ),
            None => None,
        };
        corpus.push((im.to_latent::<F>(), coverage));
    }
    let names: Vec<String> = model.unet.params().iter().map(|p| p.name.clone()).collect();
    let mut adam = Adam::new(
        AdamConfig::default(),
        vec![ParamGroup {
            name: "unet".into(),
            lr: cfg.lr,
            params: names,
        }],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch);
        let mut tokens = Vec::with_capacity(cfg.batch);
        let mut picked = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let k = rng.random_range(0..corpus.len());
            let word = if corpus[k].1.is_some() {
                &cfg.object_word
            } else {
                &cfg.empty_word
            };
            let prompt = templates[rng.random_range(0..templates.len())].replace("{}", word);
            items.push(corpus[k].0.clone());
            tokens.push(tokenize_without_placeholder(
                &model.text.vocab,
                &prompt,
                model.text.cfg.context,
            )?);
            picked.push(k);
        }
        let z0 = Tensor::stack(&items)?;
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..sched.len())).collect();
        let eps = Tensor::<F>::randn(z0.shape(), 1.0, &mut rng);
        let z_t = q_sample_batch(&z0, &ts, &eps, sched)?;
        let mut ctx = Ctx::new(|n: &str| n.starts_with("unet."));
        let cond = model.text_cond(&mut ctx, &tokens)?;
        let z = ctx.constant(&z_t);
        let (eps_hat, maps) = model.unet.forward_denoise(&mut ctx, z, &ts, &cond)?;
        let e = ctx.constant(&eps);
        let mut loss = denoising_loss(&mut ctx.g, e, eps_hat)?;
        if cfg.grounding > 0.0 {
            let mut ground: Option<Var> = None;
            let mut terms = 0usize;
            for (b, &k) in picked.iter().enumerate() {
                let Some(cov) = &corpus[k].1 else { continue };
                let tok = &tokens[b];
                let word = tok
                    .ids
                    .iter()
                    .position(|&id| id == object_id)
                    .ok_or_else(|| Error::invalid("template lost the object word"))?;
                for &(l, probs) in &maps {
                    let t = grounding_term(&mut ctx.g, probs, b, &[word, tok.eot], &cov[&l])?;
                    ground = Some(match ground {
                        Some(acc) => ctx.g.add(acc, t)?,
                        None => t,
                    });
                    terms += 1;
                }
            }
            if let Some(gr) = ground {
                let gr = ctx.g.scale(gr, F::of(cfg.grounding / terms as f64));
                loss = ctx.g.add(loss, gr)?;
            }
        }
        let lv = ctx.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("warm-up loss at step {step}")));
        }
        let grads = ctx.g.backward(loss)?;
        let grads = ctx.g.param_grads(&grads);
        adam.step(model.unet.params_mut(), &grads)?;
        curve.push(lv);
    }
    Ok(curve)
}

/// Writes the loss curve as CSV with columns `step,total,denoise,reg`.
pub fn write_loss_csv(path: &Path, curve: &[StepLoss]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,total,denoise,reg")?;
    for l in curve {
        writeln!(f, "{},{:e},{:e},{:e}", l.step, l.total, l.denoise, l.reg)?;
    }
    f.flush()?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VICOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string; it does not fit JSON numbers.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub vocab: Vocabulary,
    pub step: usize,
    pub adam_t: u64,
    pub rng: RngState,
    /// Per-parameter hashes of the frozen backbone at the start of training.
    pub frozen_hashes: BTreeMap<String, String>,
    /// Digest over all frozen U-Net hashes.
    pub unet_hash: String,
    /// Digest over all frozen text-encoder hashes.
    pub text_hash: String,
}

fn group_digest(hashes: &BTreeMap<String, String>, prefix: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (n, v) in hashes.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.update(n.as_bytes());
        h.update(v.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
}

/// Serializes the state to bytes. Every parameter (frozen and trainable) and
/// the optimizer moments are stored as 32-bit blobs.
pub fn checkpoint_bytes<F: Element>(state: &TrainState<F>) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model: state.model.cfg.clone(),
        train: state.cfg.clone(),
        schedule: state.schedule.clone(),
        vocab: state.model.text.vocab.clone(),
        step: state.step,
        adam_t: state.adam.t,
        rng: RngState::capture(&state.rng),
        unet_hash: group_digest(&state.baseline, "unet."),
        text_hash: group_digest(&state.baseline, "text."),
        frozen_hashes: state.baseline.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut blobs: Vec<(String, Tensor<f32>)> = Vec::new();
    for p in all_params(&state.model) {
        blobs.push((p.name.clone(), p.value.cast()));
    }
    for (n, (m, v)) in &state.adam.moments {
        blobs.push((format!("{ADAM_M}{n}"), m.cast()));
        blobs.push((format!("{ADAM_V}{n}"), v.cast()));
    }
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (n, t) in &blobs {
        put_blob(&mut out, n, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<F: Element>(state: &TrainState<F>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state)?)?;
    Ok(())
}

fn all_params<F>(model: &ViCoModel<F>) -> Vec<&Param<F>> {
    let mut v = model.text.params();
    model.unet.visit(&mut v);
    model.psi.visit(&mut v);
    v
}

fn all_params_mut<F>(model: &mut ViCoModel<F>) -> Vec<&mut Param<F>> {
    let mut v = model.text.params_mut();
    model.unet.visit_mut(&mut v);
    model.psi.visit_mut(&mut v);
    v
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parsed checkpoint: manifest plus named 32-bit blobs.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blobs: BTreeMap<String, Tensor<f32>>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u64()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blobs.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after blobs".into()));
    }
    Ok(Checkpoint { manifest, blobs })
}

/// Rebuilds the full training state from a checkpoint.
pub fn load_checkpoint<F: Element>(path: &Path) -> Result<TrainState<F>> {
    let ck = parse_checkpoint(&std::fs::read(path)?)?;
    state_from_checkpoint(ck)
}

pub fn state_from_checkpoint<F: Element>(ck: Checkpoint) -> Result<TrainState<F>> {
    let m = ck.manifest;
    let mut model = ViCoModel::<F>::new(m.model.clone())?;
    if model.text.vocab != m.vocab {
        return Err(Error::Checkpoint("vocabulary differs from the model's".into()));
    }
    for p in all_params_mut(&mut model) {
        let b = ck
            .blobs
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{}`", p.name)))?;
        if b.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "blob `{}` has shape {:?}",
                p.name,
                b.shape()
            )));
        }
        p.value = b.cast();
    }
    let mut state = TrainState::new(model, m.train, m.schedule)?;
    state.step = m.step;
    state.adam.t = m.adam_t;
    state.rng = m.rng.restore()?;
    for name in state.adam.registered() {
        if let (Some(mb), Some(vb)) = (
            ck.blobs.get(&format!("{ADAM_M}{name}")),
            ck.blobs.get(&format!("{ADAM_V}{name}")),
        ) {
            state.adam.moments.insert(name, (mb.cast(), vb.cast()));
        }
    }
    state.baseline = m.frozen_hashes;
    Ok(state)
}

/// Copies the U-Net weights θ of a checkpoint into `model`. The checkpoint
/// must describe the same U-Net and text encoder.
pub fn load_backbone<F: Element>(model: &mut ViCoModel<F>, path: &Path) -> Result<()> {
    let ck = parse_checkpoint(&std::fs::read(path)?)?;
    if ck.manifest.model.unet != model.cfg.unet || ck.manifest.model.text != model.cfg.text {
        return Err(Error::Checkpoint(format!(
            "backbone {} was built for a different model configuration",
            path.display()
        )));
    }
    for p in model.unet.params_mut() {
        let b = ck
            .blobs
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("backbone lacks `{}`", p.name)))?;
        if b.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "backbone blob `{}` has shape {:?}",
                p.name,
                b.shape()
            )));
        }
        p.value = b.cast();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vico::ModelConfig;

    fn micro_state(lambda: f64) -> (TrainState<f32>, Dataset<f32>, NoiseSchedule) {
        let model = ViCoModel::<f32>::new(ModelConfig::micro()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images = (0..3).map(|_| Tensor::randn(&[2, 8, 8], 0.5, &mut rng)).collect();
        let data = Dataset::with_default_templates(images).unwrap();
        let cfg = TrainConfig {
            lambda,
            batch: 2,
            steps: 3,
            ..TrainConfig::default()
        };
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        (
            TrainState::new(model, cfg, ScheduleConfig::default()).unwrap(),
            data,
            sched,
        )
    }

    #[test]
    fn sequential_targets_and_other_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in 0..5 {
            let p = plan_batch(5, 3, step, 1, &mut rng).unwrap();
            assert_eq!(p.targets, vec![step]);
            assert_ne!(p.references[0], step);
        }
        let p = plan_batch(1, 3, 7, 4, &mut rng).unwrap();
        assert_eq!(p.targets, p.references);
        assert!(plan_batch(0, 3, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_steps_follow_interval() {
        assert_eq!(TrainConfig::default().checkpoint_steps(), vec![100, 200, 300, 400]);
        let c = TrainConfig {
            steps: 250,
            ..TrainConfig::default()
        };
        assert_eq!(c.checkpoint_steps(), vec![100, 200, 250]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new("x", Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig::default(),
            vec![ParamGroup {
                name: "g".into(),
                lr: 0.1,
                params: vec!["x".into()],
            }],
        )
        .unwrap();
        let grads = BTreeMap::from([("x".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
        adam.step(vec![&mut p], &grads).unwrap();
        // bias-corrected first step is lr·g/(|g| + eps)
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.value.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn lambda_zero_total_is_denoise_and_backbone_stays_frozen() {
        let (mut st, data, sched) = micro_state(0.0);
        let l = st.train_step(&data, &sched).unwrap();
        assert_eq!(l.total, l.denoise);
        assert!(assert_frozen(&st.model, &st.baseline).is_empty());
        let (mut st, data, sched) = micro_state(5e-4);
        let before = st.model.text.placeholder().clone();
        let l = st.train_step(&data, &sched).unwrap();
        assert!((l.total - (l.denoise + 5e-4 * l.reg)).abs() < 1e-9);
        assert!(!st.model.text.placeholder().bit_eq(&before));
        assert_eq!(st.adam.registered(), st.trainable_names());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let (mut st, data, sched) = micro_state(5e-4);
        st.train_step(&data, &sched).unwrap();
        let bytes = checkpoint_bytes(&st).unwrap();
        let back: TrainState<f32> = state_from_checkpoint(parse_checkpoint(&bytes).unwrap()).unwrap();
        assert!(back.model.text.placeholder().bit_eq(st.model.text.placeholder()));
        assert_eq!(back.step, 1);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        let k = bad.len() / 2;
        bad[k] ^= 1;
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(parse_checkpoint(&bad).is_err());
    }

    #[test]
    fn corrupted_backbone_is_reported() {
        let (mut st, ..) = micro_state(5e-4);
        let p = st
            .model
            .unet
            .params_mut()
            .into_iter()
            .find(|p| p.name.contains("attn2"))
            .unwrap();
        p.value.data_mut()[0] += 1.0;
        let name = p.name.clone();
        assert_eq!(assert_frozen(&st.model, &st.baseline), vec![name]);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let (mut st, data, sched) = micro_state(5e-4);
        st.cfg.steps = 0;
        let init = checkpoint_bytes(&st).unwrap();
        assert!(st.fit(&data, &sched, |_, _| Ok(())).unwrap().is_empty());
        assert_eq!(checkpoint_bytes(&st).unwrap(), init);
    }
}
