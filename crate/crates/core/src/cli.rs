//! Command-line front end: dataset generation, training, sampling,
//! evaluation and attention inspection.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{write_png, write_synthetic, DatasetManifest, RgbImage, SyntheticConfig};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    image_similarity, mask_iou, text_similarity, ConvEmbedder, Embedder, MetricReport, PromptReport, TextEmbedder,
};
use crate::numerics::{Element, Tensor};
use crate::text::{TokenSequence, EVAL_PROMPTS_LIVE, TRAIN_TEMPLATES};
use crate::trainer::{
    load_backbone, load_checkpoint, save_checkpoint, warm_up_backbone, write_loss_csv, Dataset, Precision, TrainConfig,
    TrainState,
};
use crate::vico::{token_columns, ModelConfig, StepRecord, ViCoModel};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "vico",
    version,
    about = "Personalize a desk-scale diffusion model from a few images"
)]
pub struct Cli {
    /// Run deterministically (also implied by VICO_THREADS=1).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic sprite dataset: images, masks and a manifest.
    GenSynthetic(GenArgs),
    /// Train the U-Net backbone on the generic warm-up corpus.
    Pretrain(PretrainArgs),
    /// Train S★ and the image attention blocks from a run config.
    Train(TrainArgs),
    /// Generate one image from a checkpoint, a prompt and reference images.
    Sample(SampleArgs),
    /// Generate samples for a prompt list and write a metric report.
    Eval(EvalArgs),
    /// Dump S★ attention heatmaps and object masks during sampling.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sprite radius in pixels.
    #[arg(long, default_value_t = 7)]
    pub radius: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Run config; its `model`, `schedule`, `templates` and `train.warmup`
    /// are used.
    #[arg(long)]
    pub config: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Step count (overrides `train.warmup.steps`).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Step count (overrides `train.steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed (overrides the config seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference image(s); several are concatenated as visual conditions.
    #[arg(long, required = true, num_args = 1..)]
    pub reference: Vec<PathBuf>,
    #[arg(long, default_value = "a photo of a {}")]
    pub prompt: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump attention and masks every `interval` steps next to `out`.
    #[arg(long)]
    pub interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub reference: Vec<PathBuf>,
    #[arg(long, default_value = "a photo of a {}")]
    pub prompt: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 10)]
    pub interval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth mask per reference, for IoU in the sidecars.
    #[arg(long, num_args = 1..)]
    pub mask: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest with the real images (and masks, if any).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Prompt file, one prompt with a `{}` slot per line.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training run description read by `vico train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest, relative to the config file.
    pub dataset: String,
    /// Output directory, relative to the config file.
    pub out_dir: String,
    /// Checkpoint whose U-Net weights initialize the frozen backbone,
    /// relative to the config file.
    #[serde(default)]
    pub backbone: Option<String>,
    /// Overrides `train.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Prompt templates with one `{}` slot; the built-in set when absent.
    #[serde(default)]
    pub templates: Option<Vec<String>>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

/// JSON schema of [`RunConfig`].
pub fn run_config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

fn config_err(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Config {
        path: path.into(),
        message: message.to_string(),
    }
}

/// Parses and validates a run config. Errors name the offending key path.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(
            if path == "." {
                "$".to_string()
            } else {
                format!("$.{path}")
            },
            e.into_inner(),
        )
    })?;
    cfg.model.validate().map_err(|e| config_err("$.model", e))?;
    cfg.train.validate().map_err(|e| config_err("$.train", e))?;
    NoiseSchedule::from_config(&cfg.schedule).map_err(|e| config_err("$.schedule", e))?;
    if let Some(t) = &cfg.templates {
        if t.is_empty() {
            return Err(config_err("$.templates", "must list at least one template"));
        }
        let vocab = crate::text::Vocabulary::default();
        for (i, p) in t.iter().enumerate() {
            crate::text::tokenize(&vocab, p, cfg.model.text.context)
                .map_err(|e| config_err(format!("$.templates[{i}]"), e))?;
        }
    }
    if cfg.backbone.is_some() && cfg.train.warmup.steps > 0 {
        return Err(config_err(
            "$.backbone",
            "a backbone checkpoint and warm-up steps are exclusive",
        ));
    }
    if cfg.train.warmup.steps > 0 && cfg.train.warmup.corpus.image_size != cfg.model.unet.latent[1] {
        return Err(config_err(
            "$.train.warmup.corpus.image_size",
            format!("must equal the latent size {}", cfg.model.unet.latent[1]),
        ));
    }
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e))?;
    parse_run_config(&text).map_err(|e| match e {
        Error::Config { path: p, message } => config_err(format!("{}:{p}", path.display()), message),
        other => other,
    })
}

/// Deterministic mode from the flag and `VICO_THREADS`.
pub fn deterministic_mode(flag: bool) -> Result<bool> {
    match std::env::var("VICO_THREADS") {
        Err(_) => Ok(flag),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(flag || n == 1),
            _ => Err(config_err("VICO_THREADS", format!("`{v}` is not a positive integer"))),
        },
    }
}

/// Exit status for an error: 2 for configuration and validation problems,
/// 3 for runtime failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::InvalidArgument(_)
        | Error::UnknownWord(_)
        | Error::PlaceholderCount(_)
        | Error::PromptTooLong { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let deterministic = deterministic_mode(cli.deterministic)?;
    match cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Train(a) => cmd_train(&a, deterministic),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

pub fn cmd_gen_synthetic(a: &GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_images: a.n,
        image_size: a.size,
        seed: a.seed,
        sprite_radius: a.radius,
    };
    let m = write_synthetic(&a.out, &cfg)?;
    println!("wrote {} images and masks to {}", m.images.len(), a.out.display());
    Ok(())
}

fn templates_of(cfg: &RunConfig) -> Vec<String> {
    cfg.templates
        .clone()
        .unwrap_or_else(|| TRAIN_TEMPLATES.iter().map(|s| s.to_string()).collect())
}

/// Warms up the backbone of `cfg.model` and saves it as a step-0 checkpoint.
/// Returns the warm-up loss per step.
pub fn pretrain_run(cfg: &RunConfig, out: &Path) -> Result<Vec<f64>> {
    if cfg.train.warmup.steps == 0 {
        return Err(config_err("$.train.warmup.steps", "must be positive for pretrain"));
    }
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut model = ViCoModel::<f32>::new(cfg.model.clone())?;
    let curve = warm_up_backbone(&mut model, &templates_of(cfg), &sched, &cfg.train.warmup)?;
    let mut train = cfg.train.clone();
    train.warmup.steps = 0;
    let state = TrainState::new(model, train, cfg.schedule.clone())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&state, out)?;
    Ok(curve)
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.config)?;
    cfg.backbone = None;
    if let Some(s) = a.steps {
        cfg.train.warmup.steps = s;
    }
    let curve = pretrain_run(&cfg, &a.out)?;
    let tail = &curve[curve.len().saturating_sub(10)..];
    println!(
        "warmed up {} steps, final loss {:.4}; wrote {}",
        curve.len(),
        tail.iter().sum::<f64>() / tail.len() as f64,
        a.out.display()
    );
    Ok(())
}

/// What `vico train` leaves next to its checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub checkpoints: Vec<String>,
    pub loss_csv: String,
    pub deterministic: bool,
    pub warmup_losses: Vec<f64>,
}

pub fn cmd_train(a: &TrainArgs, deterministic: bool) -> Result<()> {
    let mut cfg = load_run_config(&a.config)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed.or(cfg.seed) {
        cfg.train.seed = s;
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let out = a.out.clone().unwrap_or_else(|| base.join(&cfg.out_dir));
    let dataset = base.join(&cfg.dataset);
    if let Some(b) = &cfg.backbone {
        cfg.backbone = Some(base.join(b).display().to_string());
    }
    let summary = match cfg.train.precision {
        Precision::F32 => train_run::<f32>(&cfg, &dataset, &out, deterministic)?,
        Precision::F64 => train_run::<f64>(&cfg, &dataset, &out, deterministic)?,
    };
    println!(
        "trained {} steps; checkpoints: {}",
        summary.steps,
        summary.checkpoints.join(", ")
    );
    Ok(())
}

/// Loads images as latents and checks them against the model's latent shape.
fn load_latents<F: Element>(paths: &[PathBuf], latent: [usize; 3]) -> Result<Vec<Tensor<F>>> {
    paths
        .iter()
        .map(|p| {
            let im = crate::data::read_png(p)?;
            if [3, im.height, im.width] != latent {
                return Err(config_err(
                    p.display().to_string(),
                    format!("image is {}x{}, model latent is {:?}", im.width, im.height, latent),
                ));
            }
            Ok(im.to_latent())
        })
        .collect()
}

/// Full training run: optional warm-up, fit, checkpoints and loss CSV.
pub fn train_run<F: Element>(cfg: &RunConfig, dataset: &Path, out: &Path, deterministic: bool) -> Result<TrainSummary> {
    let ds = DatasetManifest::load(dataset)?;
    let latents = load_latents::<F>(&ds.image_paths, cfg.model.unet.latent)?;
    let data = Dataset::new(latents, templates_of(cfg))?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut model = ViCoModel::<F>::new(cfg.model.clone())?;
    if let Some(b) = &cfg.backbone {
        load_backbone(&mut model, Path::new(b))?;
    }
    let warmup_losses = if cfg.train.warmup.steps > 0 {
        warm_up_backbone(&mut model, &data.templates, &sched, &cfg.train.warmup)?
    } else {
        Vec::new()
    };
    std::fs::create_dir_all(out)?;
    let mut state = TrainState::new(model, cfg.train.clone(), cfg.schedule.clone())?;
    let due = cfg.train.checkpoint_steps();
    let mut written = Vec::new();
    let curve = state.fit(&data, &sched, |s, _| {
        if due.contains(&s.step) {
            let name = format!("checkpoint_{:04}.ckpt", s.step);
            save_checkpoint(s, &out.join(&name))?;
            written.push(name);
        }
        Ok(())
    })?;
    write_loss_csv(&out.join("loss.csv"), &curve)?;
    let summary = TrainSummary {
        steps: state.step,
        checkpoints: written,
        loss_csv: "loss.csv".into(),
        deterministic,
        warmup_losses,
    };
    std::fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// A loaded checkpoint ready for sampling.
pub struct Sampler {
    pub model: ViCoModel<f32>,
    pub schedule: NoiseSchedule,
}

impl Sampler {
    pub fn load(path: &Path) -> Result<Self> {
        let st = load_checkpoint::<f32>(path)?;
        Ok(Self {
            schedule: NoiseSchedule::from_config(&st.schedule)?,
            model: st.model,
        })
    }

    pub fn references(&self, paths: &[PathBuf]) -> Result<Tensor<f32>> {
        if paths.is_empty() {
            return Err(Error::invalid("sampling requires at least one --reference image"));
        }
        Tensor::stack(&load_latents(paths, self.model.cfg.unet.latent)?)
    }

    pub fn tokens(&self, prompt: &str) -> Result<TokenSequence> {
        self.model.text.tokenize(prompt)
    }
}

/// Sidecar written next to each dumped mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub step: usize,
    pub t: usize,
    pub block: usize,
    pub reference: usize,
    pub grid: [usize; 2],
    pub tau: f64,
    pub fallback: bool,
    pub heatmap: String,
    pub mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

/// Ground-truth mask with its `(height, width)`.
pub type TruthMask = (Vec<bool>, (usize, usize));

/// Writes, for every kept step, vico block and reference: the reference
/// stream's S★ column as a heatmap PNG (one pixel per patch, max-scaled),
/// the binary mask PNG and a JSON sidecar.
pub fn write_step_dumps(
    dir: &Path,
    model: &ViCoModel<f32>,
    s_star: usize,
    steps: &[StepRecord<f32>],
    truth: Option<&[TruthMask]>,
) -> Result<Vec<MaskSidecar>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for st in steps {
        for rec in st.records.iter().filter(|r| r.stream == crate::vico::Stream::Reference) {
            let (gh, gw) = model.cfg.unet.block_grid(rec.block)?;
            let refs = rec.map.shape()[0];
            let cols = token_columns(&rec.map, &vec![s_star; refs])?;
            for (r, col) in cols.iter().enumerate() {
                let mx = col.iter().copied().fold(0.0, f64::max);
                let scaled: Vec<f64> = col.iter().map(|v| if mx > 0.0 { v / mx } else { 0.0 }).collect();
                let pm = &st.masks[&rec.block][r];
                let stem = format!("step{:02}_block{}_ref{}", st.step, rec.block, r);
                let (heat, mask) = (format!("{stem}_attn.png"), format!("{stem}_mask.png"));
                write_png(&dir.join(&heat), &RgbImage::from_gray(gw, gh, &scaled)?)?;
                write_png(&dir.join(&mask), &RgbImage::from_mask(gw, gh, &pm.values)?)?;
                let iou = match truth.and_then(|t| t.get(r)) {
                    Some((m, hw)) => Some(mask_iou(&pm.values, (gh, gw), m, *hw)?),
                    None => None,
                };
                let side = MaskSidecar {
                    step: st.step,
                    t: st.t,
                    block: rec.block,
                    reference: r,
                    grid: [gh, gw],
                    tau: pm.tau,
                    fallback: pm.fallback,
                    heatmap: heat,
                    mask,
                    iou,
                };
                std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
                out.push(side);
            }
        }
    }
    Ok(out)
}

/// Steps kept at `interval`: the last step of every interval, so the final
/// step is always included when `interval` divides `steps`.
pub fn kept_step(k: usize, interval: usize) -> bool {
    interval > 0 && (k + 1).is_multiple_of(interval)
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let s = Sampler::load(&a.checkpoint)?;
    let tokens = s.tokens(&a.prompt)?;
    let refs = s.references(&a.reference)?;
    if a.interval == Some(0) {
        return Err(Error::invalid("--interval must be positive"));
    }
    let interval = a.interval.unwrap_or(0);
    let out = s
        .model
        .sample(&tokens, &refs, &s.schedule, a.steps, a.seed, |k| kept_step(k, interval))?;
    let [c, h, w] = s.model.cfg.unet.latent;
    let img = RgbImage::from_latent(&out.latent.reshape(&[c, h, w])?)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_png(&a.out, &img)?;
    if interval > 0 {
        let stem = a
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dir = a.out.with_file_name(format!("{stem}_steps"));
        write_step_dumps(&dir, &s.model, tokens.s_star_index()?, &out.steps, None)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    if a.interval == 0 {
        return Err(Error::invalid("--interval must be positive"));
    }
    let s = Sampler::load(&a.checkpoint)?;
    let tokens = s.tokens(&a.prompt)?;
    let refs = s.references(&a.reference)?;
    if !a.mask.is_empty() && a.mask.len() != a.reference.len() {
        return Err(Error::invalid("give one --mask per --reference"));
    }
    let truth = a
        .mask
        .iter()
        .map(|p| {
            let im = crate::data::read_png(p)?;
            Ok((im.to_mask(), (im.height, im.width)))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = s.model.sample(&tokens, &refs, &s.schedule, a.steps, a.seed, |k| {
        kept_step(k, a.interval)
    })?;
    let sides = write_step_dumps(
        &a.out,
        &s.model,
        tokens.s_star_index()?,
        &out.steps,
        (!truth.is_empty()).then_some(truth.as_slice()),
    )?;
    let [c, h, w] = s.model.cfg.unet.latent;
    write_png(
        &a.out.join("sample.png"),
        &RgbImage::from_latent(&out.latent.reshape(&[c, h, w])?)?,
    )?;
    println!("wrote {} mask dumps to {}", sides.len(), a.out.display());
    Ok(())
}

fn read_prompts(path: Option<&Path>) -> Result<Vec<String>> {
    let prompts: Vec<String> = match path {
        None => EVAL_PROMPTS_LIVE.iter().map(|s| s.to_string()).collect(),
        Some(p) => std::fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
    };
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts to evaluate"));
    }
    Ok(prompts)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(Error::invalid("--samples must be positive"));
    }
    let s = Sampler::load(&a.checkpoint)?;
    let prompts = read_prompts(a.prompts.as_deref())?;
    let tokens = prompts.iter().map(|p| s.tokens(p)).collect::<Result<Vec<_>>>()?;
    let ds = DatasetManifest::load(&a.dataset)?;
    let real = load_latents::<f32>(&ds.image_paths, s.model.cfg.unet.latent)?;
    let [c, h, w] = s.model.cfg.unet.latent;
    let coarsest = s.model.cfg.unet.coarsest_vico_block();
    let image_embedder = ConvEmbedder::new(c, s.model.cfg.text.d_text, 0);
    let text_embedder = TextEmbedder { encoder: &s.model.text };
    let sample_dir = a.out.join("samples");
    std::fs::create_dir_all(&sample_dir)?;
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for (j, (prompt, tok)) in prompts.iter().zip(&tokens).enumerate() {
        let mut generated = Vec::with_capacity(a.samples);
        let mut ious = Vec::new();
        for i in 0..a.samples {
            let r = i % real.len();
            let refs = Tensor::stack(std::slice::from_ref(&real[r]))?;
            let seed = a.seed.wrapping_add((j * a.samples + i) as u64);
            let last = a.steps.saturating_sub(1);
            let out = s.model.sample(tok, &refs, &s.schedule, a.steps, seed, |k| k == last)?;
            let img = RgbImage::from_latent(&out.latent.reshape(&[c, h, w])?)?;
            write_png(&sample_dir.join(format!("prompt{j:02}_sample{i:02}.png")), &img)?;
            generated.push(img.to_latent::<f32>());
            if let (Some(masks), Some(l), Some(st)) = (&ds.masks, coarsest, out.steps.last()) {
                let grid = s.model.cfg.unet.block_grid(l)?;
                ious.push(mask_iou(&st.masks[&l][0].values, grid, &masks[r], (h, w))?);
            }
        }
        per_prompt.push(PromptReport {
            prompt: prompt.clone(),
            samples: generated.len(),
            image_similarity: image_similarity(&generated, &real, &image_embedder)?,
            text_similarity: text_similarity(&generated, prompt, &image_embedder, &text_embedder)?,
            mask_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
        });
    }
    let report = MetricReport::aggregate(image_embedder.name(), text_embedder.name(), per_prompt)?;
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "image similarity {:.4}, text similarity {:.4} over {} samples",
        report.image_similarity, report.text_similarity, report.samples
    );
    Ok(())
}
