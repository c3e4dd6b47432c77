//! Forward noising, the denoising objective and the deterministic DDIM sampler.
//!
//! Schedule coefficients are kept in `f64`. The sampler integrates its
//! trajectory in `f64` as well and only hands the noise predictor values of
//! the model's element type.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear β schedule with precomputed cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|t| {
                if train_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.train_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// ᾱ at `t`; `t = -1` denotes the clean end point with ᾱ = 1.
    pub fn alpha_bar_at(&self, t: i64) -> Result<f64> {
        match t {
            -1 => Ok(1.0),
            t if t >= 0 && (t as usize) < self.len() => Ok(self.alpha_bar[t as usize]),
            _ => Err(Error::invalid(format!("timestep {t} outside [-1, {})", self.len()))),
        }
    }

    /// DDIM timesteps for `steps` inference steps, descending: the uniform
    /// stride `T / steps` from 0, reversed.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::invalid(format!(
                "inference steps must lie in [1, {}], got {steps}",
                self.len()
            )));
        }
        let stride = self.len() / steps;
        Ok((0..steps).rev().map(|k| k * stride).collect())
    }
}

fn check_same_shape<A: Element, B: Element>(op: &'static str, a: &Tensor<A>, b: &Tensor<B>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<F: Element>(z0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    check_same_shape("q_sample", z0, eps)?;
    if t >= sched.len() {
        return Err(Error::invalid(format!("timestep {t} outside [0, {})", sched.len())));
    }
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_fn(z0.shape(), |i| {
        F::of(a * z0.data()[i].f64() + b * eps.data()[i].f64())
    }))
}

/// [`q_sample`] over a batch `[B, ..]` with one timestep per element.
pub fn q_sample_batch<F: Element>(
    z0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_same_shape("q_sample_batch", z0, eps)?;
    if z0.shape()[0] != ts.len() {
        return Err(Error::shape("q_sample_batch", z0.shape(), &[ts.len()]));
    }
    let items = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| q_sample(&z0.index0(i)?, t, &eps.index0(i)?, sched))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Mean squared error between the true and predicted noise, on the graph.
pub fn denoising_loss<F: Element>(g: &mut Graph<F>, eps: Var, eps_hat: Var) -> Result<Var> {
    if g.shape(eps) != g.shape(eps_hat) {
        return Err(Error::shape("denoising_loss", g.shape(eps), g.shape(eps_hat)));
    }
    let d = g.sub(eps_hat, eps)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Value-only mean squared error.
pub fn mse<F: Element>(eps: &Tensor<F>, eps_hat: &Tensor<F>) -> Result<f64> {
    check_same_shape("mse", eps, eps_hat)?;
    let s: f64 = eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(s / eps.numel() as f64)
}

/// One deterministic DDIM update from `t` to `t_prev` (`-1` for the clean end).
pub fn ddim_step<F: Element, G: Element>(
    z_t: &Tensor<F>,
    eps_hat: &Tensor<G>,
    t: i64,
    t_prev: i64,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::shape("ddim_step", z_t.shape(), eps_hat.shape()));
    }
    if !(t > t_prev && t_prev >= -1) {
        return Err(Error::invalid(format!(
            "ddim_step needs t > t_prev >= -1, got {t} -> {t_prev}"
        )));
    }
    let ab = sched.alpha_bar_at(t)?;
    let ab_prev = sched.alpha_bar_at(t_prev)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(Tensor::from_fn(z_t.shape(), |i| {
        let e = eps_hat.data()[i].f64();
        let x0 = (z_t.data()[i].f64() - sb * e) / sa;
        F::of(pa * x0 + pb * e)
    }))
}

/// Runs the DDIM loop from `z_start` (the latent at the first timestep).
/// `predict(z_t, t, step)` returns ε̂ for the current latent.
pub fn ddim_sample<G, P>(
    mut predict: P,
    z_start: Tensor<f64>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor<f64>>
where
    G: Element,
    P: FnMut(&Tensor<G>, usize, usize) -> Result<Tensor<G>>,
{
    let ts = sched.ddim_timesteps(steps)?;
    let mut z = z_start;
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).map_or(-1, |&p| p as i64);
        let eps = predict(&z.cast::<G>(), t, k)?;
        if !eps.all_finite() {
            return Err(Error::NonFinite(format!("noise prediction at timestep {t}")));
        }
        z = ddim_step(&z, &eps, t as i64, t_prev, sched)?;
    }
    Ok(z)
}
