//! Denoising-diffusion action policy and its three pretraining procedures:
//! plain behavioral cloning, σ-BC (state-independent target noise) and
//! PostBC (target noise drawn from a posterior covariance field).

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::continuous::{ActionNorm, ContinuousDemoDataset, ContinuousPolicy};
use crate::ensemble::{parse_params, shuffle, state_scale, ConstantCov, CovSource};
use crate::error::{dim_err, param_err, Error, Result};
use crate::linalg::{psd_factor, standard_normal_vec};
use crate::nn::{timestep_embedding, Mlp};
use crate::report::{fmt_float, CsvRow};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub n_train: usize,
    pub n_infer: usize,
    pub embed_dim: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 64,
            lr: 3e-3,
            hidden: vec![64, 64],
            n_train: 50,
            n_infer: 16,
            embed_dim: 16,
            beta_start: 1e-4,
            beta_end: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_train", self.n_train),
            ("n_infer", self.n_infer),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param_err(format!("{name} must be positive")));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(param_err("hidden sizes must be positive"));
        }
        if self.n_infer > self.n_train {
            return Err(param_err("n_infer cannot exceed n_train"));
        }
        if !(self.lr > 0.0) || !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(param_err("need lr > 0 and 0 < beta_start < beta_end < 1"));
        }
        Ok(())
    }
}

/// Noise levels `β_t` linear in `t`, with cumulative products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> =
            (0..n).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1).max(1) as f64).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `n_infer` distinct timesteps from `N-1` down to `0`.
    pub fn inference_steps(&self, n_infer: usize) -> Vec<usize> {
        let n = self.len();
        let mut steps: Vec<usize> = (0..n_infer)
            .map(|k| {
                let frac = if n_infer == 1 { 0.0 } else { k as f64 / (n_infer - 1) as f64 };
                ((n - 1) as f64 * (1.0 - frac)).round() as usize
            })
            .collect();
        steps.dedup();
        steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub state_dim: usize,
    pub action_dim: usize,
    pub state_scale: Vec<f64>,
    pub action_norm: ActionNorm,
    pub config: TrainConfig,
}

/// Diffusion policy: a denoiser `ε̂(s, x_t, t)` plus its noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativePolicy {
    pub header: PolicyHeader,
    pub net: Mlp,
    schedule: Schedule,
}

impl GenerativePolicy {
    /// Freshly initialized denoiser.
    pub fn new<R: Rng + ?Sized>(header: PolicyHeader, rng: &mut R) -> Result<Self> {
        let net = Mlp::new(&Self::layer_sizes(&header), rng)?;
        Self::from_parts(header, net)
    }

    /// Denoiser with all parameters zero.
    pub fn zeros(header: PolicyHeader) -> Result<Self> {
        let net = Mlp::zeros(&Self::layer_sizes(&header))?;
        Self::from_parts(header, net)
    }

    fn from_parts(header: PolicyHeader, net: Mlp) -> Result<Self> {
        header.config.validate()?;
        if net.sizes() != Self::layer_sizes(&header).as_slice() {
            return Err(dim_err("network shape does not match the policy header"));
        }
        let c = &header.config;
        let schedule = Schedule::linear(c.n_train, c.beta_start, c.beta_end);
        Ok(Self { header, net, schedule })
    }

    fn layer_sizes(h: &PolicyHeader) -> Vec<usize> {
        let mut sizes = vec![h.state_dim + h.action_dim + h.config.embed_dim];
        sizes.extend_from_slice(&h.config.hidden);
        sizes.push(h.action_dim);
        sizes
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn state_dim(&self) -> usize {
        self.header.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.header.action_dim
    }

    fn input(&self, state: &[f64], x: &[f64], t: usize) -> Vec<f64> {
        let mut v: Vec<f64> = state.iter().zip(&self.header.state_scale).map(|(s, k)| s / k).collect();
        v.extend_from_slice(x);
        v.extend(timestep_embedding(t as f64, self.header.config.embed_dim));
        v
    }

    /// Reverse diffusion over the strided inference schedule, in normalized
    /// action space; the returned action is clipped and denormalized.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(dim_err(format!(
                "state of dimension {} for a {}-dimensional policy",
                state.len(),
                self.state_dim()
            )));
        }
        Ok(self.sample_unchecked(state, rng))
    }

    fn sample_unchecked<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Vec<f64> {
        let d = self.action_dim();
        let ab = &self.schedule.alpha_bars;
        let steps = self.schedule.inference_steps(self.header.config.n_infer);
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (k, &t) in steps.iter().enumerate() {
            let eps = self.net.forward(&self.input(state, &x, t));
            let x0: Vec<f64> = x
                .iter()
                .zip(&eps)
                .map(|(xi, e)| ((xi - (1.0 - ab[t]).sqrt() * e) / ab[t].sqrt()).clamp(-1.0, 1.0))
                .collect();
            match steps.get(k + 1) {
                None => x = x0,
                Some(&prev) => {
                    let beta = 1.0 - ab[t] / ab[prev];
                    let c0 = ab[prev].sqrt() * beta / (1.0 - ab[t]);
                    let ct = (1.0 - beta).sqrt() * (1.0 - ab[prev]) / (1.0 - ab[t]);
                    let std = (beta * (1.0 - ab[prev]) / (1.0 - ab[t])).sqrt();
                    for i in 0..d {
                        x[i] = c0 * x0[i] + ct * x[i] + std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        let clipped: Vec<f64> = x.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        self.header.action_norm.denormalize(&clipped)
    }

    /// A JSON header line followed by one line of parameters.
    pub fn to_text(&self) -> Result<String> {
        let params: Vec<String> = self.net.params().iter().map(|p| format!("{p:?}")).collect();
        Ok(format!("{}\n{}\n", serde_json::to_string(&self.header)?, params.join(" ")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: PolicyHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Parse("empty file".into()))?)?;
        let params = parse_params(lines.next().unwrap_or(""))?;
        let net = Mlp::from_params(&Self::layer_sizes(&header), params)?;
        Self::from_parts(header, net)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_text()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl ContinuousPolicy for GenerativePolicy {
    fn act(&self, state: &[f64], _step: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        self.sample_unchecked(state, rng)
    }
}

/// One training example in normalized action space.
pub type Example = (Vec<f64>, Vec<f64>);

/// Per-example random inputs of the denoising loss: timestep and noise.
pub type LossDraw = (usize, Vec<f64>);

/// Mean squared noise-prediction error and its parameter gradient, drawing
/// a timestep and a noise vector per example from `rng`.
pub fn diffusion_loss<R: Rng + ?Sized>(
    policy: &GenerativePolicy,
    batch: &[Example],
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let draws: Vec<LossDraw> = batch
        .iter()
        .map(|_| {
            let t = rng.random_range(0..policy.schedule.len());
            let eps = (0..policy.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
            (t, eps)
        })
        .collect();
    diffusion_loss_with_draws(policy, batch, &draws)
}

/// [`diffusion_loss`] with explicit draws.
pub fn diffusion_loss_with_draws(
    policy: &GenerativePolicy,
    batch: &[Example],
    draws: &[LossDraw],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (d_s, d_a) = (policy.state_dim(), policy.action_dim());
    if draws.len() != batch.len() {
        return Err(dim_err("one draw per batch element is required"));
    }
    if batch.iter().any(|(s, a)| s.len() != d_s || a.len() != d_a) || draws.iter().any(|(_, e)| e.len() != d_a) {
        return Err(dim_err("batch element dimensions do not match the policy"));
    }
    if let Some((t, _)) = draws.iter().find(|(t, _)| *t >= policy.schedule.len()) {
        return Err(Error::IndexOutOfRange(format!("timestep {t}")));
    }
    let mut grad = vec![0.0; policy.net.params().len()];
    let mut loss = 0.0;
    let w = 1.0 / (batch.len() * d_a) as f64;
    for ((s, a), (t, eps)) in batch.iter().zip(draws) {
        let ab = policy.schedule.alpha_bars[*t];
        let x: Vec<f64> = a.iter().zip(eps).map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e).collect();
        let (pred, tape) = policy.net.forward_tape(&policy.input(s, &x, *t));
        let resid: Vec<f64> = pred.iter().zip(eps).map(|(p, e)| p - e).collect();
        loss += w * resid.iter().map(|r| r * r).sum::<f64>();
        let g_out: Vec<f64> = resid.iter().map(|r| 2.0 * w * r).collect();
        policy.net.backward(&tape, &g_out, &mut grad);
    }
    Ok((loss, grad))
}

/// Loss trajectory of a training run, measured on the full dataset with
/// draws from a fixed evaluation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub initial_loss: f64,
    pub final_loss: f64,
}

const EVAL_SEED: u64 = 0x5eed_e7a1;

/// Dataset loss at fixed draws, averaged over `reps` passes.
pub fn eval_loss(policy: &GenerativePolicy, examples: &[Example], reps: usize) -> Result<f64> {
    let mut r = rng::seeded(EVAL_SEED);
    let mut total = 0.0;
    for _ in 0..reps {
        total += diffusion_loss(policy, examples, &mut r)?.0;
    }
    Ok(total / reps as f64)
}

/// Cosine decay from `base` to `base / 20` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    let floor = base / 20.0;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Target perturbation: `a + α·w`, `w ~ N(0, cov(s))`.
struct TargetNoise<'a> {
    field: &'a dyn CovSource,
    alpha: f64,
}

fn train(
    dataset: &ContinuousDemoDataset,
    noise: Option<TargetNoise<'_>>,
    config: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<(GenerativePolicy, TrainStats)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples: Vec<Example> = dataset.normalized_pairs();
    let raw: Vec<(Vec<f64>, Vec<f64>)> = dataset.pairs();
    let header = PolicyHeader {
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
        state_scale: state_scale(&raw, dataset.state_dim),
        action_norm: dataset.action_norm.clone(),
        config: config.clone(),
    };
    // Target noise comes from its own stream so that the training stream is
    // the same with or without it.
    let mut noise_rng = rng::seeded(rng.next_u64());
    let factors: Option<Vec<DMatrix<f64>>> = match &noise {
        None => None,
        Some(n) => {
            if n.field.action_dim() != dataset.action_dim {
                return Err(dim_err("covariance field dimension does not match the actions"));
            }
            Some(
                examples
                    .iter()
                    .map(|(s, _)| n.field.cov(s).map(|c| psd_factor(&c) * n.alpha))
                    .collect::<Result<_>>()?,
            )
        }
    };
    let mut policy = GenerativePolicy::new(header, rng)?;
    let initial_loss = eval_loss(&policy, &examples, 4)?;
    let mut opt = crate::nn::Adam::new(policy.net.params().len(), config.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let d_a = dataset.action_dim;
    let total_steps = config.epochs * examples.len().div_ceil(config.batch_size);
    let mut step = 0;
    for _ in 0..config.epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    let (s, a) = &examples[i];
                    let target = match &factors {
                        None => a.clone(),
                        Some(f) => {
                            let w = &f[i] * standard_normal_vec(d_a, &mut noise_rng);
                            let shifted = DVector::from_column_slice(a) + w;
                            shifted.iter().map(|x| x.clamp(-1.0, 1.0)).collect()
                        }
                    };
                    (s.clone(), target)
                })
                .collect();
            let (_, grad) = diffusion_loss(&policy, &batch, rng)?;
            opt.lr = cosine_lr(config.lr, step, total_steps);
            opt.step(policy.net.params_mut(), &grad);
            step += 1;
        }
    }
    let final_loss = eval_loss(&policy, &examples, 4)?;
    Ok((policy, TrainStats { initial_loss, final_loss }))
}

/// Standard behavioral cloning of the demonstrated action distribution.
pub fn train_bc<R: RngCore>(
    dataset: &ContinuousDemoDataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(GenerativePolicy, TrainStats)> {
    train(dataset, None, config, rng)
}

/// PostBC: each batch's targets get fresh noise `α·w`, `w ~ N(0, cov(s))`,
/// then are clipped to the action bounds.
pub fn train_postbc<R: RngCore>(
    dataset: &ContinuousDemoDataset,
    cov_field: &dyn CovSource,
    alpha: f64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(GenerativePolicy, TrainStats)> {
    if !(alpha >= 0.0) {
        return Err(param_err(format!("alpha must be non-negative, got {alpha}")));
    }
    train(dataset, Some(TargetNoise { field: cov_field, alpha }), config, rng)
}

/// σ-BC: PostBC with the constant field `σ² I` and unit weight.
pub fn train_sigma_bc<R: RngCore>(
    dataset: &ContinuousDemoDataset,
    sigma: f64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(GenerativePolicy, TrainStats)> {
    if !(sigma >= 0.0) {
        return Err(param_err(format!("sigma must be non-negative, got {sigma}")));
    }
    train_postbc(dataset, &ConstantCov::isotropic(dataset.action_dim, sigma * sigma), 1.0, config, rng)
}

/// `n` actions at `state` from per-sample streams of `seed`.
pub fn sample_many(policy: &GenerativePolicy, state: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    (0..n as u64).into_par_iter().map(|i| policy.sample_action(state, &mut rng::stream(seed, i))).collect()
}

/// One coordinate of an analytic-versus-finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub architecture: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

impl CsvRow for GradCheckRow {
    fn header() -> &'static str {
        "architecture,coordinate,analytic,numeric,rel_err,passed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.architecture,
            self.coordinate,
            fmt_float(self.analytic),
            fmt_float(self.numeric),
            fmt_float(self.rel_err),
            self.passed
        )
    }
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Compares [`diffusion_loss_with_draws`] gradients against central
/// differences (step `1e-5`) on `coords` random parameters of a randomly
/// initialized 2-D denoiser per hidden-layer layout.
pub fn gradient_check(architectures: &[Vec<usize>], coords: usize, seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (k, hidden) in architectures.iter().enumerate() {
        let mut r = rng::stream(seed, k as u64);
        let header = PolicyHeader {
            state_dim: 2,
            action_dim: 2,
            state_scale: vec![1.0, 2.0],
            action_norm: ActionNorm::identity(2),
            config: TrainConfig { hidden: hidden.clone(), ..TrainConfig::default() },
        };
        let policy = GenerativePolicy::new(header, &mut r)?;
        let n_train = policy.schedule.len();
        let batch: Vec<Example> = (0..4)
            .map(|_| (standard_normal_vec(2, &mut r).data.into(), vec![r.random_range(-1.0..1.0), 0.3]))
            .collect();
        let draws: Vec<LossDraw> =
            (0..4).map(|_| (r.random_range(0..n_train), standard_normal_vec(2, &mut r).data.into())).collect();
        let (_, grad) = diffusion_loss_with_draws(&policy, &batch, &draws)?;
        let h = 1e-5;
        for _ in 0..coords {
            let i = r.random_range(0..grad.len());
            let mut p = policy.clone();
            p.net.params_mut()[i] += h;
            let mut m = policy.clone();
            m.net.params_mut()[i] -= h;
            let fd = (diffusion_loss_with_draws(&p, &batch, &draws)?.0
                - diffusion_loss_with_draws(&m, &batch, &draws)?.0)
                / (2.0 * h);
            let rel_err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            rows.push(GradCheckRow {
                architecture: hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
                coordinate: i,
                analytic: grad[i],
                numeric: fd,
                rel_err,
                passed: rel_err < GRAD_CHECK_TOLERANCE,
            });
        }
    }
    Ok(rows)
}
