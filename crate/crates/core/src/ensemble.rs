//! Ensemble estimate of the state-conditional posterior covariance of the
//! demonstrator's mean action.
//!
//! Each member is fitted to a bootstrapped or noise-perturbed copy of the
//! demonstrations; the spread of member predictions at a state estimates
//! the posterior covariance there.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuous::ContinuousDemoDataset;
use crate::error::{dim_err, param_err, Error, Result};
use crate::linalg::{psd_factor, symmetrize};
use crate::nn::{Adam, Mlp};
use crate::rng;

pub type Pair = (Vec<f64>, Vec<f64>);

/// Regression data grouped by trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub trajectories: Vec<Vec<Pair>>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl PairData {
    pub fn new(trajectories: Vec<Vec<Pair>>, state_dim: usize, action_dim: usize) -> Result<Self> {
        for (s, a) in trajectories.iter().flatten() {
            if s.len() != state_dim || a.len() != action_dim {
                return Err(dim_err("pair dimensions do not match"));
            }
        }
        Ok(Self { trajectories, state_dim, action_dim })
    }

    /// Normalized-action pairs of a demonstration dataset.
    pub fn from_dataset(ds: &ContinuousDemoDataset) -> Self {
        let trajectories = ds
            .trajectories
            .iter()
            .map(|t| t.steps.iter().map(|s| (s.0.clone(), ds.action_norm.normalize(&s.1))).collect())
            .collect();
        Self { trajectories, state_dim: ds.state_dim, action_dim: ds.action_dim }
    }

    /// One single-pair trajectory per action, all at `state`.
    pub fn single_state(state: Vec<f64>, actions: Vec<Vec<f64>>) -> Result<Self> {
        let d_s = state.len();
        let d_a = actions.first().map_or(0, Vec::len);
        Self::new(actions.into_iter().map(|a| vec![(state.clone(), a)]).collect(), d_s, d_a)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.trajectories.iter().flatten()
    }

    pub fn num_pairs(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_pairs() == 0
    }
}

/// Resamples `items` with replacement up to the original count.
pub fn bootstrap<T: Clone, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((0..items.len()).map(|_| items[rng.random_range(0..items.len())].clone()).collect())
}

/// Trajectory-level bootstrap of a demonstration dataset.
pub fn bootstrap_trajectory<R: Rng + ?Sized>(ds: &ContinuousDemoDataset, rng: &mut R) -> Result<ContinuousDemoDataset> {
    Ok(ds.with_trajectories(bootstrap(&ds.trajectories, rng)?))
}

/// State-action-level bootstrap: a flat multiset of the original size.
pub fn bootstrap_state_action<R: Rng + ?Sized>(ds: &ContinuousDemoDataset, rng: &mut R) -> Result<Vec<Pair>> {
    bootstrap(&ds.pairs(), rng)
}

/// Adds independent `N(0, σ² I)` noise to every action.
pub fn perturb_actions<R: Rng + ?Sized>(data: &PairData, sigma: f64, rng: &mut R) -> Result<PairData> {
    if !(sigma >= 0.0) {
        return Err(param_err(format!("noise scale must be non-negative, got {sigma}")));
    }
    let trajectories = data
        .trajectories
        .iter()
        .map(|t| {
            t.iter()
                .map(|(s, a)| (s.clone(), a.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect()))
                .collect()
        })
        .collect();
    Ok(PairData { trajectories, ..data.clone() })
}

/// State features for the linear regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    /// Constant feature only: one mean per ensemble member.
    Bias,
    /// The raw state followed by a constant.
    Affine,
    /// Gaussian bumps `exp(-‖s - c‖² / (2 w²))` followed by a constant.
    Rbf { centers: Vec<Vec<f64>>, width: f64 },
}

impl FeatureMap {
    pub fn dim(&self, state_dim: usize) -> usize {
        match self {
            FeatureMap::Bias => 1,
            FeatureMap::Affine => state_dim + 1,
            FeatureMap::Rbf { centers, .. } => centers.len() + 1,
        }
    }

    pub fn features(&self, s: &[f64]) -> Vec<f64> {
        let mut phi = match self {
            FeatureMap::Bias => Vec::new(),
            FeatureMap::Affine => s.to_vec(),
            FeatureMap::Rbf { centers, width } => centers
                .iter()
                .map(|c| {
                    let d2: f64 = c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum();
                    (-d2 / (2.0 * width * width)).exp()
                })
                .collect(),
        };
        phi.push(1.0);
        phi
    }

    /// Evenly spaced 1-D centers on `[lo, hi]`.
    pub fn rbf_grid(lo: f64, hi: f64, n: usize, width: f64) -> Self {
        let centers = (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64]).collect();
        FeatureMap::Rbf { centers, width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressorConfig {
    /// Exact regularized least squares over a fixed feature map. `ridge`
    /// stabilizes the solve when no prior regularization is active.
    Linear { features: FeatureMap, ridge: f64 },
    /// Feed-forward network trained with Adam for a fixed budget.
    Mlp { hidden: Vec<usize>, epochs: usize, batch_size: usize, lr: f64 },
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig::Mlp { hidden: vec![32, 32], epochs: 200, batch_size: 32, lr: 3e-3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnsembleMode {
    #[default]
    TrajectoryBootstrap,
    StateActionBootstrap,
    /// Actions perturbed by `N(0, σ² I)`; the fit is anchored to a fresh prior
    /// draw with weight `prior_reg`.
    GaussianNoise {
        sigma: f64,
        prior_reg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regressor {
    Linear { features: FeatureMap, weights: Vec<f64>, action_dim: usize },
    Mlp { net: Mlp, state_scale: Vec<f64> },
}

impl Regressor {
    pub fn predict(&self, s: &[f64]) -> DVector<f64> {
        match self {
            Regressor::Linear { features, weights, action_dim } => {
                let phi = features.features(s);
                let w = DMatrix::from_row_slice(phi.len(), *action_dim, weights);
                w.transpose() * DVector::from_vec(phi)
            }
            Regressor::Mlp { net, state_scale } => {
                let x: Vec<f64> = s.iter().zip(state_scale).map(|(a, b)| a / b).collect();
                DVector::from_vec(net.forward(&x))
            }
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            Regressor::Linear { weights, .. } => weights,
            Regressor::Mlp { net, .. } => net.params(),
        }
    }
}

/// Solves `min_W Σ ‖Wᵀφ_i - a_i‖² + λ ‖W - W̃‖²` in closed form.
pub fn fit_linear(
    features: &FeatureMap,
    pairs: &[Pair],
    action_dim: usize,
    lambda: f64,
    anchor: &DMatrix<f64>,
) -> Result<Regressor> {
    let p = anchor.nrows();
    let mut gram = DMatrix::identity(p, p) * lambda;
    let mut rhs = anchor * lambda;
    for (s, a) in pairs {
        let phi = DVector::from_vec(features.features(s));
        gram += &phi * phi.transpose();
        rhs += &phi * DVector::from_column_slice(a).transpose();
    }
    let chol = symmetrize(&gram)
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular least-squares system; increase the ridge".into()))?;
    let w = chol.solve(&rhs);
    let weights = (0..p).flat_map(|i| (0..action_dim).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect();
    Ok(Regressor::Linear { features: features.clone(), weights, action_dim })
}

/// Per-dimension state scale used by network regressors.
pub fn state_scale(pairs: &[Pair], state_dim: usize) -> Vec<f64> {
    (0..state_dim).map(|d| pairs.iter().map(|(s, _)| s[d].abs()).fold(1.0, f64::max)).collect()
}

#[allow(clippy::too_many_arguments)]
fn fit_mlp<R: Rng + ?Sized>(
    pairs: &[Pair],
    state_dim: usize,
    action_dim: usize,
    hidden: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    prior_reg: f64,
    rng: &mut R,
) -> Result<Regressor> {
    let mut sizes = vec![state_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(action_dim);
    let mut net = Mlp::new(&sizes, rng)?;
    let anchor = net.params().to_vec();
    let scale = state_scale(pairs, state_dim);
    let inputs: Vec<Vec<f64>> = pairs.iter().map(|(s, _)| s.iter().zip(&scale).map(|(a, b)| a / b).collect()).collect();
    let n = pairs.len();
    let mut opt = Adam::new(anchor.len(), lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; anchor.len()];
    for _ in 0..epochs {
        shuffle(&mut order, rng);
        for batch in order.chunks(batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let (y, tape) = net.forward_tape(&inputs[i]);
                let g_out: Vec<f64> = y.iter().zip(&pairs[i].1).map(|(y, a)| 2.0 * w * (y - a)).collect();
                net.backward(&tape, &g_out, &mut grad);
            }
            let reg = 2.0 * prior_reg / n as f64;
            for ((g, p), a) in grad.iter_mut().zip(net.params()).zip(&anchor) {
                *g += reg * (p - a);
            }
            opt.step(net.params_mut(), &grad);
        }
    }
    Ok(Regressor::Mlp { net, state_scale: scale })
}

/// Fisher–Yates shuffle.
pub(crate) fn shuffle<T, R: Rng + ?Sized>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.random_range(0..=i));
    }
}

/// The random inputs of one gaussian-noise member with a linear regressor:
/// its perturbed actions and its prior draw `W̃` (`p × d_a`, standard normal).
pub fn gaussian_member_draws<R: Rng + ?Sized>(
    data: &PairData,
    sigma: f64,
    feature_dim: usize,
    rng: &mut R,
) -> Result<(PairData, DMatrix<f64>)> {
    let noisy = perturb_actions(data, sigma, rng)?;
    let mut anchor = DMatrix::zeros(feature_dim, data.action_dim);
    for i in 0..feature_dim {
        for j in 0..data.action_dim {
            anchor[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok((noisy, anchor))
}

/// Fits one ensemble member from its own random stream.
pub fn fit_member<R: Rng + ?Sized>(
    data: &PairData,
    mode: &EnsembleMode,
    config: &RegressorConfig,
    rng: &mut R,
) -> Result<Regressor> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (d_s, d_a) = (data.state_dim, data.action_dim);
    match (mode, config) {
        (EnsembleMode::GaussianNoise { sigma, prior_reg }, RegressorConfig::Linear { features, .. }) => {
            let (noisy, anchor) = gaussian_member_draws(data, *sigma, features.dim(d_s), rng)?;
            let pairs: Vec<Pair> = noisy.pairs().cloned().collect();
            fit_linear(features, &pairs, d_a, *prior_reg, &anchor)
        }
        (EnsembleMode::GaussianNoise { sigma, prior_reg }, RegressorConfig::Mlp { hidden, epochs, batch_size, lr }) => {
            let pairs: Vec<Pair> = perturb_actions(data, *sigma, rng)?.pairs().cloned().collect();
            fit_mlp(&pairs, d_s, d_a, hidden, *epochs, *batch_size, *lr, *prior_reg, rng)
        }
        (bootstrap_mode, config) => {
            let pairs: Vec<Pair> = match bootstrap_mode {
                EnsembleMode::TrajectoryBootstrap => {
                    bootstrap(&data.trajectories, rng)?.into_iter().flatten().collect()
                }
                _ => bootstrap(&data.pairs().cloned().collect::<Vec<_>>(), rng)?,
            };
            match config {
                RegressorConfig::Linear { features, ridge } => {
                    let anchor = DMatrix::zeros(features.dim(d_s), d_a);
                    fit_linear(features, &pairs, d_a, *ridge, &anchor)
                }
                RegressorConfig::Mlp { hidden, epochs, batch_size, lr } => {
                    fit_mlp(&pairs, d_s, d_a, hidden, *epochs, *batch_size, *lr, 0.0, rng)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleHeader {
    #[serde(rename = "K")]
    pub size: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub mode: EnsembleMode,
    pub config: RegressorConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub header: EnsembleHeader,
    pub members: Vec<Regressor>,
}

/// Fits `k` members in parallel. Member `l` uses stream `l` of a seed drawn
/// from `rng`.
pub fn fit_ensemble<R: Rng + ?Sized>(
    data: &PairData,
    k: usize,
    mode: &EnsembleMode,
    config: &RegressorConfig,
    rng: &mut R,
) -> Result<Ensemble> {
    let streams: Vec<u64> = (0..k as u64).collect();
    fit_ensemble_streams(data, mode, config, rng.next_u64(), &streams)
}

/// As [`fit_ensemble`] with explicit member streams of `seed`.
pub fn fit_ensemble_streams(
    data: &PairData,
    mode: &EnsembleMode,
    config: &RegressorConfig,
    seed: u64,
    streams: &[u64],
) -> Result<Ensemble> {
    if streams.len() < 2 {
        return Err(param_err(format!("an ensemble needs at least 2 members, got {}", streams.len())));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let members = streams
        .par_iter()
        .map(|&l| fit_member(data, mode, config, &mut rng::stream(seed, l)))
        .collect::<Result<Vec<_>>>()?;
    let header = EnsembleHeader {
        size: members.len(),
        state_dim: data.state_dim,
        action_dim: data.action_dim,
        mode: mode.clone(),
        config: config.clone(),
        seed,
    };
    Ok(Ensemble { header, members })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovNormalization {
    Sum,
    #[default]
    Sample,
}

/// Spread of `predictions` around their mean: the scatter matrix (`Sum`) or
/// the unbiased sample covariance (`Sample`), clamped to be PSD.
pub fn prediction_cov(predictions: &[DVector<f64>], normalization: CovNormalization) -> Result<DMatrix<f64>> {
    let k = predictions.len();
    if k < 2 {
        return Err(param_err(format!("an ensemble needs at least 2 members, got {k}")));
    }
    let d = predictions[0].len();
    let mean = predictions.iter().fold(DVector::zeros(d), |acc, p| acc + p) / k as f64;
    let mut scatter = DMatrix::zeros(d, d);
    for p in predictions {
        let c = p - &mean;
        scatter += &c * c.transpose();
    }
    if normalization == CovNormalization::Sample {
        scatter /= (k - 1) as f64;
    }
    let cov = symmetrize(&scatter);
    if cov.clone().symmetric_eigenvalues().min() < 0.0 {
        let l = psd_factor(&cov);
        return Ok(symmetrize(&(&l * l.transpose())));
    }
    Ok(cov)
}

impl Ensemble {
    pub fn predictions(&self, s: &[f64]) -> Vec<DVector<f64>> {
        self.members.iter().map(|m| m.predict(s)).collect()
    }

    pub fn posterior_cov(&self, s: &[f64], normalization: CovNormalization) -> Result<DMatrix<f64>> {
        if s.len() != self.header.state_dim {
            return Err(dim_err(format!(
                "state of dimension {} for a {}-dimensional ensemble",
                s.len(),
                self.header.state_dim
            )));
        }
        prediction_cov(&self.predictions(s), normalization)
    }

    /// A JSON header line followed by one line of parameters per member.
    pub fn to_text(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for m in &self.members {
            let mut meta = serde_json::to_value(m)?;
            strip_params(&mut meta);
            out.push_str(&serde_json::to_string(&meta)?);
            out.push('\n');
            let line: Vec<String> = m.params().iter().map(|p| format!("{p:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: EnsembleHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Parse("empty file".into()))?)?;
        let mut members = Vec::with_capacity(header.size);
        for _ in 0..header.size {
            let meta: serde_json::Value =
                serde_json::from_str(lines.next().ok_or_else(|| Error::Parse("missing member header".into()))?)?;
            let params = parse_params(lines.next().ok_or_else(|| Error::Parse("missing member parameters".into()))?)?;
            members.push(restore_params(meta, params)?);
        }
        Ok(Self { header, members })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_text()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn strip_params(v: &mut serde_json::Value) {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("weights");
        if let Some(net) = obj.get_mut("net").and_then(|n| n.as_object_mut()) {
            net.remove("params");
        }
    }
}

pub(crate) fn parse_params(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad parameter `{t}`: {e}"))))
        .collect()
}

fn restore_params(mut meta: serde_json::Value, params: Vec<f64>) -> Result<Regressor> {
    let obj = meta.as_object_mut().ok_or_else(|| Error::Parse("member header is not an object".into()))?;
    match obj.get("kind").and_then(|k| k.as_str()) {
        Some("linear") => {
            obj.insert("weights".into(), serde_json::to_value(params)?);
        }
        Some("mlp") => {
            let net = obj
                .get_mut("net")
                .and_then(|n| n.as_object_mut())
                .ok_or_else(|| Error::Parse("missing network description".into()))?;
            net.insert("params".into(), serde_json::to_value(params)?);
        }
        _ => return Err(Error::Parse("unknown regressor kind".into())),
    }
    Ok(serde_json::from_value(meta)?)
}

/// A state-conditional covariance used to perturb action targets.
pub trait CovSource: Sync {
    fn action_dim(&self) -> usize;
    fn cov(&self, state: &[f64]) -> Result<DMatrix<f64>>;
}

/// Ensemble-derived covariance field.
#[derive(Debug, Clone, PartialEq)]
pub struct CovField {
    pub ensemble: Ensemble,
    pub normalization: CovNormalization,
}

impl CovField {
    pub fn new(ensemble: Ensemble, normalization: CovNormalization) -> Self {
        Self { ensemble, normalization }
    }
}

impl CovSource for CovField {
    fn action_dim(&self) -> usize {
        self.ensemble.header.action_dim
    }

    fn cov(&self, state: &[f64]) -> Result<DMatrix<f64>> {
        self.ensemble.posterior_cov(state, self.normalization)
    }
}

/// The same covariance at every state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCov(pub DMatrix<f64>);

impl ConstantCov {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Self(DMatrix::identity(dim, dim) * variance)
    }
}

impl CovSource for ConstantCov {
    fn action_dim(&self) -> usize {
        self.0.nrows()
    }

    fn cov(&self, _state: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}
