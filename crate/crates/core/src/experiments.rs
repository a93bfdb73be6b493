//! End-to-end experiment drivers shared by the command-line runner and the
//! acceptance suite. Every driver is a deterministic function of its config.
//!
//! Drivers return plain result rows plus a list of [`MetricRow`] checks; a
//! check carries its threshold and whether it passed.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constructions::{prop1_bandits, prop1_finetune_study, prop2_chain, thm2_measured_gamma};
use crate::continuous::ContinuousDemoDataset;
use crate::diffusion::{
    gradient_check, sample_many, train_bc, train_postbc, train_sigma_bc, GenerativePolicy, GradCheckRow, TrainConfig,
    TrainStats,
};
use crate::ensemble::{
    fit_ensemble, CovField, CovNormalization, CovSource, EnsembleMode, FeatureMap, PairData, RegressorConfig,
};
use crate::error::{param_err, Result};
use crate::estimators::{
    bc_estimate, coverage_gamma, coverage_lower_bound_holds, default_theorem_params, monte_carlo_estimator_study,
    suboptimality, uniform_mix_estimate, EstimatorId, EstimatorSpec, StudySummary,
};
use crate::finetune::{collect_rollouts, evaluate_bon, evaluate_success, fit_expectile_q, BonRow, QConfig};
use crate::gaussian::{moment_check, reference_instance, MomentRow};
use crate::mdp::{collect_dataset, counts, TabularMdp, TabularPolicy};
use crate::report::{fmt_float, CsvRow, MetricRow};
use crate::rng;
use crate::stats::{frobenius_rel_err, ks_critical_value, ks_statistic, mean_se, normal_cdf};
use crate::toy_env::{
    collect_continuous_dataset, fork_env, fork_left_fixture, reacher_env, scripted_demonstrator, ContinuousEnv,
    GoalSet, TrajectoryFilter, DEFAULT_REJECTION_BUDGET,
};

fn check(experiment: &str, metric: &str, value: f64, threshold: f64, passed: bool) -> MetricRow {
    MetricRow::new(experiment, metric, value).checked(threshold, passed)
}

/// `true` when every checked row passed.
pub fn all_passed(rows: &[MetricRow]) -> bool {
    rows.iter().all(|r| r.passed != Some(false))
}

// Tabular suite ------------------------------------------------------------

/// How the demonstrator of each random MDP is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DemonstratorKind {
    /// Every row drawn from `Dirichlet(1, …, 1)`.
    Dirichlet,
    /// The optimal policy mixed with the uniform one: `(1 - ε) π* + ε / A`.
    EpsOptimal { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularSuiteConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    #[serde(rename = "T")]
    pub ts: Vec<usize>,
    pub draws: usize,
    pub delta: f64,
    pub demonstrator: DemonstratorKind,
    pub estimators: Vec<EstimatorId>,
    pub seed: u64,
}

impl Default for TabularSuiteConfig {
    fn default() -> Self {
        Self {
            num_states: 5,
            num_actions: 4,
            horizon: 3,
            ts: vec![50, 250, 1000],
            draws: 2000,
            delta: 0.1,
            demonstrator: DemonstratorKind::Dirichlet,
            estimators: vec![EstimatorId::Bc, EstimatorId::Pt],
            seed: 0,
        }
    }
}

impl TabularSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions < 2 || self.horizon == 0 {
            return Err(param_err("num_states >= 1, num_actions >= 2 and horizon >= 1 are required"));
        }
        if self.ts.is_empty() || self.ts.contains(&0) {
            return Err(param_err("T: need at least one positive dataset size"));
        }
        if self.draws < 2 {
            return Err(param_err("draws: need at least 2"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(param_err("delta: must lie in (0, 1)"));
        }
        if let DemonstratorKind::EpsOptimal { epsilon } = self.demonstrator {
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(param_err("demonstrator.epsilon: must lie in [0, 1]"));
            }
        }
        if self.estimators.is_empty() {
            return Err(param_err("estimators: need at least one"));
        }
        Ok(())
    }
}

/// One CSV row of the tabular suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub estimator: EstimatorId,
    pub t: usize,
    pub n_draws: usize,
    pub mean_subopt: f64,
    pub se_subopt: f64,
    pub frac_gamma_positive: f64,
    pub frac_bound_fail: f64,
    pub seed: u64,
}

impl CsvRow for SuiteRow {
    fn header() -> &'static str {
        "estimator,T,n_draws,mean_subopt,se_subopt,frac_gamma_positive,frac_bound_fail,seed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.estimator,
            self.t,
            self.n_draws,
            fmt_float(self.mean_subopt),
            fmt_float(self.se_subopt),
            fmt_float(self.frac_gamma_positive),
            fmt_float(self.frac_bound_fail),
            self.seed
        )
    }
}

fn suite_demonstrator<R: Rng + ?Sized>(
    cfg: &TabularSuiteConfig,
    mdp: &TabularMdp,
    rng: &mut R,
) -> Result<TabularPolicy> {
    let (s, a, h) = (cfg.num_states, cfg.num_actions, cfg.horizon);
    match cfg.demonstrator {
        DemonstratorKind::Dirichlet => Ok(TabularPolicy::random(s, a, h, rng)),
        DemonstratorKind::EpsOptimal { epsilon } => {
            let (opt, _) = mdp.optimal_policy();
            let probs = opt.probs().iter().map(|p| (1.0 - epsilon) * p + epsilon / a as f64).collect();
            TabularPolicy::new(s, a, h, probs)
        }
    }
}

/// Random-MDP suite. Draw `i` takes stream `i` of the seed: a random MDP,
/// its demonstrator and a data seed; the size-`T` dataset of that draw uses
/// stream `T` of the data seed, so every `T` sees the same MDPs.
pub fn tabular_suite(cfg: &TabularSuiteConfig) -> Result<Vec<SuiteRow>> {
    cfg.validate()?;
    let (s_n, a_n, h_n) = (cfg.num_states, cfg.num_actions, cfg.horizon);
    // outcomes[draw][t][estimator] = (suboptimality, gamma, bound holds)
    let outcomes: Vec<Vec<Vec<(f64, f64, bool)>>> = (0..cfg.draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, i);
            let mdp = TabularMdp::random(s_n, a_n, h_n, &mut r)?;
            let beta = suite_demonstrator(cfg, &mdp, &mut r)?;
            let data_seed = r.next_u64();
            cfg.ts
                .iter()
                .map(|&t| {
                    let ds = collect_dataset(&mdp, &beta, t, &mut rng::stream(data_seed, t as u64))?;
                    let c = counts(&ds, s_n, a_n, h_n)?;
                    let params = default_theorem_params(a_n, h_n, t);
                    cfg.estimators
                        .iter()
                        .map(|&id| {
                            let pi = EstimatorSpec::new(id).estimate(&c, &beta, t)?;
                            Ok((
                                suboptimality(&mdp, &beta, &pi)?,
                                coverage_gamma(&pi, &beta)?,
                                coverage_lower_bound_holds(&pi, &beta, params, cfg.delta)?,
                            ))
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = cfg.draws as f64;
    let mut rows = Vec::new();
    for (ti, &t) in cfg.ts.iter().enumerate() {
        for (ei, &id) in cfg.estimators.iter().enumerate() {
            let cell: Vec<(f64, f64, bool)> = outcomes.iter().map(|d| d[ti][ei]).collect();
            let subopts: Vec<f64> = cell.iter().map(|c| c.0).collect();
            let (mean, se) = mean_se(&subopts);
            rows.push(SuiteRow {
                estimator: id,
                t,
                n_draws: cfg.draws,
                mean_subopt: mean,
                se_subopt: se,
                frac_gamma_positive: cell.iter().filter(|c| c.1 > 0.0).count() as f64 / n,
                frac_bound_fail: cell.iter().filter(|c| !c.2).count() as f64 / n,
                seed: cfg.seed,
            });
        }
    }
    Ok(rows)
}

fn suite_row(rows: &[SuiteRow], id: EstimatorId, t: usize) -> Result<&SuiteRow> {
    rows.iter()
        .find(|r| r.estimator == id && r.t == t)
        .ok_or_else(|| param_err(format!("suite has no row for {id} at T = {t}")))
}

/// Coverage checks: the per-draw lower bound fails in at most 13% of draws
/// and `γ(π̂^pt) > 0` in every draw, at every `T`.
pub fn suite_coverage_checks(rows: &[SuiteRow]) -> Vec<MetricRow> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.estimator == EstimatorId::Pt) {
        out.push(check(
            "thm1-coverage",
            &format!("frac_bound_fail_T{}", r.t),
            r.frac_bound_fail,
            0.13,
            r.frac_bound_fail <= 0.13,
        ));
        out.push(check(
            "thm1-coverage",
            &format!("frac_gamma_positive_T{}", r.t),
            r.frac_gamma_positive,
            1.0,
            r.frac_gamma_positive == 1.0,
        ));
    }
    out
}

/// Suboptimality checks: `pt ≤ bc + 0.02` at every `T`, and the `pt`
/// suboptimality at the largest `T` is at most 0.6 times the value at the
/// second largest.
pub fn suite_subopt_checks(rows: &[SuiteRow], ts: &[usize]) -> Result<Vec<MetricRow>> {
    let mut out = Vec::new();
    for &t in ts {
        let (pt, bc) = (suite_row(rows, EstimatorId::Pt, t)?, suite_row(rows, EstimatorId::Bc, t)?);
        let gap = pt.mean_subopt - bc.mean_subopt;
        out.push(check("thm1-subopt", &format!("pt_minus_bc_T{t}"), gap, 0.02, gap <= 0.02));
    }
    let mut sorted = ts.to_vec();
    sorted.sort_unstable();
    if let [.., mid, last] = sorted[..] {
        let ratio =
            suite_row(rows, EstimatorId::Pt, last)?.mean_subopt / suite_row(rows, EstimatorId::Pt, mid)?.mean_subopt;
        out.push(check("thm1-subopt", &format!("pt_ratio_T{last}_over_T{mid}"), ratio, 0.6, ratio <= 0.6));
    }
    Ok(out)
}

// Counterexamples ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub trials: usize,
    pub t_prime: usize,
    pub finetune_reps: usize,
    pub seed: u64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self { epsilon: 0.01, t: 4, trials: 10_000, t_prime: 2000, finetune_reps: 200, seed: 0 }
    }
}

/// Coverage-failure study of BC and the posterior mixture on the two bandits.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Result {
    pub studies: Vec<StudySummary>,
    /// Collapse frequency against its closed form.
    pub metrics: Vec<MetricRow>,
    /// Finetuning outcome per pretraining estimator.
    pub finetune: Vec<FinetuneRow>,
    pub checks: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub pretraining: EstimatorId,
    pub reps: usize,
    /// Repetitions whose pretrained policy excludes an optimal arm.
    pub collapsed: usize,
    /// Collapsed repetitions that end with regret exactly 1 on some bandit.
    pub collapsed_with_unit_regret: usize,
    /// Repetitions with zero regret on both bandits.
    pub recovered: usize,
    pub seed: u64,
}

impl CsvRow for FinetuneRow {
    fn header() -> &'static str {
        "pretraining,reps,collapsed,collapsed_with_unit_regret,recovered,frac_recovered,seed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.pretraining,
            self.reps,
            self.collapsed,
            self.collapsed_with_unit_regret,
            self.recovered,
            fmt_float(self.recovered as f64 / self.reps as f64),
            self.seed
        )
    }
}

pub fn prop1_experiment(cfg: &Prop1Config) -> Result<Prop1Result> {
    if cfg.t == 0 || cfg.trials == 0 || cfg.t_prime == 0 || cfg.finetune_reps == 0 {
        return Err(param_err("T, trials, t_prime and finetune_reps must be positive"));
    }
    let inst = prop1_bandits(cfg.epsilon)?;
    let mut studies = Vec::new();
    let mut finetune = Vec::new();
    for id in [EstimatorId::Bc, EstimatorId::Pt] {
        let spec = EstimatorSpec::new(id);
        studies.push(monte_carlo_estimator_study(&inst.m1, &inst.demonstrator, &spec, cfg.t, cfg.trials, cfg.seed)?);
        let fin_seed = cfg.seed ^ 0x5eed_f1e7;
        let reps = prop1_finetune_study(&inst, &spec, cfg.t, cfg.t_prime, cfg.finetune_reps, fin_seed)?;
        let collapsed: Vec<_> = reps.iter().filter(|c| c.excludes_optimal.contains(&true)).collect();
        finetune.push(FinetuneRow {
            pretraining: id,
            reps: reps.len(),
            collapsed: collapsed.len(),
            collapsed_with_unit_regret: collapsed.iter().filter(|c| c.max_regret() == 1.0).count(),
            recovered: reps.iter().filter(|c| c.max_regret() == 0.0).count(),
            seed: fin_seed,
        });
    }
    // Same dataset streams as the studies above.
    let collapsed = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| {
            let ds = collect_dataset(&inst.m1, &inst.demonstrator, cfg.t, &mut rng::stream(cfg.seed, i))?;
            let c = counts(&ds, 1, 3, 1)?;
            Ok(c.state_action(0, 0, 1) == 0 && c.state_action(0, 0, 2) == 0)
        })
        .collect::<Result<Vec<bool>>>()?;
    let frac = collapsed.iter().filter(|&&c| c).count() as f64 / cfg.trials as f64;
    let target = (1.0 - 4.0 * cfg.epsilon).powi(cfg.t as i32);
    let metrics = vec![
        MetricRow::new("prop1", "bc_frac_gamma_zero", studies[0].frac_gamma_zero),
        MetricRow::new("prop1", "bc_frac_support_collapsed", frac),
        MetricRow::new("prop1", "collapse_probability_closed_form", target),
    ];
    let bc_ft = &finetune[0];
    let pt_ft = &finetune[1];
    let pt_frac = pt_ft.recovered as f64 / pt_ft.reps as f64;
    let checks = vec![
        check("prop1", "bc_collapsed_minus_closed_form", frac - target, 0.02, (frac - target).abs() <= 0.02),
        check(
            "prop1",
            "bc_collapsed_unit_regret_frac",
            bc_ft.collapsed_with_unit_regret as f64 / bc_ft.collapsed.max(1) as f64,
            1.0,
            bc_ft.collapsed > 0 && bc_ft.collapsed_with_unit_regret == bc_ft.collapsed,
        ),
        check("prop1", "pt_frac_recovered", pt_frac, 0.95, pt_frac >= 0.95),
    ];
    Ok(Prop1Result { studies, metrics, finetune, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop2Config {
    #[serde(rename = "T")]
    pub t: usize,
    pub num_states: usize,
    pub horizon: usize,
    pub delta: f64,
    pub trials: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl Default for Prop2Config {
    fn default() -> Self {
        Self {
            t: 8,
            num_states: 5,
            horizon: 4,
            delta: 0.08,
            trials: 10_000,
            alphas: vec![0.01, 0.05, 0.1, 0.25, 0.5],
            seed: 0,
        }
    }
}

/// Per-α coverage of the uniform-noise mixture at the rare state, over the
/// draws in which the rare state was seen exactly once, on `a2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Row {
    pub alpha: f64,
    pub trials: usize,
    pub event_count: usize,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub expected: f64,
    pub exact_matches: usize,
    pub seed: u64,
}

impl CsvRow for Prop2Row {
    fn header() -> &'static str {
        "alpha,trials,event_count,event_freq,coverage_min,coverage_max,expected,exact_matches,seed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            fmt_float(self.alpha),
            self.trials,
            self.event_count,
            fmt_float(self.event_count as f64 / self.trials as f64),
            fmt_float(self.coverage_min),
            fmt_float(self.coverage_max),
            fmt_float(self.expected),
            self.exact_matches,
            self.seed
        )
    }
}

pub fn prop2_experiment(cfg: &Prop2Config) -> Result<(Vec<Prop2Row>, Vec<MetricRow>)> {
    if cfg.trials == 0 || cfg.alphas.is_empty() || cfg.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(param_err("trials must be positive and every alpha must lie in (0, 1]"));
    }
    let inst = prop2_chain(cfg.t, cfg.horizon, cfg.num_states, cfg.delta)?;
    let (s_n, h_n) = (cfg.num_states, cfg.horizon);
    let rare = inst.rare_state;
    let a_n = 2.0;
    // Per trial: None off the event, otherwise the rare-state coverage per α.
    let per_trial: Vec<Option<Vec<f64>>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| {
            let ds = collect_dataset(&inst.mdp, &inst.demonstrator, cfg.t, &mut rng::stream(cfg.seed, i))?;
            let c = counts(&ds, s_n, 2, h_n)?;
            if !(c.state(0, rare) == 1 && c.state_action(0, rare, 1) == 1) {
                return Ok(None);
            }
            let bc = bc_estimate(&c);
            let covs = cfg
                .alphas
                .iter()
                .map(|&alpha| {
                    let u = uniform_mix_estimate(&bc, alpha)?;
                    Ok((0..2)
                        .map(|a| u.prob(0, rare, a) / inst.demonstrator.prob(0, rare, a))
                        .fold(f64::INFINITY, f64::min))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Some(covs))
        })
        .collect::<Result<_>>()?;
    let events: Vec<&Vec<f64>> = per_trial.iter().flatten().collect();
    let freq = events.len() as f64 / cfg.trials as f64;
    let mut rows = Vec::new();
    let mut checks = vec![check("prop2", "event_freq", freq, 0.08, freq >= 0.08)];
    for (k, &alpha) in cfg.alphas.iter().enumerate() {
        let expected = (alpha / a_n) / 0.5;
        let vals: Vec<f64> = events.iter().map(|v| v[k]).collect();
        let exact = vals.iter().filter(|&&v| v == expected).count();
        rows.push(Prop2Row {
            alpha,
            trials: cfg.trials,
            event_count: events.len(),
            coverage_min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            coverage_max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            expected,
            exact_matches: exact,
            seed: cfg.seed,
        });
        checks.push(check(
            "prop2",
            &format!("exact_coverage_frac_alpha{}", fmt_float(alpha)),
            exact as f64 / vals.len().max(1) as f64,
            1.0,
            !vals.is_empty() && exact == vals.len(),
        ));
    }
    Ok((rows, checks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thm2Config {
    #[serde(rename = "T")]
    pub t: usize,
    pub actions: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for Thm2Config {
    fn default() -> Self {
        Self { t: 50, actions: vec![2, 4, 8], trials: 20_000, seed: 0 }
    }
}

pub fn thm2_experiment(cfg: &Thm2Config) -> Result<(Vec<MetricRow>, Vec<MetricRow>)> {
    if cfg.actions.len() < 2 || cfg.actions.iter().any(|&a| a < 2) {
        return Err(param_err("actions: need at least two action counts, each >= 2"));
    }
    let spec = EstimatorSpec::new(EstimatorId::Pt);
    let gammas = cfg
        .actions
        .iter()
        .map(|&a| thm2_measured_gamma(a, cfg.t, &spec, cfg.trials, cfg.seed))
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<MetricRow> =
        cfg.actions.iter().zip(&gammas).map(|(a, g)| MetricRow::new("thm2", format!("gamma_pt_A{a}"), *g)).collect();
    let decreasing = gammas.windows(2).all(|w| w[1] < w[0]);
    let ratio = gammas[0] / gammas[gammas.len() - 1];
    let (a_lo, a_hi) = (cfg.actions[0], cfg.actions[cfg.actions.len() - 1]);
    let checks = vec![
        check("thm2", "gamma_decreasing_in_A", if decreasing { 1.0 } else { 0.0 }, 1.0, decreasing),
        check("thm2", &format!("gamma_ratio_A{a_lo}_over_A{a_hi}"), ratio, 2.0, (2.0..=8.0).contains(&ratio)),
    ];
    Ok((rows, checks))
}

// Posterior checks -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianCheckConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for GaussianCheckConfig {
    fn default() -> Self {
        Self { samples: 10_000, seed: 0 }
    }
}

/// Moments of both samplers on the reference instance.
pub fn gaussian_check(cfg: &GaussianCheckConfig) -> Result<Vec<MomentRow>> {
    if cfg.samples < 2 {
        return Err(param_err("samples: need at least 2"));
    }
    let (model, data) = reference_instance();
    moment_check(&model, &data, cfg.samples, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleCheckConfig {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma: f64,
    pub prior_reg: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EnsembleCheckConfig {
    fn default() -> Self {
        Self { t: 20, k: 1000, sigma: 1.0, prior_reg: 1.0, tolerance: 0.1, seed: 0 }
    }
}

/// Single-state, 2-D linear-Gaussian calibration: `T` actions from
/// `N((0.3, 0), I)`, a bias-only ensemble in gaussian-noise mode, compared
/// against the closed-form posterior covariance `I / (T + 1)`.
pub fn ensemble_check(cfg: &EnsembleCheckConfig) -> Result<Vec<MetricRow>> {
    if cfg.t == 0 || cfg.k < 2 {
        return Err(param_err("T >= 1 and K >= 2 are required"));
    }
    let mut r = rng::seeded(cfg.seed);
    let actions: Vec<Vec<f64>> = (0..cfg.t)
        .map(|_| vec![0.3 + r.sample::<f64, _>(rand_distr::StandardNormal), r.sample(rand_distr::StandardNormal)])
        .collect();
    let data = PairData::single_state(vec![0.0], actions.clone())?;
    let mode = EnsembleMode::GaussianNoise { sigma: cfg.sigma, prior_reg: cfg.prior_reg };
    let config = RegressorConfig::Linear { features: FeatureMap::Bias, ridge: 1e-9 };
    let ens = fit_ensemble(&data, cfg.k, &mode, &config, &mut r)?;
    let cov = ens.posterior_cov(&[0.0], CovNormalization::Sample)?;
    // Closed form with Σ = σ² I and prior covariance σ² / prior_reg · I.
    let s2 = cfg.sigma * cfg.sigma;
    let post_var = s2 / (cfg.t as f64 + cfg.prior_reg);
    let target = nalgebra::DMatrix::identity(2, 2) * post_var;
    let rel = frobenius_rel_err(&cov, &target);
    let mut rows = vec![
        MetricRow::new("ensemble-check", "cov_00", cov[(0, 0)]),
        MetricRow::new("ensemble-check", "cov_01", cov[(0, 1)]),
        MetricRow::new("ensemble-check", "cov_11", cov[(1, 1)]),
        MetricRow::new("ensemble-check", "analytic_var", post_var),
        check("ensemble-check", "cov_frobenius_rel_err", rel, cfg.tolerance, rel <= cfg.tolerance),
    ];
    let preds = ens.predictions(&[0.0]);
    let crit = ks_critical_value(cfg.k, 0.01);
    for i in 0..2 {
        let mean = actions.iter().map(|a| a[i]).sum::<f64>() / (cfg.t as f64 + cfg.prior_reg);
        let v: Vec<f64> = preds.iter().map(|p| p[i]).collect();
        let ks = ks_statistic(&v, |x| normal_cdf(x, mean, post_var.sqrt()));
        rows.push(check("ensemble-check", &format!("ks_member_mean_{i}"), ks, crit, ks <= crit));
    }
    Ok(rows)
}

pub fn gradient_check_default(seed: u64) -> Result<Vec<GradCheckRow>> {
    gradient_check(&[vec![8, 8], vec![16, 4], vec![5, 12]], 10, seed)
}

// Continuous pretraining -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMethod {
    Bc,
    SigmaBc,
    Postbc,
}

/// Covariance-field ensemble and PostBC settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostbcConfig {
    #[serde(rename = "K")]
    pub ensemble_size: usize,
    pub mode: EnsembleMode,
    pub regressor: RegressorConfig,
    pub normalization: CovNormalization,
    pub alpha: f64,
}

impl Default for PostbcConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 100,
            mode: EnsembleMode::GaussianNoise { sigma: 1.0, prior_reg: 1.0 },
            regressor: RegressorConfig::Linear { features: FeatureMap::rbf_grid(-3.0, 3.0, 7, 1.0), ridge: 1e-9 },
            normalization: CovNormalization::Sample,
            alpha: 5.0,
        }
    }
}

impl PostbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(param_err("postbc.K: need at least 2 members"));
        }
        if !(self.alpha >= 0.0) {
            return Err(param_err("postbc.alpha: must be non-negative"));
        }
        if let EnsembleMode::GaussianNoise { sigma, prior_reg } = self.mode {
            if !(sigma > 0.0 && prior_reg >= 0.0) {
                return Err(param_err("postbc.mode: need sigma > 0 and prior_reg >= 0"));
            }
        }
        Ok(())
    }
}

/// Fits the covariance field of `dataset`.
pub fn fit_cov_field<R: Rng + ?Sized>(
    dataset: &ContinuousDemoDataset,
    cfg: &PostbcConfig,
    rng: &mut R,
) -> Result<CovField> {
    cfg.validate()?;
    let data = PairData::from_dataset(dataset);
    let ens = fit_ensemble(&data, cfg.ensemble_size, &cfg.mode, &cfg.regressor, rng)?;
    Ok(CovField::new(ens, cfg.normalization))
}

/// BC and PostBC trained on the same fork fixture. Both share one training
/// stream, so they differ only through the target noise.
#[derive(Debug, Clone)]
pub struct ForkPretraining {
    pub dataset: ContinuousDemoDataset,
    pub cov_field: CovField,
    pub bc: GenerativePolicy,
    pub postbc: GenerativePolicy,
    pub bc_stats: TrainStats,
    pub postbc_stats: TrainStats,
}

pub fn pretrain_fork(seed: u64, postbc: &PostbcConfig, train: &TrainConfig) -> Result<ForkPretraining> {
    let dataset = fork_left_fixture(seed)?;
    let cov_field = fit_cov_field(&dataset, postbc, &mut rng::stream(seed, 1))?;
    let train_seed = rng::stream(seed, 2).next_u64();
    let (bc, bc_stats) = train_bc(&dataset, train, &mut rng::seeded(train_seed))?;
    let (pb, postbc_stats) = train_postbc(&dataset, &cov_field, postbc.alpha, train, &mut rng::seeded(train_seed))?;
    Ok(ForkPretraining { dataset, cov_field, bc, postbc: pb, bc_stats, postbc_stats })
}

// Fork figure ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub grid_points: usize,
    pub postbc: PostbcConfig,
    pub train: TrainConfig,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            samples: 1000,
            grid_points: 61,
            postbc: PostbcConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Ensemble variance of the (1-D) fork action along the state axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CovRow {
    pub seed: u64,
    pub state: f64,
    pub cov: f64,
}

impl CsvRow for CovRow {
    fn header() -> &'static str {
        "seed,state,cov"
    }

    fn row(&self) -> String {
        format!("{},{},{}", self.seed, fmt_float(self.state), fmt_float(self.cov))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub seed: u64,
    pub method: &'static str,
    pub state: f64,
    pub index: usize,
    pub action: f64,
}

impl CsvRow for SampleRow {
    fn header() -> &'static str {
        "seed,method,state,index,action"
    }

    fn row(&self) -> String {
        format!("{},{},{},{},{}", self.seed, self.method, fmt_float(self.state), self.index, fmt_float(self.action))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Result {
    pub cov: Vec<CovRow>,
    pub samples: Vec<SampleRow>,
    pub metrics: Vec<MetricRow>,
    pub checks: Vec<MetricRow>,
}

/// Post-fork states seen at least once per demonstration on average.
pub fn dense_states(ds: &ContinuousDemoDataset) -> Vec<f64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for (s, _) in ds.pairs() {
        if s[0] != 0.0 {
            *counts.entry(s[0].to_bits()).or_default() += 1;
        }
    }
    let mut out: Vec<f64> =
        counts.into_iter().filter(|&(_, c)| c >= ds.len()).map(|(b, _)| f64::from_bits(b)).collect();
    out.sort_by(f64::total_cmp);
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Minority-branch mass at the fork: fraction of sampled actions that
/// point right, away from every demonstration.
pub fn minority_mass(actions: &[Vec<f64>]) -> f64 {
    actions.iter().filter(|a| a[0] > 0.0).count() as f64 / actions.len() as f64
}

pub fn fig1_experiment(cfg: &Fig1Config) -> Result<Fig1Result> {
    if cfg.seeds.is_empty() || cfg.samples == 0 || cfg.grid_points < 2 {
        return Err(param_err("need at least one seed, one sample and two grid points"));
    }
    cfg.train.validate()?;
    let mut res = Fig1Result { cov: Vec::new(), samples: Vec::new(), metrics: Vec::new(), checks: Vec::new() };
    let (mut bc_minority, mut pb_minority, mut max_gap) = (Vec::new(), Vec::new(), 0.0f64);
    for &seed in &cfg.seeds {
        let pre = pretrain_fork(seed, &cfg.postbc, &cfg.train)?;
        for i in 0..cfg.grid_points {
            let x = -3.0 + 6.0 * i as f64 / (cfg.grid_points - 1) as f64;
            res.cov.push(CovRow { seed, state: x, cov: pre.cov_field.cov(&[x])?[(0, 0)] });
        }
        let sample_seed = rng::stream(seed, 3).next_u64();
        let mut states = vec![0.0];
        states.extend(dense_states(&pre.dataset));
        for (si, &x) in states.iter().enumerate() {
            let mut draws = Vec::new();
            for (method, policy) in [("bc", &pre.bc), ("postbc", &pre.postbc)] {
                let acts = sample_many(policy, &[x], cfg.samples, sample_seed ^ si as u64)?;
                res.samples.extend(acts.iter().enumerate().map(|(index, a)| SampleRow {
                    seed,
                    method,
                    state: x,
                    index,
                    action: a[0],
                }));
                let flat: Vec<f64> = acts.iter().map(|a| a[0]).collect();
                let (m, sd) = mean_std(&flat);
                let tag = format!("seed{seed}_{method}_x{}", fmt_float(x));
                res.metrics.push(MetricRow::new("fig1", format!("{tag}_mean"), m));
                res.metrics.push(MetricRow::new("fig1", format!("{tag}_std"), sd));
                if si == 0 {
                    let mass = minority_mass(&acts);
                    res.metrics.push(MetricRow::new("fig1", format!("seed{seed}_{method}_minority_mass"), mass));
                    if method == "bc" {
                        bc_minority.push(mass);
                    } else {
                        pb_minority.push(mass);
                    }
                }
                draws.push(m);
            }
            if si > 0 {
                max_gap = max_gap.max((draws[1] - draws[0]).abs());
            }
        }
    }
    let bc_m = bc_minority.iter().sum::<f64>() / bc_minority.len() as f64;
    let pb_m = pb_minority.iter().sum::<f64>() / pb_minority.len() as f64;
    res.checks = vec![
        check("fig1", "bc_minority_mass_mean", bc_m, 0.05, bc_m <= 0.05),
        check("fig1", "postbc_minority_mass_mean", pb_m, 0.15, pb_m >= 0.15),
        check("fig1", "dense_state_mean_gap_max", max_gap, 0.1, max_gap <= 0.1),
    ];
    Ok(res)
}

// Best-of-N finetuning ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BonConfig {
    pub seeds: Vec<u64>,
    #[serde(rename = "T_on")]
    pub t_on: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub episodes: usize,
    pub tau: f64,
    pub gamma: f64,
    /// Success criterion during finetuning; pretraining demos are left-only.
    pub finetune_goals: GoalSet,
    pub q: QConfig,
    pub postbc: PostbcConfig,
    pub train: TrainConfig,
}

impl Default for BonConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            t_on: 100,
            n: 16,
            episodes: 200,
            tau: 0.7,
            gamma: 0.99,
            finetune_goals: GoalSet::Right,
            q: QConfig::default(),
            postbc: PostbcConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonResult {
    pub rows: Vec<BonRow>,
    pub checks: Vec<MetricRow>,
}

fn mean_rate(rows: &[BonRow], method: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.success_rate).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Pretrains BC and PostBC on the left-only fork fixture, collects `T_on`
/// rollouts of each on the finetuning task, fits an expectile Q-function to
/// them and evaluates Best-of-N execution. Pretrained success rates are
/// reported on the finetuning task and on each goal set.
pub fn bon_experiment(cfg: &BonConfig) -> Result<BonResult> {
    if cfg.seeds.is_empty() || cfg.t_on == 0 || cfg.n == 0 || cfg.episodes == 0 {
        return Err(param_err("need at least one seed and positive T_on, N and episodes"));
    }
    let task = fork_env().with_goals(cfg.finetune_goals);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let pre = pretrain_fork(seed, &cfg.postbc, &cfg.train)?;
        for (m, (method, policy)) in [("bc", &pre.bc), ("postbc", &pre.postbc)].into_iter().enumerate() {
            let m = m as u64;
            let rollouts = collect_rollouts(&task, policy, cfg.t_on, &mut rng::stream(seed, 10 + m))?;
            let (q, _) = fit_expectile_q(&rollouts, cfg.tau, cfg.gamma, &cfg.q, &mut rng::stream(seed, 20 + m))?;
            let rate = evaluate_bon(&task, policy, &q, cfg.n, cfg.episodes, &mut rng::stream(seed, 30 + m));
            rows.push(BonRow {
                method: format!("{method}+bon"),
                n: cfg.n,
                t_on: cfg.t_on,
                episodes: cfg.episodes,
                success_rate: rate,
                seed,
            });
            for (g, goals) in [GoalSet::Both, GoalSet::Left, GoalSet::Right].into_iter().enumerate() {
                let env = fork_env().with_goals(goals);
                let rate = evaluate_success(&env, policy, cfg.episodes, &mut rng::stream(seed, 40 + 3 * m + g as u64));
                rows.push(BonRow {
                    method: format!("{method}-pretrained-{}", goal_key(goals)),
                    n: 1,
                    t_on: 0,
                    episodes: cfg.episodes,
                    success_rate: rate,
                    seed,
                });
            }
        }
    }
    let (pb, bc) = (mean_rate(&rows, "postbc+bon"), mean_rate(&rows, "bc+bon"));
    let (pb_pre, bc_pre) = (mean_rate(&rows, "postbc-pretrained-both"), mean_rate(&rows, "bc-pretrained-both"));
    let checks = vec![
        check("finetune-bon", "postbc_minus_bc_bon", pb - bc, 0.10, pb - bc >= 0.10),
        check("finetune-bon", "postbc_minus_bc_pretrained_both", pb_pre - bc_pre, -0.05, pb_pre - bc_pre >= -0.05),
    ];
    Ok(BonResult { rows, checks })
}

pub fn goal_key(g: GoalSet) -> &'static str {
    match g {
        GoalSet::Both => "both",
        GoalSet::Left => "left",
        GoalSet::Right => "right",
    }
}

// Generic pretraining ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Fork,
    Reacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub env: EnvKind,
    pub goals: GoalSet,
    /// Number of demonstrations.
    #[serde(rename = "T")]
    pub t: usize,
    pub filter: Option<TrajectoryFilter>,
    pub method: PretrainMethod,
    /// Noise scale of σ-BC.
    pub sigma: f64,
    pub postbc: PostbcConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Fork,
            goals: GoalSet::Both,
            t: 10,
            filter: Some(TrajectoryFilter::Branch { sign: -1 }),
            method: PretrainMethod::Postbc,
            sigma: 0.3,
            postbc: PostbcConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn environment(&self) -> ContinuousEnv {
        match self.env {
            EnvKind::Fork => fork_env(),
            EnvKind::Reacher => reacher_env(),
        }
        .with_goals(self.goals)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub dataset: ContinuousDemoDataset,
    pub cov_field: Option<CovField>,
    pub policy: GenerativePolicy,
    pub stats: TrainStats,
    pub success_rate: f64,
}

/// Collects demonstrations with the scripted demonstrator, fits the
/// covariance field when the method needs one, trains the policy and
/// reports its success rate over 200 episodes.
pub fn pretrain(cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.train.validate()?;
    if cfg.t == 0 {
        return Err(param_err("T: need at least one demonstration"));
    }
    let env = cfg.environment();
    let demo = scripted_demonstrator(&env);
    let dataset = collect_continuous_dataset(
        &env,
        &demo,
        cfg.t,
        cfg.filter,
        DEFAULT_REJECTION_BUDGET,
        &mut rng::stream(cfg.seed, 0),
    )?;
    let train_seed = rng::stream(cfg.seed, 2).next_u64();
    let mut train_rng = rng::seeded(train_seed);
    let (cov_field, (policy, stats)) = match cfg.method {
        PretrainMethod::Bc => (None, train_bc(&dataset, &cfg.train, &mut train_rng)?),
        PretrainMethod::SigmaBc => (None, train_sigma_bc(&dataset, cfg.sigma, &cfg.train, &mut train_rng)?),
        PretrainMethod::Postbc => {
            let field = fit_cov_field(&dataset, &cfg.postbc, &mut rng::stream(cfg.seed, 1))?;
            let trained = train_postbc(&dataset, &field, cfg.postbc.alpha, &cfg.train, &mut train_rng)?;
            (Some(field), trained)
        }
    };
    let success_rate = evaluate_success(&env, &policy, 200, &mut rng::stream(cfg.seed, 3));
    Ok(PretrainOutput { dataset, cov_field, policy, stats, success_rate })
}
