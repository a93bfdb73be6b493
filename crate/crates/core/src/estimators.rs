//! Tabular policy estimators, demonstrator action coverage, and the
//! Monte-Carlo harness that scores estimators over dataset draws.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::mdp::{collect_dataset, counts, evaluate_policy, CountTable, TabularMdp, TabularPolicy};
use crate::report::{fmt_float, CsvRow};
use crate::rng;
use crate::stats::{mean_se, quantile};

/// Demonstrator entries below this are treated as outside its support.
pub const SUPPORT_THRESHOLD: f64 = 1e-15;

/// Empirical conditional action distribution; uniform where `T_h(s) = 0`.
pub fn bc_estimate(counts: &CountTable) -> TabularPolicy {
    let a_n = counts.num_actions();
    TabularPolicy::from_row_fn(counts.num_states(), a_n, counts.horizon(), |h, s, row| {
        let n = counts.state(h, s);
        if n == 0 {
            row.fill(1.0 / a_n as f64);
        } else {
            for (p, &c) in row.iter_mut().zip(counts.state_action_row(h, s)) {
                *p = c as f64 / n as f64;
            }
        }
    })
}

fn check_unit_interval(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(param_err(format!("{name} = {x} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - α) π + α unif(A)`, the uniform-noise estimator.
pub fn uniform_mix_estimate(bc: &TabularPolicy, alpha: f64) -> Result<TabularPolicy> {
    check_unit_interval("alpha", alpha)?;
    let a_n = bc.num_actions();
    let u = 1.0 / a_n as f64;
    Ok(TabularPolicy::from_row_fn(bc.num_states(), a_n, bc.horizon(), |h, s, row| {
        for (p, &b) in row.iter_mut().zip(bc.row(h, s)) {
            *p = (1.0 - alpha) * b + alpha * u;
        }
    }))
}

/// Posterior mean of the demonstrator under a flat Dirichlet prior:
/// `(T_h(s, a) + 1) / (T_h(s) + A)`.
pub fn posterior_estimate(counts: &CountTable) -> TabularPolicy {
    smoothed(counts, counts.num_actions() as f64)
}

/// `(T_h(s, a) + λ/A) / (T_h(s) + λ)`; requires `λ ≥ A`.
pub fn posterior_lambda_estimate(counts: &CountTable, lambda: f64) -> Result<TabularPolicy> {
    let a_n = counts.num_actions() as f64;
    if !(lambda >= a_n) {
        return Err(param_err(format!("lambda = {lambda} must be at least A = {a_n}")));
    }
    Ok(smoothed(counts, lambda))
}

fn smoothed(counts: &CountTable, lambda: f64) -> TabularPolicy {
    let a_n = counts.num_actions();
    let pseudo = lambda / a_n as f64;
    TabularPolicy::from_row_fn(counts.num_states(), a_n, counts.horizon(), |h, s, row| {
        let n = counts.state(h, s);
        if n == 0 {
            row.fill(1.0 / a_n as f64);
        } else {
            let denom = n as f64 + lambda;
            for (p, &c) in row.iter_mut().zip(counts.state_action_row(h, s)) {
                *p = (c as f64 + pseudo) / denom;
            }
        }
    })
}

/// `(1 - α) π^bc + α π^{post,λ}`.
pub fn mixture_pt_estimate(bc: &TabularPolicy, post_lambda: &TabularPolicy, alpha: f64) -> Result<TabularPolicy> {
    check_unit_interval("alpha", alpha)?;
    if !bc.same_shape(post_lambda) {
        return Err(dim_err("bc and posterior policies have different shapes"));
    }
    Ok(TabularPolicy::from_row_fn(bc.num_states(), bc.num_actions(), bc.horizon(), |h, s, row| {
        for ((p, &b), &q) in row.iter_mut().zip(bc.row(h, s)).zip(post_lambda.row(h, s)) {
            *p = (1.0 - alpha) * b + alpha * q;
        }
    }))
}

/// Mixture weight and posterior strength used by the coverage guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremParams {
    pub alpha: f64,
    pub lambda: f64,
}

/// `α = 1 / max{A, H, ln(HT)}` and `λ = max{A, 4 ln(HT)}`.
pub fn default_theorem_params(num_actions: usize, horizon: usize, num_trajectories: usize) -> TheoremParams {
    let log_ht = ((horizon * num_trajectories) as f64).ln();
    let a = num_actions as f64;
    TheoremParams { alpha: 1.0 / a.max(horizon as f64).max(log_ht), lambda: a.max(4.0 * log_ht) }
}

/// Largest `γ` with `π_h(a|s) ≥ γ π^β_h(a|s)` on the demonstrator's support.
pub fn coverage_gamma(policy: &TabularPolicy, demonstrator: &TabularPolicy) -> Result<f64> {
    if !policy.same_shape(demonstrator) {
        return Err(dim_err("policy and demonstrator have different shapes"));
    }
    let gamma = policy
        .probs()
        .iter()
        .zip(demonstrator.probs())
        .filter(|(_, &b)| b >= SUPPORT_THRESHOLD)
        .map(|(&p, &b)| p / b)
        .fold(f64::INFINITY, f64::min);
    if gamma.is_infinite() {
        return Err(param_err("demonstrator has no entry above the support threshold"));
    }
    Ok(gamma)
}

/// `J(π^β) - J(π)`.
pub fn suboptimality(mdp: &TabularMdp, demonstrator: &TabularPolicy, policy: &TabularPolicy) -> Result<f64> {
    Ok(evaluate_policy(mdp, demonstrator)? - evaluate_policy(mdp, policy)?)
}

/// Checks `π_h(a|s) ≥ α min{π^β_h(a|s) / (64 ln(SH/δ)), 1/(2λ)}` at every `(h, s, a)`.
pub fn coverage_lower_bound_holds(
    policy: &TabularPolicy,
    demonstrator: &TabularPolicy,
    params: TheoremParams,
    delta: f64,
) -> Result<bool> {
    if !policy.same_shape(demonstrator) {
        return Err(dim_err("policy and demonstrator have different shapes"));
    }
    let log_term = 64.0 * ((policy.num_states() * policy.horizon()) as f64 / delta).ln();
    let floor = 1.0 / (2.0 * params.lambda);
    Ok(policy.probs().iter().zip(demonstrator.probs()).all(|(&p, &b)| p >= params.alpha * (b / log_term).min(floor)))
}

/// Registry of tabular estimators addressable by string key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorId {
    /// The demonstrator itself; a zero-error reference.
    Oracle,
    Bc,
    /// Uniform-noise mixture, the tabular analog of σ-BC.
    SigmaBc,
    Post,
    PostLambda,
    Pt,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 6] = [Self::Oracle, Self::Bc, Self::SigmaBc, Self::Post, Self::PostLambda, Self::Pt];

    pub fn key(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Bc => "bc",
            Self::SigmaBc => "sigma-bc",
            Self::Post => "post",
            Self::PostLambda => "post-lambda",
            Self::Pt => "pt",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|id| id.key() == s).ok_or_else(|| Error::UnknownEstimator(s.to_string()))
    }
}

/// An estimator together with its tuning parameters. Unset parameters fall
/// back to [`default_theorem_params`] for the dataset size at hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub id: EstimatorId,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
}

impl EstimatorSpec {
    pub fn new(id: EstimatorId) -> Self {
        Self { id, alpha: None, lambda: None }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    /// Fits the estimator to `counts` gathered from `num_trajectories` demos.
    pub fn estimate(
        &self,
        counts: &CountTable,
        demonstrator: &TabularPolicy,
        num_trajectories: usize,
    ) -> Result<TabularPolicy> {
        let defaults = default_theorem_params(counts.num_actions(), counts.horizon(), num_trajectories);
        let alpha = self.alpha.unwrap_or(defaults.alpha);
        let lambda = self.lambda.unwrap_or(defaults.lambda);
        match self.id {
            EstimatorId::Oracle => Ok(demonstrator.clone()),
            EstimatorId::Bc => Ok(bc_estimate(counts)),
            EstimatorId::SigmaBc => uniform_mix_estimate(&bc_estimate(counts), alpha),
            EstimatorId::Post => Ok(posterior_estimate(counts)),
            EstimatorId::PostLambda => posterior_lambda_estimate(counts, lambda),
            EstimatorId::Pt => {
                mixture_pt_estimate(&bc_estimate(counts), &posterior_lambda_estimate(counts, lambda)?, alpha)
            }
        }
    }
}

/// Outcome of one dataset draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub suboptimality: f64,
    pub gamma: f64,
}

/// Aggregate over dataset draws, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub estimator: String,
    #[serde(rename = "T")]
    pub num_trajectories: usize,
    pub n_trials: usize,
    pub mean_subopt: f64,
    pub se_subopt: f64,
    pub gamma_min: f64,
    pub gamma_median: f64,
    pub frac_gamma_zero: f64,
    pub seed: u64,
}

impl CsvRow for StudySummary {
    fn header() -> &'static str {
        "estimator,T,n_trials,mean_subopt,se_subopt,gamma_min,gamma_median,frac_gamma_zero,seed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.estimator,
            self.num_trajectories,
            self.n_trials,
            fmt_float(self.mean_subopt),
            fmt_float(self.se_subopt),
            fmt_float(self.gamma_min),
            fmt_float(self.gamma_median),
            fmt_float(self.frac_gamma_zero),
            self.seed
        )
    }
}

/// Runs `n_trials` independent dataset draws of size `t` and scores `spec`
/// on each. Trial `i` uses stream `i` of `seed`; results are merged in trial
/// order, so the output does not depend on the worker count.
pub fn monte_carlo_trials(
    mdp: &TabularMdp,
    demonstrator: &TabularPolicy,
    spec: &EstimatorSpec,
    t: usize,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<TrialOutcome>> {
    if n_trials == 0 {
        return Err(param_err("n_trials must be at least 1"));
    }
    let target = evaluate_policy(mdp, demonstrator)?;
    (0..n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let ds = collect_dataset(mdp, demonstrator, t, &mut r)?;
            let c = counts(&ds, mdp.num_states(), mdp.num_actions(), mdp.horizon())?;
            let pi = spec.estimate(&c, demonstrator, t)?;
            Ok(TrialOutcome {
                suboptimality: target - evaluate_policy(mdp, &pi)?,
                gamma: coverage_gamma(&pi, demonstrator)?,
            })
        })
        .collect()
}

/// Summary statistics of [`monte_carlo_trials`].
pub fn monte_carlo_estimator_study(
    mdp: &TabularMdp,
    demonstrator: &TabularPolicy,
    spec: &EstimatorSpec,
    t: usize,
    n_trials: usize,
    seed: u64,
) -> Result<StudySummary> {
    let outcomes = monte_carlo_trials(mdp, demonstrator, spec, t, n_trials, seed)?;
    Ok(summarize(spec.id.key(), t, seed, &outcomes))
}

pub fn summarize(estimator: &str, t: usize, seed: u64, outcomes: &[TrialOutcome]) -> StudySummary {
    let subopts: Vec<f64> = outcomes.iter().map(|o| o.suboptimality).collect();
    let gammas: Vec<f64> = outcomes.iter().map(|o| o.gamma).collect();
    let (mean, se) = mean_se(&subopts);
    StudySummary {
        estimator: estimator.to_string(),
        num_trajectories: t,
        n_trials: outcomes.len(),
        mean_subopt: mean,
        se_subopt: se,
        gamma_min: gammas.iter().copied().fold(f64::INFINITY, f64::min),
        gamma_median: quantile(&gammas, 0.5),
        frac_gamma_zero: gammas.iter().filter(|&&g| g == 0.0).count() as f64 / gammas.len() as f64,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructions::prop1_bandits;
    use proptest::prelude::*;

    fn single_row(counts: &[u64]) -> CountTable {
        CountTable::from_state_action_counts(1, counts.len(), 1, counts.to_vec()).unwrap()
    }

    fn assert_row(p: &TabularPolicy, expected: &[f64]) {
        for (x, y) in p.row(0, 0).iter().zip(expected) {
            assert!((x - y).abs() < 1e-15, "{:?} vs {:?}", p.row(0, 0), expected);
        }
    }

    #[test]
    fn bc_examples() {
        assert_row(&bc_estimate(&single_row(&[3, 1])), &[0.75, 0.25]);
        assert_row(&bc_estimate(&single_row(&[0, 0, 0])), &[1.0 / 3.0; 3]);
        assert_row(&bc_estimate(&single_row(&[4, 0, 0])), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_mix_examples() {
        let bc = TabularPolicy::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(uniform_mix_estimate(&bc, 0.0).unwrap(), bc);
        assert_row(&uniform_mix_estimate(&bc, 1.0).unwrap(), &[0.5, 0.5]);
        assert_row(&uniform_mix_estimate(&bc, 0.2).unwrap(), &[0.9, 0.1]);
        assert!(uniform_mix_estimate(&bc, 1.5).is_err());
        assert!(uniform_mix_estimate(&bc, -0.1).is_err());
    }

    #[test]
    fn posterior_examples() {
        assert_row(&posterior_estimate(&single_row(&[3, 1])), &[4.0 / 6.0, 2.0 / 6.0]);
        assert_row(&posterior_estimate(&single_row(&[0; 5])), &[0.2; 5]);
        assert_row(&posterior_estimate(&single_row(&[1, 0, 0, 0])), &[0.4, 0.2, 0.2, 0.2]);
    }

    #[test]
    fn posterior_lambda_examples() {
        let c = single_row(&[3, 1]);
        assert_eq!(posterior_lambda_estimate(&c, 2.0).unwrap(), posterior_estimate(&c));
        assert_row(&posterior_lambda_estimate(&c, 4.0).unwrap(), &[5.0 / 8.0, 3.0 / 8.0]);
        assert_row(&posterior_lambda_estimate(&single_row(&[0, 0]), 7.0).unwrap(), &[0.5, 0.5]);
        assert!(posterior_lambda_estimate(&c, 1.5).is_err());
    }

    #[test]
    fn mixture_examples() {
        let c = single_row(&[3, 1]);
        let bc = bc_estimate(&c);
        let pl = posterior_lambda_estimate(&c, 4.0).unwrap();
        assert_eq!(mixture_pt_estimate(&bc, &pl, 0.0).unwrap(), bc);
        assert_eq!(mixture_pt_estimate(&bc, &pl, 1.0).unwrap(), pl);
        let mid = mixture_pt_estimate(&bc, &pl, 0.5).unwrap();
        assert!((mid.prob(0, 0, 0) - 0.6875).abs() < 1e-15);
        let other = TabularPolicy::uniform(2, 2, 1);
        assert!(matches!(mixture_pt_estimate(&bc, &other, 0.5), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn theorem_params_examples() {
        let p = default_theorem_params(2, 2, 10);
        assert!((p.alpha - 1.0 / 20f64.ln()).abs() < 1e-15);
        assert!((p.alpha - 0.3338).abs() < 1e-4);
        assert!((p.lambda - 4.0 * 20f64.ln()).abs() < 1e-12);
        assert!((p.lambda - 11.983).abs() < 1e-3);
        let p = default_theorem_params(10, 2, 2);
        assert_eq!(p.alpha, 0.1);
        assert_eq!(p.lambda, 10.0);
    }

    #[test]
    fn gamma_examples() {
        let demo = TabularPolicy::new(1, 4, 1, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(coverage_gamma(&demo, &demo).unwrap(), 1.0);
        assert_eq!(coverage_gamma(&TabularPolicy::uniform(1, 4, 1), &demo).unwrap(), 0.5);
        let collapsed = TabularPolicy::new(1, 4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(coverage_gamma(&collapsed, &demo).unwrap(), 0.0);
        assert!(coverage_gamma(&TabularPolicy::uniform(1, 3, 1), &demo).is_err());
    }

    #[test]
    fn suboptimality_examples() {
        let eps = 0.01;
        let inst = prop1_bandits(eps).unwrap();
        let collapsed = TabularPolicy::new(1, 3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let best = TabularPolicy::new(1, 3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(suboptimality(&inst.m1, &inst.demonstrator, &inst.demonstrator).unwrap(), 0.0);
        assert!((suboptimality(&inst.m1, &inst.demonstrator, &collapsed).unwrap() - 0.02).abs() < 1e-15);
        assert!((suboptimality(&inst.m1, &inst.demonstrator, &best).unwrap() + 0.98).abs() < 1e-15);
    }

    #[test]
    fn registry_round_trip_and_unknown_id() {
        for id in EstimatorId::ALL {
            assert_eq!(id.key().parse::<EstimatorId>().unwrap(), id);
        }
        assert!(matches!("dagger".parse::<EstimatorId>(), Err(Error::UnknownEstimator(_))));
    }

    #[test]
    fn oracle_study_has_zero_error() {
        let inst = prop1_bandits(0.01).unwrap();
        let s = monte_carlo_estimator_study(
            &inst.m1,
            &inst.demonstrator,
            &EstimatorSpec::new(EstimatorId::Oracle),
            4,
            50,
            1,
        )
        .unwrap();
        assert_eq!(s.mean_subopt, 0.0);
        assert_eq!(s.se_subopt, 0.0);
        assert_eq!(s.frac_gamma_zero, 0.0);
    }

    /// Probability that neither rare arm is observed, by direct binomial enumeration.
    fn prob_rare_arms_unseen(eps: f64, t: u32) -> f64 {
        // Sum over k draws of a1 out of t; only k = t leaves both rare arms unseen.
        let p1 = 1.0 - 4.0 * eps;
        (0..=t)
            .map(|k| {
                let binom = (0..k).fold(1.0, |acc, i| acc * (t - i) as f64 / (i + 1) as f64);
                let pk = binom * p1.powi(k as i32) * (1.0 - p1).powi((t - k) as i32);
                if k == t {
                    pk
                } else {
                    0.0
                }
            })
            .sum()
    }

    #[test]
    fn prop1_bc_and_pt_coverage_failure_rates() {
        let inst = prop1_bandits(0.01).unwrap();
        let oracle = prob_rare_arms_unseen(0.01, 4);
        assert!((oracle - 0.96f64.powi(4)).abs() < 1e-15);
        let bc = monte_carlo_estimator_study(
            &inst.m1,
            &inst.demonstrator,
            &EstimatorSpec::new(EstimatorId::Bc),
            4,
            10_000,
            5,
        )
        .unwrap();
        assert!(bc.frac_gamma_zero >= 0.84, "{}", bc.frac_gamma_zero);
        let pt = monte_carlo_estimator_study(
            &inst.m1,
            &inst.demonstrator,
            &EstimatorSpec::new(EstimatorId::Pt),
            4,
            2_000,
            5,
        )
        .unwrap();
        assert_eq!(pt.frac_gamma_zero, 0.0);
        assert!(pt.gamma_min > 0.0);
    }

    #[test]
    fn study_requires_trials() {
        let inst = prop1_bandits(0.01).unwrap();
        assert!(monte_carlo_estimator_study(
            &inst.m1,
            &inst.demonstrator,
            &EstimatorSpec::new(EstimatorId::Bc),
            4,
            0,
            1
        )
        .is_err());
    }

    /// Dirichlet(1,...,1) posterior mean by exhaustive enumeration of the
    /// observation order: the predictive probability of the next action.
    fn dirichlet_predictive(counts: &[u64]) -> Vec<f64> {
        // Posterior predictive = E[θ_a | counts] = ∫ θ_a θ^counts dθ / ∫ θ^counts dθ,
        // computed with the Dirichlet normalizer B(α) = Πα_i! / (Σα_i)! for integer α.
        let fact = |n: u64| (1..=n).map(|x| x as f64).product::<f64>();
        let beta = |alpha: &[u64]| {
            let num: f64 = alpha.iter().map(|&a| fact(a - 1)).product();
            num / fact(alpha.iter().sum::<u64>() - 1)
        };
        let base: Vec<u64> = counts.iter().map(|c| c + 1).collect();
        let z = beta(&base);
        (0..counts.len())
            .map(|a| {
                let mut bumped = base.clone();
                bumped[a] += 1;
                beta(&bumped) / z
            })
            .collect()
    }

    proptest! {
        #[test]
        fn posterior_matches_dirichlet_oracle(row in proptest::collection::vec(0u64..=3, 1..=3)) {
            let c = single_row(&row);
            let post = posterior_estimate(&c);
            if c.state(0, 0) > 0 {
                for (x, y) in post.row(0, 0).iter().zip(dirichlet_predictive(&row)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn bc_rows_are_empirical_frequencies(row in proptest::collection::vec(0u64..20, 1..6)) {
            let c = single_row(&row);
            let bc = bc_estimate(&c);
            let n: u64 = row.iter().sum();
            if n > 0 {
                for (p, &k) in bc.row(0, 0).iter().zip(&row) {
                    prop_assert_eq!(*p, k as f64 / n as f64);
                }
            }
        }

        #[test]
        fn pt_entries_respect_lower_bound(
            table in proptest::collection::vec(0u64..30, 2 * 3 * 4),
            t in 1usize..500,
        ) {
            let c = CountTable::from_state_action_counts(2, 4, 3, table).unwrap();
            let params = default_theorem_params(4, 3, t);
            let bc = bc_estimate(&c);
            let pl = posterior_lambda_estimate(&c, params.lambda).unwrap();
            let pt = mixture_pt_estimate(&bc, &pl, params.alpha).unwrap();
            for h in 0..3 {
                for s in 0..2 {
                    let floor = params.alpha * (params.lambda / 4.0) / (c.state(h, s) as f64 + params.lambda);
                    for a in 0..4 {
                        prop_assert!(pt.prob(h, s, a) >= floor * (1.0 - 1e-12));
                        prop_assert!(pl.prob(h, s, a) >= (params.lambda / 4.0) / (c.state(h, s) as f64 + params.lambda) * (1.0 - 1e-12));
                    }
                }
            }
        }

        #[test]
        fn alpha_monotone(a in 1usize..20, h in 1usize..20, t in 1usize..10_000) {
            let base = default_theorem_params(a, h, t).alpha;
            prop_assert!(default_theorem_params(a + 1, h, t).alpha <= base);
            prop_assert!(default_theorem_params(a, h + 1, t).alpha <= base);
            prop_assert!(default_theorem_params(a, h, t + 1).alpha <= base);
        }
    }
}
