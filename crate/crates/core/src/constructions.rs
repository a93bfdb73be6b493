//! The explicit MDP / demonstrator instances behind the coverage failure,
//! uniform-noise tradeoff and lower-bound results.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::estimators::{coverage_gamma, EstimatorSpec};
use crate::finetune::tabular_finetune;
use crate::mdp::{collect_dataset, counts, evaluate_policy, TabularMdp, TabularPolicy};
use crate::rng;

/// Two 3-armed bandits that differ only on the rare arms, plus the shared demonstrator.
#[derive(Debug, Clone)]
pub struct Prop1Instance {
    pub epsilon: f64,
    /// Arm 2 pays 1.
    pub m1: TabularMdp,
    /// Arm 3 pays 1.
    pub m2: TabularMdp,
    /// `(1 - 4ε, 2ε, 2ε)`.
    pub demonstrator: TabularPolicy,
}

impl Prop1Instance {
    pub fn instances(&self) -> [&TabularMdp; 2] {
        [&self.m1, &self.m2]
    }
}

fn bandit(rewards: Vec<f64>) -> Result<TabularMdp> {
    let a = rewards.len();
    TabularMdp::new(1, a, 1, vec![1.0; a], vec![1.0], rewards)
}

pub fn prop1_bandits(epsilon: f64) -> Result<Prop1Instance> {
    if !(epsilon > 0.0 && epsilon <= 0.125) {
        return Err(param_err(format!("epsilon = {epsilon} outside (0, 1/8]")));
    }
    Ok(Prop1Instance {
        epsilon,
        m1: bandit(vec![0.0, 1.0, 0.0])?,
        m2: bandit(vec![0.0, 0.0, 1.0])?,
        demonstrator: TabularPolicy::new(1, 3, 1, vec![1.0 - 4.0 * epsilon, 2.0 * epsilon, 2.0 * epsilon])?,
    })
}

/// Chain MDP on which uniform-noise mixtures cannot be both near-optimal and covering.
///
/// States `0..k` are the absorbing `s̃_1..s̃_k`, state `k` is `s1` and state
/// `k + 1` is `s2`; action 0 is `a1`, action 1 is `a2`.
#[derive(Debug, Clone)]
pub struct Prop2Instance {
    pub mdp: TabularMdp,
    pub demonstrator: TabularPolicy,
    pub delta: f64,
    /// State index of the rare absorbing state `s̃_{i_T}`.
    pub rare_state: usize,
    /// One-based `i_T`.
    pub rare_rank: usize,
}

/// `Δ = 2ε` with `ε = H² S ln T / T + ξ`.
pub fn prop2_default_delta(t: usize, horizon: usize, num_states: usize, xi: f64) -> f64 {
    let eps = (horizon * horizon * num_states) as f64 * (t as f64).ln() / t as f64 + xi;
    2.0 * eps
}

/// One-based index `i` maximizing `2^{-i-1}` subject to `2^{-i-1} ≤ 1/T`.
pub fn rare_rank(t: usize) -> usize {
    let mut i = 1;
    while 2f64.powi(-(i as i32) - 1) > 1.0 / t as f64 {
        i += 1;
    }
    i
}

pub fn prop2_chain(t: usize, horizon: usize, num_states: usize, delta: f64) -> Result<Prop2Instance> {
    if num_states < 3 {
        return Err(param_err(format!("S = {num_states} < 3")));
    }
    if horizon < 2 {
        return Err(param_err(format!("H = {horizon} < 2")));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(param_err(format!("Delta = {delta} outside (0, 1/2)")));
    }
    if t == 0 {
        return Err(param_err("T must be positive"));
    }
    let k = num_states - 2;
    let rank = rare_rank(t);
    if rank > k {
        return Err(param_err(format!("S = {num_states} gives {k} absorbing states; T = {t} needs i_T = {rank}")));
    }
    let (s1, s2) = (k, k + 1);
    let (a1, a2) = (0, 1);

    let mut init = vec![0.0; num_states];
    init[s1] = 0.5;
    init[0] = 0.25 + 2f64.powi(-(k as i32) - 1);
    for (i, p) in init.iter_mut().enumerate().take(k).skip(1) {
        *p = 2f64.powi(-(i as i32 + 1) - 1);
    }

    let idx = |h: usize, s: usize, a: usize| (h * num_states + s) * 2 + a;
    let mut transitions = vec![0.0; horizon * num_states * 2 * num_states];
    let mut rewards = vec![0.0; horizon * num_states * 2];
    for h in 0..horizon {
        for s in 0..num_states {
            for a in 0..2 {
                let next = match (s, a) {
                    (s, _) if s < k => s,
                    (s, 0) if s == s1 => s1,
                    _ => s2,
                };
                transitions[idx(h, s, a) * num_states + next] = 1.0;
            }
        }
    }
    for s in 0..k {
        rewards[idx(0, s, a1)] = 1.0;
        rewards[idx(0, s, a2)] = 1.0 - 2.0 * delta;
    }
    rewards[idx(horizon - 1, s1, a1)] = 1.0;
    let mdp = TabularMdp::new(num_states, 2, horizon, transitions, init, rewards)?;

    let demonstrator = TabularPolicy::new(
        num_states,
        2,
        horizon,
        (0..horizon * num_states).flat_map(|i| if i % num_states == s1 { [1.0, 0.0] } else { [0.5, 0.5] }).collect(),
    )?;
    Ok(Prop2Instance { mdp, demonstrator, delta, rare_state: rank - 1, rare_rank: rank })
}

/// Bandit / demonstrator pair of the lower-bound family.
#[derive(Debug, Clone)]
pub struct Thm2Instance {
    pub mdp: TabularMdp,
    pub demonstrator: TabularPolicy,
    /// Zero-based rare arm, `None` for the deterministic member.
    pub rare_arm: Option<usize>,
}

/// `α = 1 / (2T)`.
pub fn thm2_alpha(t: usize) -> f64 {
    1.0 / (2.0 * t as f64)
}

/// `A` instances sharing the bandit `r(a1) = 1`; member `i > 1` plays `a_i` with probability `α`.
pub fn thm2_family(num_actions: usize, alpha_rare: f64) -> Result<Vec<Thm2Instance>> {
    if num_actions < 2 {
        return Err(param_err(format!("A = {num_actions} < 2")));
    }
    if !(alpha_rare > 0.0 && alpha_rare < 1.0) {
        return Err(param_err(format!("alpha = {alpha_rare} outside (0, 1)")));
    }
    let mut rewards = vec![0.0; num_actions];
    rewards[0] = 1.0;
    let mdp = bandit(rewards)?;
    (0..num_actions)
        .map(|i| {
            let mut row = vec![0.0; num_actions];
            if i == 0 {
                row[0] = 1.0;
            } else {
                row[0] = 1.0 - alpha_rare;
                row[i] = alpha_rare;
            }
            Ok(Thm2Instance {
                mdp: mdp.clone(),
                demonstrator: TabularPolicy::new(1, num_actions, 1, row)?,
                rare_arm: (i > 0).then_some(i),
            })
        })
        .collect()
}

/// Smallest over rare members of `E[π̂(a_i)] / α`, estimated over `n_trials`
/// dataset draws of size `t` per member.
pub fn thm2_measured_gamma(
    num_actions: usize,
    t: usize,
    spec: &EstimatorSpec,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    let alpha = thm2_alpha(t);
    let family = thm2_family(num_actions, alpha)?;
    let mut worst = f64::INFINITY;
    for (member, inst) in family.iter().enumerate() {
        let Some(arm) = inst.rare_arm else { continue };
        let probs: Vec<f64> = (0..n_trials as u64)
            .into_par_iter()
            .map(|trial| {
                let mut r = rng::stream(seed ^ ((member as u64) << 32), trial);
                let ds = collect_dataset(&inst.mdp, &inst.demonstrator, t, &mut r)?;
                let c = counts(&ds, 1, num_actions, 1)?;
                Ok(spec.estimate(&c, &inst.demonstrator, t)?.prob(0, 0, arm))
            })
            .collect::<Result<_>>()?;
        let mean = probs.iter().sum::<f64>() / n_trials as f64;
        worst = worst.min(mean / alpha);
    }
    Ok(worst)
}

/// Regret of the finetuned policy on both bandits of the coverage-failure pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCheck {
    pub regret_m1: f64,
    pub regret_m2: f64,
    /// Whether the pretrained policy puts zero mass on arm 2 / arm 3.
    pub excludes_optimal: [bool; 2],
    pub pretrained_gamma: f64,
}

impl FinetuneCheck {
    pub fn max_regret(&self) -> f64 {
        self.regret_m1.max(self.regret_m2)
    }
}

/// Rolls out `pretrained` `t_prime` times on each bandit, finetunes, and
/// reports the regret of the result on each.
pub fn prop1_finetune_check<R: Rng + ?Sized>(
    inst: &Prop1Instance,
    pretrained: &TabularPolicy,
    t_prime: usize,
    rng: &mut R,
) -> Result<FinetuneCheck> {
    let mut regrets = [0.0; 2];
    for (slot, mdp) in inst.instances().into_iter().enumerate() {
        let tuned = tabular_finetune(mdp, pretrained, t_prime, rng)?;
        regrets[slot] = mdp.optimal_policy().1 - evaluate_policy(mdp, &tuned)?;
    }
    Ok(FinetuneCheck {
        regret_m1: regrets[0],
        regret_m2: regrets[1],
        excludes_optimal: [pretrained.prob(0, 0, 1) == 0.0, pretrained.prob(0, 0, 2) == 0.0],
        pretrained_gamma: coverage_gamma(pretrained, &inst.demonstrator)?,
    })
}

/// Repeats [`prop1_finetune_check`] with a pretrained policy estimated from a
/// fresh size-`t` demonstration dataset in each repetition.
pub fn prop1_finetune_study(
    inst: &Prop1Instance,
    spec: &EstimatorSpec,
    t: usize,
    t_prime: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<FinetuneCheck>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let ds = collect_dataset(&inst.m1, &inst.demonstrator, t, &mut r)?;
            let c = counts(&ds, 1, 3, 1)?;
            let pretrained = spec.estimate(&c, &inst.demonstrator, t)?;
            prop1_finetune_check(inst, &pretrained, t_prime, &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{bc_estimate, coverage_gamma, uniform_mix_estimate, EstimatorId};
    use crate::mdp::{evaluate_policy, CountTable};

    #[test]
    fn prop1_values() {
        let inst = prop1_bandits(0.01).unwrap();
        assert_eq!(inst.demonstrator.row(0, 0), &[0.96, 0.02, 0.02]);
        for m in inst.instances() {
            assert!((evaluate_policy(m, &inst.demonstrator).unwrap() - 0.02).abs() < 1e-15);
            assert_eq!(m.optimal_policy().1, 1.0);
        }
        assert!(prop1_bandits(0.0).is_err());
        assert!(prop1_bandits(0.2).is_err());
    }

    #[test]
    fn prop2_initial_distribution_s5() {
        let inst = prop2_chain(8, 4, 5, 0.04).unwrap();
        // s̃_1, s̃_2, s̃_3, s1, s2
        assert_eq!(inst.mdp.init_dist(), &[0.3125, 0.125, 0.0625, 0.5, 0.0]);
        assert_eq!(inst.mdp.init_dist().iter().sum::<f64>(), 1.0);
        for i in 2..=3 {
            assert_eq!(inst.mdp.init_dist()[i - 1], 2f64.powi(-(i as i32) - 1));
        }
    }

    #[test]
    fn prop2_values() {
        for (s, h, delta) in [(5, 4, 0.04), (3, 2, 0.1), (7, 5, 0.08)] {
            let inst = prop2_chain(4, h, s, delta).unwrap();
            let j = evaluate_policy(&inst.mdp, &inst.demonstrator).unwrap();
            assert!((j - (1.0 - delta / 2.0)).abs() < 1e-12, "{j}");
            assert!((inst.mdp.optimal_policy().1 - 1.0).abs() < 1e-12);
        }
        assert!(prop2_chain(8, 4, 2, 0.04).is_err());
        assert!(prop2_chain(8, 4, 5, 0.6).is_err());
        assert!(prop2_chain(8, 1, 5, 0.04).is_err());
    }

    #[test]
    fn rare_state_mass_is_between_half_inverse_t_and_inverse_t() {
        for t in [4usize, 5, 8, 9, 16, 30, 64] {
            let rank = rare_rank(t);
            let inst = prop2_chain(t, 3, rank + 2, 0.05).unwrap();
            let p = inst.mdp.init_dist()[inst.rare_state];
            if rank >= 2 {
                assert!(p <= 1.0 / t as f64 && p >= 0.5 / t as f64, "T={t} p={p}");
            }
        }
        assert_eq!(rare_rank(8), 2);
    }

    #[test]
    fn uniform_noise_coverage_on_rare_event_is_exact() {
        let inst = prop2_chain(8, 4, 5, 0.08).unwrap();
        // One visit to the rare state at h = 0, on a2.
        let mut sa = vec![0u64; 4 * 5 * 2];
        sa[inst.rare_state * 2 + 1] = 1;
        sa[3 * 2] = 7;
        let c = CountTable::from_state_action_counts(5, 2, 4, sa).unwrap();
        let bc = bc_estimate(&c);
        for alpha in [0.05, 0.1, 0.25, 0.5, 1.0] {
            let u = uniform_mix_estimate(&bc, alpha).unwrap();
            let at_rare = [0, 1]
                .iter()
                .map(|&a| u.prob(0, inst.rare_state, a) / inst.demonstrator.prob(0, inst.rare_state, a))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(at_rare, (alpha / 2.0) / 0.5);
            assert!(coverage_gamma(&u, &inst.demonstrator).unwrap() <= at_rare);
        }
    }

    #[test]
    fn thm2_members() {
        let fam = thm2_family(3, 0.25).unwrap();
        assert_eq!(fam.len(), 3);
        assert_eq!(fam[0].demonstrator.row(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(fam[1].demonstrator.row(0, 0), &[0.75, 0.25, 0.0]);
        assert_eq!(fam[2].demonstrator.row(0, 0), &[0.75, 0.0, 0.25]);
        assert_eq!(evaluate_policy(&fam[0].mdp, &fam[0].demonstrator).unwrap(), 1.0);
        for m in &fam[1..] {
            assert_eq!(evaluate_policy(&m.mdp, &m.demonstrator).unwrap(), 0.75);
        }
        assert!(thm2_family(1, 0.25).is_err());
        assert!(thm2_family(3, 1.0).is_err());
        assert_eq!(thm2_alpha(50), 0.01);
    }

    /// `E[π̂^pt(a_i)]` under `T(a_i) ~ Binomial(T, α)`, enumerated exactly.
    fn exact_pt_rare_mass(a_n: usize, t: usize) -> f64 {
        let alpha_rare = thm2_alpha(t);
        let p = crate::estimators::default_theorem_params(a_n, 1, t);
        let (tf, a_f) = (t as f64, a_n as f64);
        let mut binom = 1.0;
        let mut total = 0.0;
        for k in 0..=t {
            if k > 0 {
                binom *= (t - k + 1) as f64 / k as f64;
            }
            let pk = binom * alpha_rare.powi(k as i32) * (1.0 - alpha_rare).powi((t - k) as i32);
            let kf = k as f64;
            let mass = (1.0 - p.alpha) * kf / tf + p.alpha * (kf + p.lambda / a_f) / (tf + p.lambda);
            total += pk * mass;
        }
        total
    }

    #[test]
    fn thm2_gamma_matches_binomial_oracle() {
        let spec = EstimatorSpec::new(EstimatorId::Pt);
        for a in [2, 4] {
            let measured = thm2_measured_gamma(a, 50, &spec, 4000, 3).unwrap();
            let exact = exact_pt_rare_mass(a, 50) / thm2_alpha(50);
            assert!((measured - exact).abs() < 0.05 * exact, "A={a}: {measured} vs {exact}");
        }
    }

    #[test]
    fn collapsed_pretraining_cannot_be_finetuned() {
        let inst = prop1_bandits(0.01).unwrap();
        let collapsed = TabularPolicy::new(1, 3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let mut r = rng::seeded(2);
        for _ in 0..20 {
            let check = prop1_finetune_check(&inst, &collapsed, 500, &mut r).unwrap();
            assert_eq!(check.max_regret(), 1.0);
            assert_eq!(check.excludes_optimal, [true, true]);
        }
    }

    #[test]
    fn uniform_pretraining_recovers_optimal_arm() {
        // Each rare arm is missed in 2000 uniform pulls with probability (2/3)^2000 ≈ 0.
        let inst = prop1_bandits(0.01).unwrap();
        let uniform = TabularPolicy::uniform(1, 3, 1);
        let mut r = rng::seeded(4);
        let good = (0..100)
            .filter(|_| prop1_finetune_check(&inst, &uniform, 2000, &mut r).unwrap().max_regret() <= 0.05)
            .count();
        assert!(good >= 95);
    }
}
