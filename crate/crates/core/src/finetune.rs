//! RL finetuning harnesses: a rollout-based tabular finetuner and Best-of-N
//! sampling against an expectile-regression Q-function.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuous::ContinuousPolicy;
use crate::diffusion::cosine_lr;
use crate::error::{param_err, Error, Result};
use crate::mdp::{rollout, TabularMdp, TabularPolicy};
use crate::nn::{Adam, Mlp};
use crate::report::{fmt_float, CsvRow};
use crate::rng;
use crate::toy_env::{run_episode, ContinuousEnv, Transition};

/// Rolls out `pretrained` for `t_prime` episodes and returns the greedy
/// policy with respect to empirical mean rewards-to-go per `(h, s, a)`.
///
/// Only visited actions are candidates; states never visited at step `h`
/// keep the pretrained row. Ties go to the lowest action index.
pub fn tabular_finetune<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pretrained: &TabularPolicy,
    t_prime: usize,
    rng: &mut R,
) -> Result<TabularPolicy> {
    if t_prime == 0 {
        return Err(param_err("T' must be at least 1"));
    }
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut sums = vec![0.0; h_n * s_n * a_n];
    let mut visits = vec![0u64; h_n * s_n * a_n];
    for _ in 0..t_prime {
        let traj = rollout(mdp, pretrained, rng)?;
        let mut to_go = 0.0;
        for (h, step) in traj.steps.iter().enumerate().rev() {
            to_go += step.reward();
            let i = (h * s_n + step.state()) * a_n + step.action();
            sums[i] += to_go;
            visits[i] += 1;
        }
    }
    let mut probs = Vec::with_capacity(h_n * s_n * a_n);
    for h in 0..h_n {
        for s in 0..s_n {
            let base = (h * s_n + s) * a_n;
            let best = (0..a_n)
                .filter(|&a| visits[base + a] > 0)
                .map(|a| (a, sums[base + a] / visits[base + a] as f64))
                .fold(None, |best: Option<(usize, f64)>, (a, v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((a, v)),
                });
            match best {
                Some((a, _)) => probs.extend((0..a_n).map(|b| if b == a { 1.0 } else { 0.0 })),
                None => probs.extend_from_slice(pretrained.row(h, s)),
            }
        }
    }
    TabularPolicy::new(s_n, a_n, h_n, probs)
}

/// One rollout, truncated at its first success, with its success label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    pub transitions: Vec<Transition>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledRollouts {
    pub trajectories: Vec<LabeledTrajectory>,
}

impl LabeledRollouts {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn success_rate(&self) -> f64 {
        self.trajectories.iter().filter(|t| t.success).count() as f64 / self.len().max(1) as f64
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trajectories {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut trajectories = Vec::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                trajectories.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { trajectories })
    }
}

/// Rolls out `policy` `t_on` times on per-episode streams of a seed drawn
/// from `rng`.
pub fn collect_rollouts<P: ContinuousPolicy + ?Sized, R: Rng + ?Sized>(
    env: &ContinuousEnv,
    policy: &P,
    t_on: usize,
    rng: &mut R,
) -> Result<LabeledRollouts> {
    if t_on == 0 {
        return Err(param_err("T_on must be at least 1"));
    }
    let seed = rng.next_u64();
    let trajectories = (0..t_on as u64)
        .into_par_iter()
        .map(|i| {
            let ep = run_episode(env, policy, &mut rng::stream(seed, i));
            let success = ep.success();
            let mut transitions = ep.transitions;
            if let Some(k) = ep.success_step {
                transitions.truncate(k + 1);
            }
            LabeledTrajectory { transitions, success }
        })
        .collect();
    Ok(LabeledRollouts { trajectories })
}

/// Asymmetric squared loss `|τ - 1(u < 0)| · u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Anything that scores actions at a state.
pub trait ActionValue: Sync {
    fn value(&self, state: &[f64], action: &[f64]) -> f64;
}

/// Adapts a closure into an [`ActionValue`].
pub struct FnValue<F>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> ActionValue for FnValue<F> {
    fn value(&self, state: &[f64], action: &[f64]) -> f64 {
        (self.0)(state, action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], steps: 3000, batch_size: 64, lr: 1e-3 }
    }
}

/// `Q(s, a)` and `V(s)` networks fitted by expectile regression.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub q: Mlp,
    pub v: Mlp,
    pub tau: f64,
    pub gamma: f64,
    pub state_scale: Vec<f64>,
}

impl QFunction {
    fn scaled(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.state_scale).map(|(a, b)| a / b).collect()
    }

    fn q_input(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut x = self.scaled(s);
        x.extend_from_slice(a);
        x
    }

    pub fn q_value(&self, s: &[f64], a: &[f64]) -> f64 {
        self.q.forward(&self.q_input(s, a))[0]
    }

    pub fn state_value(&self, s: &[f64]) -> f64 {
        self.v.forward(&self.scaled(s))[0]
    }

    fn td_target(&self, t: &Transition) -> f64 {
        let cont = if t.done { 0.0 } else { self.gamma * self.state_value(&t.next_state) };
        t.reward + cont
    }

    /// Mean squared one-step TD residual over `transitions`.
    pub fn td_residual(&self, transitions: &[&Transition]) -> f64 {
        transitions.iter().map(|t| (self.q_value(&t.state, &t.action) - self.td_target(t)).powi(2)).sum::<f64>()
            / transitions.len() as f64
    }
}

impl ActionValue for QFunction {
    fn value(&self, state: &[f64], action: &[f64]) -> f64 {
        self.q_value(state, action)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFitStats {
    pub initial_td: f64,
    pub final_td: f64,
}

/// Alternates expectile regression of `V(s)` towards `Q(s, a)` and
/// regression of `Q(s, a)` towards `r + γ (1 - done) V(s')` on minibatches
/// drawn uniformly with replacement.
pub fn fit_expectile_q<R: Rng + ?Sized>(
    rollouts: &LabeledRollouts,
    tau: f64,
    gamma: f64,
    config: &QConfig,
    rng: &mut R,
) -> Result<(QFunction, QFitStats)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(param_err(format!("expectile must lie in (0, 1), got {tau}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(param_err(format!("discount must lie in (0, 1], got {gamma}")));
    }
    let data: Vec<&Transition> = rollouts.transitions().collect();
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (d_s, d_a) = (data[0].state.len(), data[0].action.len());
    let state_scale: Vec<f64> = (0..d_s)
        .map(|d| data.iter().map(|t| t.state[d].abs().max(t.next_state[d].abs())).fold(1.0, f64::max))
        .collect();
    let sizes = |input: usize| {
        let mut v = vec![input];
        v.extend_from_slice(&config.hidden);
        v.push(1);
        v
    };
    let mut qf =
        QFunction { q: Mlp::new(&sizes(d_s + d_a), rng)?, v: Mlp::new(&sizes(d_s), rng)?, tau, gamma, state_scale };
    let initial_td = qf.td_residual(&data);
    let mut q_opt = Adam::new(qf.q.params().len(), config.lr);
    let mut v_opt = Adam::new(qf.v.params().len(), config.lr);
    let batch_size = config.batch_size.max(1);
    let w = 1.0 / batch_size as f64;
    for step in 0..config.steps {
        let batch: Vec<&Transition> = (0..batch_size).map(|_| data[rng.random_range(0..data.len())]).collect();
        let lr = cosine_lr(config.lr, step, config.steps);

        let mut v_grad = vec![0.0; qf.v.params().len()];
        for t in &batch {
            let target = qf.q_value(&t.state, &t.action);
            let (v, tape) = qf.v.forward_tape(&qf.scaled(&t.state));
            let u = target - v[0];
            qf.v.backward(&tape, &[-2.0 * w * expectile_weight(u, tau) * u], &mut v_grad);
        }
        v_opt.lr = lr;
        v_opt.step(qf.v.params_mut(), &v_grad);

        let mut q_grad = vec![0.0; qf.q.params().len()];
        for t in &batch {
            let target = qf.td_target(t);
            let (q, tape) = qf.q.forward_tape(&qf.q_input(&t.state, &t.action));
            qf.q.backward(&tape, &[2.0 * w * (q[0] - target)], &mut q_grad);
        }
        q_opt.lr = lr;
        q_opt.step(qf.q.params_mut(), &q_grad);
    }
    let final_td = qf.td_residual(&data);
    Ok((qf, QFitStats { initial_td, final_td }))
}

/// Samples `n` actions and returns the one with the largest value; ties go
/// to the earliest sample.
pub fn best_of_n_act<P, Q>(policy: &P, q: &Q, state: &[f64], step: usize, n: usize, rng: &mut dyn RngCore) -> Vec<f64>
where
    P: ContinuousPolicy + ?Sized,
    Q: ActionValue + ?Sized,
{
    assert!(n >= 1, "Best-of-N needs N >= 1");
    let mut best = policy.act(state, step, rng);
    let mut best_value = q.value(state, &best);
    for _ in 1..n {
        let a = policy.act(state, step, rng);
        let v = q.value(state, &a);
        if v > best_value {
            best = a;
            best_value = v;
        }
    }
    best
}

/// A policy that acts by Best-of-N selection against a frozen value.
pub struct BestOfN<'a, P: ?Sized, Q: ?Sized> {
    pub policy: &'a P,
    pub q: &'a Q,
    pub n: usize,
}

impl<P, Q> ContinuousPolicy for BestOfN<'_, P, Q>
where
    P: ContinuousPolicy + ?Sized,
    Q: ActionValue + ?Sized,
{
    fn act(&self, state: &[f64], step: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        best_of_n_act(self.policy, self.q, state, step, self.n, rng)
    }
}

/// Success rate of `policy` over `episodes` per-episode streams.
pub fn evaluate_success<P: ContinuousPolicy + ?Sized, R: Rng + ?Sized>(
    env: &ContinuousEnv,
    policy: &P,
    episodes: usize,
    rng: &mut R,
) -> f64 {
    let seed = rng.next_u64();
    let wins = (0..episodes as u64)
        .into_par_iter()
        .filter(|&i| run_episode(env, policy, &mut rng::stream(seed, i)).success())
        .count();
    wins as f64 / episodes.max(1) as f64
}

/// Success rate of Best-of-N execution of `policy` against `q`.
pub fn evaluate_bon<P, Q, R>(env: &ContinuousEnv, policy: &P, q: &Q, n: usize, episodes: usize, rng: &mut R) -> f64
where
    P: ContinuousPolicy + ?Sized,
    Q: ActionValue + ?Sized,
    R: Rng + ?Sized,
{
    evaluate_success(env, &BestOfN { policy, q, n }, episodes, rng)
}

/// One Best-of-N evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct BonRow {
    pub method: String,
    pub n: usize,
    pub t_on: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub seed: u64,
}

impl CsvRow for BonRow {
    fn header() -> &'static str {
        "method,N,T_on,episodes,success_rate,seed"
    }

    fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method,
            self.n,
            self.t_on,
            self.episodes,
            fmt_float(self.success_rate),
            self.seed
        )
    }
}


#[cfg(test)]
mod tabular_tests {
    use super::*;
    use crate::constructions::prop1_bandits;
    use crate::mdp::evaluate_policy;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn picks_best_visited_arm() {
        let mdp = TabularMdp::new(1, 3, 1, vec![1.0; 3], vec![1.0], vec![0.2, 0.9, 0.5]).unwrap();
        let tuned = tabular_finetune(&mdp, &TabularPolicy::uniform(1, 3, 1), 200, &mut rng::seeded(0)).unwrap();
        assert_eq!(tuned.row(0, 0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn collapsed_support_keeps_support() {
        let inst = prop1_bandits(0.01).unwrap();
        let collapsed = TabularPolicy::new(1, 3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        for m in inst.instances() {
            let tuned = tabular_finetune(m, &collapsed, 100, &mut rng::seeded(1)).unwrap();
            assert_eq!(tuned.row(0, 0), &[1.0, 0.0, 0.0]);
        }
        let regrets: Vec<f64> = inst
            .instances()
            .iter()
            .map(|m| {
                let tuned = tabular_finetune(m, &collapsed, 100, &mut rng::seeded(1)).unwrap();
                1.0 - evaluate_policy(m, &tuned).unwrap()
            })
            .collect();
        assert!(regrets.contains(&1.0));
    }

    #[test]
    fn zero_budget_rejected() {
        let inst = prop1_bandits(0.01).unwrap();
        assert!(tabular_finetune(&inst.m1, &inst.demonstrator, 0, &mut rng::seeded(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn never_adds_support(seed in 0u64..1000, zero_mask in proptest::collection::vec(any::<bool>(), 3 * 2 * 3)) {
            let mut r = rng::seeded(seed);
            let mdp = TabularMdp::random(3, 3, 2, &mut r).unwrap();
            let base = TabularPolicy::random(3, 3, 2, &mut r);
            // Zero out masked entries, keeping at least one action per row.
            let mut probs = base.probs().to_vec();
            for (row, mask) in probs.chunks_mut(3).zip(zero_mask.chunks(3)) {
                for (p, &z) in row.iter_mut().zip(mask).skip(1) {
                    if z { *p = 0.0; }
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
            }
            let pretrained = TabularPolicy::new(3, 3, 2, probs).unwrap();
            let tuned = tabular_finetune(&mdp, &pretrained, 50, &mut r).unwrap();
            for (t, p) in tuned.probs().iter().zip(pretrained.probs()) {
                if *p == 0.0 {
                    prop_assert_eq!(*t, 0.0);
                }
            }
        }
    }
}
