//! Finite-horizon tabular MDPs, exact policy evaluation, rollouts and
//! demonstration datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::rng::{self, SimRng};

const PROB_TOL: f64 = 1e-12;

fn check_distribution(p: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(param_err(format!("{} has a negative or non-finite entry", what())));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(param_err(format!("{} sums to {total}, not 1", what())));
    }
    Ok(())
}

/// Samples an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// A finite MDP with horizon `H`, time-indexed transitions and deterministic
/// mean rewards in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Flattened `[h][s][a][s']`.
    transitions: Vec<f64>,
    init_dist: Vec<f64>,
    /// Flattened `[h][s][a]`.
    rewards: Vec<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP from flat row-major tables.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<f64>,
        init_dist: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(param_err("S, A and H must all be positive"));
        }
        let (s, a, h) = (num_states, num_actions, horizon);
        if transitions.len() != h * s * a * s {
            return Err(dim_err(format!(
                "transition table has {} entries, expected H*S*A*S = {}",
                transitions.len(),
                h * s * a * s
            )));
        }
        if init_dist.len() != s {
            return Err(dim_err(format!("initial distribution has {} entries, expected {s}", init_dist.len())));
        }
        if rewards.len() != h * s * a {
            return Err(dim_err(format!("reward table has {} entries, expected {}", rewards.len(), h * s * a)));
        }
        check_distribution(&init_dist, || "initial distribution".into())?;
        for (i, row) in transitions.chunks(s).enumerate() {
            let (hh, rest) = (i / (s * a), i % (s * a));
            check_distribution(row, || format!("P[h={hh}][s={}][a={}]", rest / a, rest % a))?;
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(param_err(format!("reward {r} outside [0, 1]")));
        }
        Ok(Self { num_states, num_actions, horizon, transitions, init_dist, rewards })
    }

    /// Builds an MDP from nested tables `transitions[h][s][a][s']` and `rewards[h][s][a]`.
    pub fn from_nested(
        transitions: &[Vec<Vec<Vec<f64>>>],
        init_dist: Vec<f64>,
        rewards: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let horizon = transitions.len();
        let num_states = init_dist.len();
        let num_actions = transitions.first().and_then(|t| t.first()).map_or(0, |r| r.len());
        if rewards.len() != horizon {
            return Err(dim_err("reward and transition horizons differ"));
        }
        let flat_t: Vec<f64> = transitions.iter().flatten().flatten().flatten().copied().collect();
        let flat_r: Vec<f64> = rewards.iter().flatten().flatten().copied().collect();
        Self::new(num_states, num_actions, horizon, flat_t, init_dist, flat_r)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn transition(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = ((h * self.num_states + s) * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[(h * self.num_states + s) * self.num_actions + a]
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_states != self.num_states
            || policy.num_actions != self.num_actions
            || policy.horizon != self.horizon
        {
            return Err(dim_err(format!(
                "policy has (S, A, H) = ({}, {}, {}), MDP has ({}, {}, {})",
                policy.num_states, policy.num_actions, policy.horizon, self.num_states, self.num_actions, self.horizon
            )));
        }
        Ok(())
    }

    /// Optimal policy and value by backward induction. Ties go to the lowest action index.
    pub fn optimal_policy(&self) -> (TabularPolicy, f64) {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        let mut next_v = vec![0.0; s_n];
        let mut probs = vec![0.0; self.horizon * s_n * a_n];
        for h in (0..self.horizon).rev() {
            let mut v = vec![0.0; s_n];
            for s in 0..s_n {
                let mut best = (f64::NEG_INFINITY, 0);
                for a in 0..a_n {
                    let q = self.reward(h, s, a) + dot(self.transition(h, s, a), &next_v);
                    if q > best.0 {
                        best = (q, a);
                    }
                }
                v[s] = best.0;
                probs[(h * s_n + s) * a_n + best.1] = 1.0;
            }
            next_v = v;
        }
        let value = dot(&self.init_dist, &next_v);
        let policy = TabularPolicy { num_states: s_n, num_actions: a_n, horizon: self.horizon, probs };
        (policy, value)
    }

    /// Random MDP: Dirichlet(1) transitions and initial distribution, uniform rewards.
    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, horizon: usize, rng: &mut R) -> Result<Self> {
        let mut transitions = Vec::with_capacity(horizon * num_states * num_actions * num_states);
        for _ in 0..horizon * num_states * num_actions {
            transitions.extend(dirichlet_ones(num_states, rng));
        }
        let init = dirichlet_ones(num_states, rng);
        let rewards = (0..horizon * num_states * num_actions).map(|_| rng.random::<f64>()).collect();
        Self::new(num_states, num_actions, horizon, transitions, init, rewards)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample from the flat Dirichlet distribution on the `n`-simplex.
pub fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    renormalize(&mut w);
    w
}

/// Rescales a nonnegative vector so it sums to one when its L1 drift exceeds
/// the validation tolerance.
pub(crate) fn renormalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        row.iter_mut().for_each(|x| *x /= total);
    }
}

/// Time-indexed stochastic policy `π_h(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Flattened `[h][s][a]`.
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(param_err("S, A and H must all be positive"));
        }
        if probs.len() != num_states * num_actions * horizon {
            return Err(dim_err(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                num_states * num_actions * horizon
            )));
        }
        for (i, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, || format!("policy row (h={}, s={})", i / num_states, i % num_states))?;
        }
        Ok(Self { num_states, num_actions, horizon, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self { num_states, num_actions, horizon, probs: vec![p; num_states * num_actions * horizon] }
    }

    /// Policy with the same action distribution at every `(h, s)`.
    pub fn constant_row(num_states: usize, horizon: usize, row: &[f64]) -> Result<Self> {
        let probs = row.repeat(num_states * horizon);
        Self::new(num_states, row.len(), horizon, probs)
    }

    /// Deterministic policy choosing `choose(h, s)`.
    pub fn deterministic(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        choose: impl Fn(usize, usize) -> usize,
    ) -> Result<Self> {
        let mut probs = vec![0.0; num_states * num_actions * horizon];
        for h in 0..horizon {
            for s in 0..num_states {
                let a = choose(h, s);
                if a >= num_actions {
                    return Err(Error::IndexOutOfRange(format!("action {a} >= A = {num_actions}")));
                }
                probs[(h * num_states + s) * num_actions + a] = 1.0;
            }
        }
        Ok(Self { num_states, num_actions, horizon, probs })
    }

    /// Policy whose every row is an independent flat-Dirichlet draw.
    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, horizon: usize, rng: &mut R) -> Self {
        let probs = (0..num_states * horizon).flat_map(|_| dirichlet_ones(num_actions, rng)).collect();
        Self { num_states, num_actions, horizon, probs }
    }

    /// Build from rows produced by `row(h, s, out)`; rows are renormalized only
    /// if their drift from 1 exceeds the tolerance.
    pub(crate) fn from_row_fn(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mut row: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut probs = vec![0.0; num_states * num_actions * horizon];
        for (i, chunk) in probs.chunks_mut(num_actions).enumerate() {
            row(i / num_states, i % num_states, chunk);
            renormalize(chunk);
        }
        Self { num_states, num_actions, horizon, probs }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions && self.horizon == other.horizon
    }
}

/// Exact expected return `J(π)` by backward dynamic programming.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    mdp.check_policy(policy)?;
    let s_n = mdp.num_states;
    let mut next_v = vec![0.0; s_n];
    for h in (0..mdp.horizon).rev() {
        let v: Vec<f64> = (0..s_n)
            .map(|s| {
                policy
                    .row(h, s)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(a, &p)| p * (mdp.reward(h, s, a) + dot(mdp.transition(h, s, a), &next_v)))
                    .sum()
            })
            .collect();
        next_v = v;
    }
    Ok(dot(&mdp.init_dist, &next_v))
}

/// Occupancy measure `w_h(s, a) = P^π[s_h = s, a_h = a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl Occupancy {
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[(h * self.num_states + s) * self.num_actions + a]
    }

    /// The `(s, a)` table for step `h`, flattened `[s][a]`.
    pub fn step(&self, h: usize) -> &[f64] {
        let n = self.num_states * self.num_actions;
        &self.values[h * n..(h + 1) * n]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Forward recursion for the occupancy measure of `policy`.
pub fn occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Occupancy> {
    mdp.check_policy(policy)?;
    let (s_n, a_n, h_n) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut values = vec![0.0; h_n * s_n * a_n];
    let mut state_dist = mdp.init_dist.clone();
    for h in 0..h_n {
        let mut next = vec![0.0; s_n];
        for s in 0..s_n {
            for a in 0..a_n {
                let w = state_dist[s] * policy.prob(h, s, a);
                values[(h * s_n + s) * a_n + a] = w;
                if w > 0.0 {
                    for (n, p) in next.iter_mut().zip(mdp.transition(h, s, a)) {
                        *n += w * p;
                    }
                }
            }
        }
        state_dist = next;
    }
    Ok(Occupancy { num_states: s_n, num_actions: a_n, horizon: h_n, values })
}

/// One step of a tabular trajectory, serialized as `[s, a, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step(pub usize, pub usize, pub f64);

impl Step {
    pub fn state(&self) -> usize {
        self.0
    }

    pub fn action(&self) -> usize {
        self.1
    }

    pub fn reward(&self) -> f64 {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(Step::reward).sum()
    }
}

/// Samples one episode of `policy` on `mdp`.
pub fn rollout<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &TabularPolicy, rng: &mut R) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    Ok(rollout_unchecked(mdp, policy, rng))
}

fn rollout_unchecked<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &TabularPolicy, rng: &mut R) -> Trajectory {
    let mut s = sample_categorical(&mdp.init_dist, rng);
    let mut steps = Vec::with_capacity(mdp.horizon);
    for h in 0..mdp.horizon {
        let a = sample_categorical(policy.row(h, s), rng);
        steps.push(Step(s, a, mdp.reward(h, s, a)));
        if h + 1 < mdp.horizon {
            s = sample_categorical(mdp.transition(h, s, a), rng);
        }
    }
    Trajectory { steps }
}

/// Demonstration dataset of `T` trajectories of common length `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub trajectories: Vec<Trajectory>,
    pub source_seed: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
}

/// Sidecar metadata written next to a JSONL dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "T")]
    pub num_trajectories: usize,
}

/// Path of the metadata sidecar for a dataset file: `x.jsonl` → `x.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            seed: self.source_seed,
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            num_trajectories: self.trajectories.len(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for traj in &self.trajectories {
            out.push_str(&serde_json::to_string(traj)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the trajectories to `path` and the metadata to its sidecar.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let mut trajectories = Vec::with_capacity(meta.num_trajectories);
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str::<Trajectory>(&line)?);
        }
        if trajectories.len() != meta.num_trajectories {
            return Err(Error::Parse(format!(
                "metadata declares {} trajectories, file has {}",
                meta.num_trajectories,
                trajectories.len()
            )));
        }
        if let Some(t) = trajectories.iter().find(|t| t.len() != meta.horizon) {
            return Err(Error::Parse(format!(
                "trajectory of length {} in a horizon-{} dataset",
                t.len(),
                meta.horizon
            )));
        }
        Ok(Self {
            trajectories,
            source_seed: meta.seed,
            num_states: meta.num_states,
            num_actions: meta.num_actions,
            horizon: meta.horizon,
        })
    }
}

/// Collects `t` independent demonstrator rollouts.
///
/// A fresh seed is drawn from `rng` and recorded as `source_seed`; the
/// trajectories are generated from that seed alone.
pub fn collect_dataset<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    t: usize,
    rng: &mut R,
) -> Result<DemoDataset> {
    if t == 0 {
        return Err(Error::EmptyDataset);
    }
    mdp.check_policy(policy)?;
    let source_seed = rng.next_u64();
    let mut inner: SimRng = rng::seeded(source_seed);
    let trajectories = (0..t).map(|_| rollout_unchecked(mdp, policy, &mut inner)).collect();
    Ok(DemoDataset {
        trajectories,
        source_seed,
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        horizon: mdp.horizon,
    })
}

/// Visit counts `T_h(s)` and `T_h(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    state_counts: Vec<u64>,
    state_action_counts: Vec<u64>,
}

impl CountTable {
    /// Builds a table from `T_h(s, a)` (flattened `[h][s][a]`), deriving `T_h(s)`.
    pub fn from_state_action_counts(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        state_action_counts: Vec<u64>,
    ) -> Result<Self> {
        if state_action_counts.len() != num_states * num_actions * horizon {
            return Err(dim_err("count table size does not match (S, A, H)"));
        }
        let state_counts = state_action_counts.chunks(num_actions).map(|c| c.iter().sum()).collect();
        Ok(Self { num_states, num_actions, horizon, state_counts, state_action_counts })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state(&self, h: usize, s: usize) -> u64 {
        self.state_counts[h * self.num_states + s]
    }

    pub fn state_action(&self, h: usize, s: usize, a: usize) -> u64 {
        self.state_action_counts[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn state_action_row(&self, h: usize, s: usize) -> &[u64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.state_action_counts[start..start + self.num_actions]
    }

    /// Checks both conservation laws against `num_trajectories`.
    pub fn is_consistent(&self, num_trajectories: u64) -> bool {
        let rows_ok = (0..self.horizon * self.num_states).all(|i| {
            let start = i * self.num_actions;
            self.state_action_counts[start..start + self.num_actions].iter().sum::<u64>() == self.state_counts[i]
        });
        let steps_ok = self.state_counts.chunks(self.num_states).all(|c| c.iter().sum::<u64>() == num_trajectories);
        rows_ok && steps_ok
    }
}

/// Tallies visit counts from a dataset.
pub fn counts(dataset: &DemoDataset, num_states: usize, num_actions: usize, horizon: usize) -> Result<CountTable> {
    let mut sa = vec![0u64; num_states * num_actions * horizon];
    for (t, traj) in dataset.trajectories.iter().enumerate() {
        if traj.len() != horizon {
            return Err(dim_err(format!("trajectory {t} has length {}, expected {horizon}", traj.len())));
        }
        for (h, step) in traj.steps.iter().enumerate() {
            if step.state() >= num_states || step.action() >= num_actions {
                return Err(Error::IndexOutOfRange(format!(
                    "trajectory {t} step {h}: (s, a) = ({}, {}) outside S = {num_states}, A = {num_actions}",
                    step.state(),
                    step.action()
                )));
            }
            sa[(h * num_states + step.state()) * num_actions + step.action()] += 1;
        }
    }
    CountTable::from_state_action_counts(num_states, num_actions, horizon, sa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn bandit(rewards: &[f64]) -> TabularMdp {
        let a = rewards.len();
        TabularMdp::new(1, a, 1, vec![1.0; a], vec![1.0], rewards.to_vec()).unwrap()
    }

    #[test]
    fn single_state_bandit_value() {
        let mdp = bandit(&[1.0, 0.0]);
        let pi = TabularPolicy::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(evaluate_policy(&mdp, &pi).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(TabularMdp::new(1, 2, 1, vec![1.0, 0.9], vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(TabularMdp::new(1, 2, 1, vec![1.0, 1.0], vec![1.0], vec![0.0, 1.5]).is_err());
        assert!(TabularMdp::new(1, 2, 1, vec![1.0, 1.0], vec![0.5], vec![0.0, 0.0]).is_err());
        assert!(TabularPolicy::new(1, 2, 1, vec![0.7, 0.7]).is_err());
        assert!(TabularPolicy::new(1, 2, 1, vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mdp = bandit(&[1.0, 0.0]);
        let pi = TabularPolicy::uniform(1, 3, 1);
        assert!(matches!(evaluate_policy(&mdp, &pi), Err(Error::DimensionMismatch(_))));
        assert!(occupancy(&mdp, &pi).is_err());
        assert!(rollout(&mdp, &pi, &mut rng::seeded(0)).is_err());
    }

    fn two_state_chain() -> TabularMdp {
        // s0 -a0-> s1, s1 absorbing; reward 1 for a1 in s1.
        let mut t = vec![vec![vec![vec![0.0; 2]; 2]; 2]; 3];
        for step in t.iter_mut() {
            step[0][0] = vec![0.0, 1.0];
            step[0][1] = vec![1.0, 0.0];
            step[1][0] = vec![0.0, 1.0];
            step[1][1] = vec![0.0, 1.0];
        }
        let r = vec![vec![vec![0.0, 0.0], vec![0.0, 1.0]]; 3];
        TabularMdp::from_nested(&t, vec![1.0, 0.0], &r).unwrap()
    }

    #[test]
    fn deterministic_chain_occupancy_is_indicator() {
        let mdp = two_state_chain();
        let pi = TabularPolicy::deterministic(2, 2, 3, |h, _| usize::from(h > 0)).unwrap();
        let occ = occupancy(&mdp, &pi).unwrap();
        assert_eq!(occ.step(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(occ.step(1), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(occ.step(2), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(evaluate_policy(&mdp, &pi).unwrap(), 2.0);
        let traj_a = rollout(&mdp, &pi, &mut rng::seeded(1)).unwrap();
        let traj_b = rollout(&mdp, &pi, &mut rng::seeded(99)).unwrap();
        assert_eq!(traj_a, traj_b);
        assert_eq!(traj_a.steps, vec![Step(0, 0, 0.0), Step(1, 1, 1.0), Step(1, 1, 1.0)]);
    }

    #[test]
    fn first_step_occupancy_is_init_times_policy() {
        let mut r = rng::seeded(3);
        let mdp = TabularMdp::random(4, 3, 2, &mut r).unwrap();
        let pi = TabularPolicy::random(4, 3, 2, &mut r);
        let occ = occupancy(&mdp, &pi).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert_eq!(occ.get(0, s, a), mdp.init_dist()[s] * pi.prob(0, s, a));
            }
        }
    }

    #[test]
    fn optimal_policy_dominates_random_policies() {
        let mut r = rng::seeded(11);
        let mdp = TabularMdp::random(3, 3, 4, &mut r).unwrap();
        let (opt, v) = mdp.optimal_policy();
        assert!((evaluate_policy(&mdp, &opt).unwrap() - v).abs() < 1e-12);
        for _ in 0..20 {
            let pi = TabularPolicy::random(3, 3, 4, &mut r);
            assert!(evaluate_policy(&mdp, &pi).unwrap() <= v + 1e-12);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let mdp = bandit(&[1.0, 0.0]);
        let pi = TabularPolicy::uniform(1, 2, 1);
        assert!(matches!(collect_dataset(&mdp, &pi, 0, &mut rng::seeded(0)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn collected_dataset_is_reproducible_from_recorded_seed() {
        let mdp = two_state_chain();
        let pi = TabularPolicy::uniform(2, 2, 3);
        let d1 = collect_dataset(&mdp, &pi, 5, &mut rng::seeded(4)).unwrap();
        let d2 = collect_dataset(&mdp, &pi, 5, &mut rng::seeded(4)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 5);
        // Replay from the recorded seed alone.
        let mut inner = rng::seeded(d1.source_seed);
        let replay: Vec<_> = (0..5).map(|_| rollout(&mdp, &pi, &mut inner).unwrap()).collect();
        assert_eq!(replay, d1.trajectories);
    }

    #[test]
    fn counts_single_visit() {
        let traj = Trajectory { steps: vec![Step(0, 0, 0.0), Step(1, 0, 0.0), Step(2, 1, 0.0), Step(2, 1, 0.0)] };
        let ds = DemoDataset { trajectories: vec![traj], source_seed: 0, num_states: 3, num_actions: 2, horizon: 4 };
        let c = counts(&ds, 3, 2, 4).unwrap();
        // Step h=3 in one-based indexing is index 2.
        assert_eq!(c.state(2, 2), 1);
        assert_eq!(c.state_action(2, 2, 1), 1);
        assert_eq!(c.state(0, 2), 0);
        assert_eq!(c.state_action(1, 0, 0), 0);
        assert!(c.is_consistent(1));
    }

    #[test]
    fn counts_rejects_out_of_range() {
        let traj = Trajectory { steps: vec![Step(0, 5, 0.0)] };
        let ds = DemoDataset { trajectories: vec![traj], source_seed: 0, num_states: 1, num_actions: 2, horizon: 1 };
        assert!(matches!(counts(&ds, 1, 2, 1), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn jsonl_format_and_round_trip() {
        let mdp = two_state_chain();
        let pi = TabularPolicy::uniform(2, 2, 3);
        let ds = collect_dataset(&mdp, &pi, 3, &mut rng::seeded(8)).unwrap();
        let text = ds.to_jsonl().unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"steps\":[["), "{first}");
        let dir = std::env::temp_dir().join(format!("postbc-mdp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("demo.jsonl");
        ds.write_jsonl(&path).unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(meta["T"], 3);
        assert_eq!(meta["S"], 2);
        assert_eq!(DemoDataset::read_jsonl(&path).unwrap(), ds);
        std::fs::remove_dir_all(&dir).ok();
    }
}
