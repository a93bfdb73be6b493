//! Two small continuous environments with binary success reward and their
//! scripted demonstrators.
//!
//! * Fork: a point on `[-G, G]` starting at the origin. Once the position is
//!   at least `commit` away from the origin an outward drift carries it
//!   towards the goal on that side, so the first action picks the branch.
//! * Reacher: a point in the plane moving with bounded velocity towards one
//!   of two goals at `(±2, 2)`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::continuous::{ActionNorm, ContinuousDemoDataset, ContinuousPolicy, ContinuousStep, ContinuousTrajectory};
use crate::error::{param_err, Error, Result};
use crate::rng;

/// Which goals count as success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalSet {
    Both,
    Left,
    Right,
}

impl GoalSet {
    fn allows(self, side: f64) -> bool {
        match self {
            GoalSet::Both => true,
            GoalSet::Left => side < 0.0,
            GoalSet::Right => side > 0.0,
        }
    }

    /// Allowed goal sides, left first.
    fn sides(self) -> Vec<f64> {
        [-1.0, 1.0].into_iter().filter(|&s| self.allows(s)).collect()
    }
}

impl std::str::FromStr for GoalSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(GoalSet::Both),
            "left" => Ok(GoalSet::Left),
            "right" => Ok(GoalSet::Right),
            other => Err(param_err(format!("unknown goal set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkParams {
    pub goal: f64,
    pub tol: f64,
    pub horizon: usize,
    pub commit: f64,
    pub drift: f64,
    pub goals: GoalSet,
}

impl Default for ForkParams {
    fn default() -> Self {
        Self { goal: 3.0, tol: 0.4, horizon: 8, commit: 0.25, drift: 1.5, goals: GoalSet::Both }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReacherParams {
    /// Goals sit at `(±goal_x, goal_y)`.
    pub goal_x: f64,
    pub goal_y: f64,
    pub tol: f64,
    pub horizon: usize,
    /// Displacement per unit action.
    pub speed: f64,
    /// Initial x is uniform on `[-start_jitter, start_jitter]`, y is 0.
    pub start_jitter: f64,
    /// Demonstrations starting with `|x| < corridor` pass through the
    /// sparsely covered middle region.
    pub corridor: f64,
    pub goals: GoalSet,
}

impl Default for ReacherParams {
    fn default() -> Self {
        Self {
            goal_x: 2.0,
            goal_y: 2.0,
            tol: 0.3,
            horizon: 20,
            speed: 0.2,
            start_jitter: 0.5,
            corridor: 0.1,
            goals: GoalSet::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ContinuousEnv {
    Fork(ForkParams),
    Reacher(ReacherParams),
}

pub fn fork_env() -> ContinuousEnv {
    ContinuousEnv::Fork(ForkParams::default())
}

pub fn reacher_env() -> ContinuousEnv {
    ContinuousEnv::Reacher(ReacherParams::default())
}

fn clip_unit(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.clamp(-1.0, 1.0)).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl ContinuousEnv {
    pub fn with_goals(&self, goals: GoalSet) -> Self {
        match self {
            ContinuousEnv::Fork(p) => ContinuousEnv::Fork(ForkParams { goals, ..p.clone() }),
            ContinuousEnv::Reacher(p) => ContinuousEnv::Reacher(ReacherParams { goals, ..p.clone() }),
        }
    }

    pub fn goals(&self) -> GoalSet {
        match self {
            ContinuousEnv::Fork(p) => p.goals,
            ContinuousEnv::Reacher(p) => p.goals,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ContinuousEnv::Fork(_) => 1,
            ContinuousEnv::Reacher(_) => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.state_dim()
    }

    pub fn horizon(&self) -> usize {
        match self {
            ContinuousEnv::Fork(p) => p.horizon,
            ContinuousEnv::Reacher(p) => p.horizon,
        }
    }

    pub fn action_norm(&self) -> ActionNorm {
        ActionNorm::identity(self.action_dim())
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ContinuousEnv::Fork(_) => vec![0.0],
            ContinuousEnv::Reacher(p) => vec![rng.random_range(-p.start_jitter..=p.start_jitter), 0.0],
        }
    }

    /// Deterministic transition. Actions are first clipped to the action
    /// bounds (and for the reacher to unit norm).
    pub fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let a = clip_unit(action);
        match self {
            ContinuousEnv::Fork(p) => {
                let x = state[0];
                let drift = if x.abs() >= p.commit { p.drift * sign(x) } else { 0.0 };
                vec![(x + a[0] + drift).clamp(-p.goal, p.goal)]
            }
            ContinuousEnv::Reacher(p) => {
                let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let k = if norm > 1.0 { 1.0 / norm } else { 1.0 };
                let bound = p.goal_x + 1.0;
                vec![
                    (state[0] + p.speed * k * a[0]).clamp(-bound, bound),
                    (state[1] + p.speed * k * a[1]).clamp(-1.0, p.goal_y + 1.0),
                ]
            }
        }
    }

    pub fn is_success(&self, state: &[f64]) -> bool {
        match self {
            ContinuousEnv::Fork(p) => p.goals.sides().iter().any(|&side| (state[0] - side * p.goal).abs() < p.tol),
            ContinuousEnv::Reacher(p) => p.goals.sides().iter().any(|&side| {
                let (dx, dy) = (state[0] - side * p.goal_x, state[1] - p.goal_y);
                (dx * dx + dy * dy).sqrt() < p.tol
            }),
        }
    }

    /// Whether a trajectory starting at `state` passes through the sparsely
    /// demonstrated corridor (reacher only).
    pub fn in_corridor(&self, state: &[f64]) -> bool {
        match self {
            ContinuousEnv::Fork(_) => false,
            ContinuousEnv::Reacher(p) => state[0].abs() < p.corridor,
        }
    }
}

/// One environment transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// A full-horizon episode. Reward 1 is assigned to the step that first
/// reaches a success state; `success_step` is its index.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub success_step: Option<usize>,
}

impl Episode {
    pub fn success(&self) -> bool {
        self.success_step.is_some()
    }
}

/// Runs `policy` for the full horizon. Stored actions are clipped to the
/// action bounds.
pub fn run_episode<P: ContinuousPolicy + ?Sized>(env: &ContinuousEnv, policy: &P, rng: &mut dyn RngCore) -> Episode {
    let mut state = env.initial_state(rng);
    let mut transitions = Vec::with_capacity(env.horizon());
    let mut success_step = None;
    for h in 0..env.horizon() {
        let action = clip_unit(&policy.act(&state, h, rng));
        let next = env.step(&state, &action);
        let first = success_step.is_none() && env.is_success(&next);
        if first {
            success_step = Some(h);
        }
        let done = first || h + 1 == env.horizon();
        transitions.push(Transition {
            state: std::mem::replace(&mut state, next.clone()),
            action,
            reward: if first { 1.0 } else { 0.0 },
            next_state: next,
            done,
        });
    }
    Episode { transitions, success_step }
}

/// Scripted demonstrators: first-step branch choice then proportional
/// control towards the committed goal, with Gaussian jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedDemonstrator {
    pub env: ContinuousEnv,
    pub jitter: f64,
    pub gain: f64,
}

pub fn scripted_demonstrator(env: &ContinuousEnv) -> ScriptedDemonstrator {
    ScriptedDemonstrator { env: env.clone(), jitter: 0.05, gain: 1.0 }
}

impl ScriptedDemonstrator {
    fn jitter(&self, rng: &mut dyn RngCore) -> f64 {
        self.jitter * rng.sample::<f64, _>(StandardNormal)
    }

    /// Goal side nearest to `x` among the allowed ones; ties at the origin
    /// are broken by a fair coin when both are allowed.
    fn side(&self, x: f64, rng: &mut dyn RngCore) -> f64 {
        let sides = self.env.goals().sides();
        if sides.len() == 1 {
            return sides[0];
        }
        if x == 0.0 {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            sign(x)
        }
    }
}

impl ContinuousPolicy for ScriptedDemonstrator {
    fn act(&self, state: &[f64], _step: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        match &self.env {
            ContinuousEnv::Fork(p) => {
                let x = state[0];
                let side = self.side(x, rng);
                let control = if x.abs() < 1e-12 { side } else { (self.gain * (side * p.goal - x)).clamp(-1.0, 1.0) };
                vec![(control + self.jitter(rng)).clamp(-1.0, 1.0)]
            }
            ContinuousEnv::Reacher(p) => {
                let side = self.side(state[0], rng);
                let (dx, dy) = (side * p.goal_x - state[0], p.goal_y - state[1]);
                let mut a = [self.gain * dx / p.speed, self.gain * dy / p.speed];
                let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
                if norm > 1.0 {
                    a = [a[0] / norm, a[1] / norm];
                }
                let a = [a[0] + self.jitter(rng), a[1] + self.jitter(rng)];
                clip_unit(&a)
            }
        }
    }
}

/// Acceptance condition for collected demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectoryFilter {
    /// Keep only trajectories whose first action has this sign (`+1` / `-1`).
    Branch { sign: i8 },
    /// Keep trajectories starting in the corridor with probability `keep_prob`.
    CorridorSubsample { keep_prob: f64 },
}

pub const DEFAULT_REJECTION_BUDGET: usize = 10_000;

/// Collects `t` fixed-length demonstrations, rejection-sampling against
/// `filter` with at most `budget` attempts.
pub fn collect_continuous_dataset<P: ContinuousPolicy + ?Sized, R: Rng + ?Sized>(
    env: &ContinuousEnv,
    demonstrator: &P,
    t: usize,
    filter: Option<TrajectoryFilter>,
    budget: usize,
    rng: &mut R,
) -> Result<ContinuousDemoDataset> {
    if t == 0 {
        return Err(Error::EmptyDataset);
    }
    let source_seed = rng.next_u64();
    let mut r = rng::seeded(source_seed);
    let mut trajectories = Vec::with_capacity(t);
    let mut attempts = 0;
    while trajectories.len() < t {
        if attempts == budget {
            return Err(Error::RejectionBudget { budget, collected: trajectories.len() });
        }
        attempts += 1;
        let ep = run_episode(env, demonstrator, &mut r);
        let traj = ContinuousTrajectory {
            steps: ep.transitions.into_iter().map(|tr| ContinuousStep(tr.state, tr.action, tr.reward)).collect(),
        };
        let keep = match filter {
            None => true,
            Some(TrajectoryFilter::Branch { sign }) => traj.branch() == sign,
            Some(TrajectoryFilter::CorridorSubsample { keep_prob }) => {
                !env.in_corridor(traj.steps[0].state()) || r.random::<f64>() < keep_prob
            }
        };
        if keep {
            trajectories.push(traj);
        }
    }
    ContinuousDemoDataset::new(
        trajectories,
        source_seed,
        env.state_dim(),
        env.action_dim(),
        env.horizon(),
        env.action_norm(),
    )
}

/// The fork fixture: ten left-branch-only demonstrations.
pub fn fork_left_fixture(seed: u64) -> Result<ContinuousDemoDataset> {
    let env = fork_env();
    let demo = scripted_demonstrator(&env);
    collect_continuous_dataset(
        &env,
        &demo,
        10,
        Some(TrajectoryFilter::Branch { sign: -1 }),
        DEFAULT_REJECTION_BUDGET,
        &mut rng::seeded(seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuous::FnPolicy;

    fn success_rate<P: ContinuousPolicy>(env: &ContinuousEnv, p: &P, n: u64) -> f64 {
        (0..n).filter(|&i| run_episode(env, p, &mut rng::stream(99, i)).success()).count() as f64 / n as f64
    }

    #[test]
    fn fork_kinematics() {
        let env = fork_env();
        let plus = FnPolicy(|_: &[f64], _: usize, _: &mut dyn RngCore| vec![1.0]);
        let ep = run_episode(&env, &plus, &mut rng::seeded(0));
        assert!(ep.success_step.unwrap() < 3);
        assert_eq!(ep.transitions.iter().map(|t| t.reward).sum::<f64>(), 1.0);
        let zero = FnPolicy(|_: &[f64], _: usize, _: &mut dyn RngCore| vec![0.0]);
        assert!(!run_episode(&env, &zero, &mut rng::seeded(0)).success());
        assert_eq!(env.step(&[0.5], &[0.2]), env.step(&[0.5], &[0.2]));
        assert_eq!(env.step(&[0.0], &[5.0]), vec![1.0]);
    }

    #[test]
    fn fork_demonstrator() {
        let env = fork_env();
        let demo = scripted_demonstrator(&env);
        assert_eq!(success_rate(&env, &demo, 1000), 1.0);
        let n = 10_000u64;
        let right = (0..n).filter(|&i| demo.act(&[0.0], 0, &mut rng::stream(5, i))[0] > 0.0).count() as f64 / n as f64;
        assert!((right - 0.5).abs() < 0.02, "{right}");
        // Jitter at the goal, where the control term vanishes.
        let xs: Vec<f64> = (0..n).map(|i| demo.act(&[-3.0], 3, &mut rng::stream(6, i))[0]).collect();
        let (_, se) = crate::stats::mean_se(&xs);
        let std = se * (n as f64).sqrt();
        assert!((std / 0.05 - 1.0).abs() < 0.1, "{std}");
    }

    #[test]
    fn reacher_controllers() {
        let env = reacher_env();
        let straight = FnPolicy(|s: &[f64], _: usize, _: &mut dyn RngCore| {
            let g = if s[0] < 0.0 { -2.0 } else { 2.0 };
            let (dx, dy) = (g - s[0], 2.0 - s[1]);
            let n = (dx * dx + dy * dy).sqrt();
            vec![dx / n, dy / n]
        });
        assert_eq!(success_rate(&env, &straight, 200), 1.0);
        let away = FnPolicy(|_: &[f64], _: usize, _: &mut dyn RngCore| vec![0.0, -1.0]);
        assert_eq!(success_rate(&env, &away, 50), 0.0);
        assert!(success_rate(&env, &scripted_demonstrator(&env), 1000) >= 0.95);
        let s = [0.3, 0.4];
        assert_eq!(env.step(&s, &[0.5, -0.7]), env.step(&s, &[0.5, -0.7]));
    }

    #[test]
    fn success_is_never_revoked() {
        let env = fork_env();
        let demo = scripted_demonstrator(&env);
        for i in 0..100 {
            let ep = run_episode(&env, &demo, &mut rng::stream(1, i));
            let k = ep.success_step.unwrap();
            assert!(ep.transitions[k..].iter().all(|t| env.is_success(&t.next_state)));
            assert_eq!(ep.transitions.iter().filter(|t| t.done).count(), if k + 1 == env.horizon() { 1 } else { 2 });
        }
    }

    #[test]
    fn datasets_and_filters() {
        let env = fork_env();
        let demo = scripted_demonstrator(&env);
        let ds = collect_continuous_dataset(&env, &demo, 10, None, 100, &mut rng::seeded(2)).unwrap();
        assert_eq!(ds.len(), 10);
        let left = fork_left_fixture(0).unwrap();
        assert!(left.trajectories.iter().all(|t| t.branch() == -1));
        let dense = left.pairs().iter().filter(|(s, _)| s[0] == -3.0).count();
        assert_eq!(dense, 60);
        let right_only = env.with_goals(GoalSet::Left);
        let err = collect_continuous_dataset(
            &right_only,
            &scripted_demonstrator(&right_only),
            1,
            Some(TrajectoryFilter::Branch { sign: 1 }),
            50,
            &mut rng::seeded(0),
        );
        assert!(matches!(err, Err(Error::RejectionBudget { budget: 50, collected: 0 })));
    }

    #[test]
    fn corridor_subsampling_thins_the_middle() {
        let env = reacher_env();
        let demo = scripted_demonstrator(&env);
        let filter = Some(TrajectoryFilter::CorridorSubsample { keep_prob: 0.0 });
        let ds = collect_continuous_dataset(&env, &demo, 20, filter, 1000, &mut rng::seeded(4)).unwrap();
        assert!(ds.trajectories.iter().all(|t| !env.in_corridor(t.steps[0].state())));
    }

    #[test]
    fn mixed_branches_without_filter() {
        let env = fork_env();
        let demo = scripted_demonstrator(&env);
        let mixed = (0..200)
            .filter(|&i| {
                let ds = collect_continuous_dataset(&env, &demo, 10, None, 10, &mut rng::seeded(i)).unwrap();
                let b: Vec<i8> = ds.trajectories.iter().map(|t| t.branch()).collect();
                b.contains(&1) && b.contains(&-1)
            })
            .count();
        // Expected 200 · (1 - 2^-9) ≈ 199.6.
        assert!(mixed >= 198);
    }
}
