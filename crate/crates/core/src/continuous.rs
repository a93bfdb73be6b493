//! Real-vector trajectories, demonstration datasets and the policy interface
//! shared by the toy environments, the ensemble and the diffusion policy.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::mdp::meta_path;

/// One step, serialized as `[state, action, reward]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStep(pub Vec<f64>, pub Vec<f64>, pub f64);

impl ContinuousStep {
    pub fn state(&self) -> &[f64] {
        &self.0
    }

    pub fn action(&self) -> &[f64] {
        &self.1
    }

    pub fn reward(&self) -> f64 {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrajectory {
    pub steps: Vec<ContinuousStep>,
}

impl ContinuousTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(ContinuousStep::reward).sum()
    }

    /// Sign of the first coordinate of the first action: `+1`, `-1` or `0`.
    pub fn branch(&self) -> i8 {
        match self.steps.first().map(|s| s.1[0]) {
            Some(a) if a > 0.0 => 1,
            Some(a) if a < 0.0 => -1,
            _ => 0,
        }
    }
}

/// Affine map from environment action bounds onto `[-1, 1]` per dimension:
/// `normalized = (a - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ActionNorm {
    pub fn from_bounds(low: &[f64], high: &[f64]) -> Self {
        Self {
            mean: low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect(),
            scale: low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.mean).zip(&self.scale).map(|((a, m), s)| (a - m) / s).collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.mean).zip(&self.scale).map(|((a, m), s)| a * s + m).collect()
    }
}

/// Demonstrations of common length `H` with real-vector states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousDemoDataset {
    pub trajectories: Vec<ContinuousTrajectory>,
    pub source_seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub action_norm: ActionNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDatasetMeta {
    pub seed: u64,
    pub d_s: usize,
    pub d_a: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "T")]
    pub num_trajectories: usize,
    pub action_norm: ActionNorm,
}

impl ContinuousDemoDataset {
    /// Validates dimensions, horizon and that every normalized action lies
    /// in `[-1, 1]`.
    pub fn new(
        trajectories: Vec<ContinuousTrajectory>,
        source_seed: u64,
        state_dim: usize,
        action_dim: usize,
        horizon: usize,
        action_norm: ActionNorm,
    ) -> Result<Self> {
        if action_norm.mean.len() != action_dim || action_norm.scale.len() != action_dim {
            return Err(dim_err("action normalization does not match the action dimension"));
        }
        for traj in &trajectories {
            if traj.len() != horizon {
                return Err(dim_err(format!("trajectory of length {} in a horizon-{horizon} dataset", traj.len())));
            }
            for step in &traj.steps {
                if step.0.len() != state_dim || step.1.len() != action_dim {
                    return Err(dim_err("step dimensions do not match the dataset"));
                }
                if action_norm.normalize(&step.1).iter().any(|a| !(a.abs() <= 1.0 + 1e-12)) {
                    return Err(Error::InvalidParameter(format!("action {:?} outside the bounds", step.1)));
                }
            }
        }
        Ok(Self { trajectories, source_seed, state_dim, action_dim, horizon, action_norm })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// All `(state, action)` pairs in trajectory order, actions as stored.
    pub fn pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| (s.0.clone(), s.1.clone()))).collect()
    }

    /// All pairs with actions mapped into `[-1, 1]`.
    pub fn normalized_pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.pairs().into_iter().map(|(s, a)| (s, self.action_norm.normalize(&a))).collect()
    }

    /// Same metadata, different trajectories.
    pub fn with_trajectories(&self, trajectories: Vec<ContinuousTrajectory>) -> Self {
        Self { trajectories, ..self.clone() }
    }

    pub fn meta(&self) -> ContinuousDatasetMeta {
        ContinuousDatasetMeta {
            seed: self.source_seed,
            d_s: self.state_dim,
            d_a: self.action_dim,
            horizon: self.horizon,
            num_trajectories: self.trajectories.len(),
            action_norm: self.action_norm.clone(),
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

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::fs::File::create(path)?;
        w.write_all(self.to_jsonl()?.as_bytes())?;
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let meta: ContinuousDatasetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let mut trajectories = Vec::with_capacity(meta.num_trajectories);
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                trajectories.push(serde_json::from_str(&line)?);
            }
        }
        if trajectories.len() != meta.num_trajectories {
            return Err(Error::Parse(format!(
                "metadata declares {} trajectories, file has {}",
                meta.num_trajectories,
                trajectories.len()
            )));
        }
        Self::new(trajectories, meta.seed, meta.d_s, meta.d_a, meta.horizon, meta.action_norm)
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

/// A stochastic state-to-action map, possibly step dependent.
pub trait ContinuousPolicy: Sync {
    fn act(&self, state: &[f64], step: usize, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Adapts a closure into a [`ContinuousPolicy`].
pub struct FnPolicy<F>(pub F);

impl<F> ContinuousPolicy for FnPolicy<F>
where
    F: Fn(&[f64], usize, &mut dyn RngCore) -> Vec<f64> + Sync,
{
    fn act(&self, state: &[f64], step: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (self.0)(state, step, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ContinuousDemoDataset {
        let traj = ContinuousTrajectory {
            steps: vec![
                ContinuousStep(vec![0.0], vec![-0.95], 0.0),
                ContinuousStep(vec![-0.95], vec![-1.0], 1.0 / 3.0),
            ],
        };
        ContinuousDemoDataset::new(vec![traj], 7, 1, 1, 2, ActionNorm::identity(1)).unwrap()
    }

    #[test]
    fn normalization_round_trip() {
        let n = ActionNorm::from_bounds(&[-2.0, 0.0], &[2.0, 1.0]);
        assert_eq!(n.normalize(&[2.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(n.denormalize(&[1.0, -1.0]), vec![2.0, 0.0]);
    }

    #[test]
    fn rejects_out_of_bounds_and_bad_lengths() {
        let bad = ContinuousTrajectory { steps: vec![ContinuousStep(vec![0.0], vec![1.5], 0.0)] };
        assert!(ContinuousDemoDataset::new(vec![bad.clone()], 0, 1, 1, 1, ActionNorm::identity(1)).is_err());
        assert!(ContinuousDemoDataset::new(vec![bad], 0, 1, 1, 2, ActionNorm::from_bounds(&[-2.0], &[2.0])).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let ds = tiny();
        assert!(ds.to_jsonl().unwrap().starts_with("{\"steps\":[[[0.0],[-0.95],0.0]"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.jsonl");
        ds.write_jsonl(&path).unwrap();
        assert_eq!(ContinuousDemoDataset::read_jsonl(&path).unwrap(), ds);
    }

    #[test]
    fn branch_is_sign_of_first_action() {
        assert_eq!(tiny().trajectories[0].branch(), -1);
    }
}
