//! The interface the training loop drives, shared by both environments.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionMode {
    /// A point on the `k`-simplex per agent (flow splitting ratios).
    ContinuousSimplex { k: usize },
    /// One of `n` discrete choices per agent.
    Discrete { n: usize },
}

impl ActionMode {
    pub fn dim(self) -> usize {
        match self {
            ActionMode::ContinuousSimplex { k } => k,
            ActionMode::Discrete { n } => n,
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, ActionMode::Discrete { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Simplex(Vec<f64>),
    Discrete(usize),
}

impl Action {
    /// Encoding used as critic / channel input: the simplex itself, or a one-hot.
    pub fn features(&self, mode: ActionMode) -> Vec<f64> {
        match self {
            Action::Simplex(v) => v.clone(),
            Action::Discrete(a) => {
                let mut v = vec![0.0; mode.dim()];
                v[*a] = 1.0;
                v
            }
        }
    }

    pub fn as_simplex(&self) -> Option<&[f64]> {
        match self {
            Action::Simplex(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Simplex(_) => None,
        }
    }
}

/// Per-environment diagnostics attached to every step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepInfo {
    Routing { utilization: Vec<f64>, max_utilization: f64 },
    Junction { collisions: usize, failed: bool },
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub trait MultiAgentEnv {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_mode(&self) -> ActionMode;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> Vec<Vec<f64>>;
    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome>;
}
