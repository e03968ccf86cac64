//! Joint-experience storage.
//!
//! Every entry holds the records of all agents from one timestep, so sampled
//! items are always aligned across agents.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ReplayMode {
    /// Pure on-policy: only the latest transition is kept.
    None,
    /// Uniform sampling over stored joint entries.
    Cer,
    /// Current-episode entries mixed with the main ring at episode end.
    Ceer { mix: f64 },
}

impl ReplayMode {
    pub fn name(self) -> &'static str {
        match self {
            ReplayMode::None => "none",
            ReplayMode::Cer => "cer",
            ReplayMode::Ceer { .. } => "ceer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub agent: usize,
    pub episode: u64,
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Action,
    pub next_state: Vec<f64>,
}

/// All agents' records for one timestep plus the shared reward.
#[derive(Debug, Clone, PartialEq)]
pub struct JointExperience {
    pub episode: u64,
    pub t: usize,
    pub reward: f64,
    pub done: bool,
    pub agents: Vec<AgentRecord>,
}

impl JointExperience {
    pub fn new(
        episode: u64,
        t: usize,
        states: Vec<Vec<f64>>,
        actions: Vec<Action>,
        reward: f64,
        next_states: Vec<Vec<f64>>,
        done: bool,
    ) -> Result<Self> {
        if states.len() != actions.len() || states.len() != next_states.len() {
            return Err(Error::Shape("states, actions and next states must cover the same agents".into()));
        }
        let agents = states
            .into_iter()
            .zip(actions)
            .zip(next_states)
            .enumerate()
            .map(|(agent, ((state, action), next_state))| AgentRecord {
                agent,
                episode,
                t,
                state,
                action,
                next_state,
            })
            .collect();
        Ok(Self {
            episode,
            t,
            reward,
            done,
            agents,
        })
    }

    /// True when every agent record carries this entry's `(episode, t)`.
    pub fn is_aligned(&self) -> bool {
        self.agents
            .iter()
            .enumerate()
            .all(|(i, r)| r.agent == i && r.episode == self.episode && r.t == self.t)
    }

    pub fn states(&self) -> Vec<&[f64]> {
        self.agents.iter().map(|r| r.state.as_slice()).collect()
    }

    pub fn next_states(&self) -> Vec<&[f64]> {
        self.agents.iter().map(|r| r.next_state.as_slice()).collect()
    }

    pub fn actions(&self) -> Vec<&Action> {
        self.agents.iter().map(|r| &r.action).collect()
    }
}

#[derive(Debug, Clone)]
pub struct JointBuffer {
    mode: ReplayMode,
    n_agents: usize,
    capacity: usize,
    ring: VecDeque<JointExperience>,
    scratch: Vec<JointExperience>,
}

impl JointBuffer {
    pub fn new(mode: ReplayMode, n_agents: usize, capacity: usize) -> Result<Self> {
        if n_agents == 0 || capacity == 0 {
            return Err(Error::Config("replay needs at least one agent and positive capacity".into()));
        }
        if let ReplayMode::Ceer { mix } = mode {
            if !(0.0..=1.0).contains(&mix) {
                return Err(Error::Config(format!("ceer mix must lie in [0, 1], got {mix}")));
            }
        }
        Ok(Self {
            mode,
            n_agents,
            capacity,
            ring: VecDeque::new(),
            scratch: Vec::new(),
        })
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn scratch_len(&self) -> usize {
        self.scratch.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &JointExperience> {
        self.ring.iter()
    }

    pub fn episode_entries(&self) -> &[JointExperience] {
        &self.scratch
    }

    /// The most recent entry, wherever it is held.
    pub fn latest(&self) -> Option<&JointExperience> {
        self.scratch.last().or(self.ring.back())
    }

    pub fn push_joint(&mut self, exp: JointExperience) -> Result<()> {
        if exp.agents.len() != self.n_agents {
            return Err(Error::Contract(format!(
                "joint experience holds {} of {} agents",
                exp.agents.len(),
                self.n_agents
            )));
        }
        if !exp.is_aligned() {
            return Err(Error::Contract("agent records disagree on (episode, t)".into()));
        }
        match self.mode {
            ReplayMode::None => {
                self.ring.clear();
                self.ring.push_back(exp);
            }
            ReplayMode::Cer => self.push_ring(exp),
            ReplayMode::Ceer { .. } => self.scratch.push(exp),
        }
        Ok(())
    }

    fn push_ring(&mut self, exp: JointExperience) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(exp);
    }

    /// Moves the in-flight episode into the main ring.
    pub fn end_episode(&mut self) {
        let scratch = std::mem::take(&mut self.scratch);
        for e in scratch {
            self.push_ring(e);
        }
    }

    /// Uniform draws with replacement from the main ring.
    pub fn sample_cer(&self, batch: usize, rng: &mut SimRng) -> Result<Vec<&JointExperience>> {
        if self.ring.is_empty() {
            return Err(Error::Contract("cannot sample from an empty buffer".into()));
        }
        Ok((0..batch).map(|_| &self.ring[rng.random_range(0..self.ring.len())]).collect())
    }

    /// `ceil(mix * batch)` draws from the current episode, the rest from the ring.
    /// Falls back to a single source when the other is empty.
    pub fn sample_ceer(&self, batch: usize, mix: f64, rng: &mut SimRng) -> Result<Vec<&JointExperience>> {
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::Config(format!("ceer mix must lie in [0, 1], got {mix}")));
        }
        if self.ring.is_empty() && self.scratch.is_empty() {
            return Err(Error::Contract("both replay sources are empty".into()));
        }
        let mut n_ep = (mix * batch as f64).ceil() as usize;
        if self.ring.is_empty() {
            n_ep = batch;
        } else if self.scratch.is_empty() {
            n_ep = 0;
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..n_ep {
            out.push(&self.scratch[rng.random_range(0..self.scratch.len())]);
        }
        for _ in n_ep..batch {
            out.push(&self.ring[rng.random_range(0..self.ring.len())]);
        }
        Ok(out)
    }
}
