//! Continuous-action traffic engineering: each ingress-egress pair splits its
//! demand over `K` paths and all pairs share the reward `1 - max_l U_l`.

mod oracle;
mod topology;

pub use oracle::{min_max_lp, min_max_oracle, simplex_grid, OracleResult, MAX_GRID_POINTS};
pub use topology::{IePair, Link, Topology, BUILTIN_NAMES};

use rand::Rng;

use crate::env::{Action, ActionMode, MultiAgentEnv, StepInfo, StepOutcome};
use crate::error::{Error, Result};
use crate::SimRng;

pub const SIMPLEX_TOL: f64 = 1e-6;

/// Per-link load divided by capacity for the given demands and splits.
pub fn compute_link_utilization(topo: &Topology, demands: &[f64], splits: &[Vec<f64>]) -> Result<Vec<f64>> {
    if demands.len() != topo.n_pairs() || splits.len() != topo.n_pairs() {
        return Err(Error::Shape(format!(
            "{} pairs but {} demands / {} splits",
            topo.n_pairs(),
            demands.len(),
            splits.len()
        )));
    }
    let mut load = vec![0.0; topo.links.len()];
    for ((pair, &f), y) in topo.pairs.iter().zip(demands).zip(splits) {
        check_split(pair, y)?;
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::Contract(format!("demand of {} must be finite and non-negative", pair.id)));
        }
        for (path, &share) in pair.paths.iter().zip(y) {
            for &l in path {
                load[l] += share * f;
            }
        }
    }
    Ok(load.iter().zip(&topo.links).map(|(x, l)| x / l.capacity).collect())
}

fn check_split(pair: &IePair, y: &[f64]) -> Result<()> {
    if y.len() != pair.k() {
        return Err(Error::Shape(format!("pair {} has {} paths, split has {}", pair.id, pair.k(), y.len())));
    }
    let sum: f64 = y.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || y.iter().any(|&v| !(v >= -SIMPLEX_TOL)) {
        return Err(Error::Contract(format!("split for {} is off the simplex (sum {sum})", pair.id)));
    }
    Ok(())
}

pub fn max_utilization(util: &[f64]) -> f64 {
    util.iter().copied().fold(0.0, f64::max)
}

/// `1 - max_l U_l`
pub fn reward(util: &[f64]) -> f64 {
    1.0 - max_utilization(util)
}

pub struct RoutingEnv {
    topo: Topology,
    horizon: usize,
    observed: Vec<Vec<usize>>,
    demand_scale: Vec<f64>,
    demands: Vec<f64>,
    last_util: Vec<f64>,
    t: usize,
}

impl RoutingEnv {
    pub fn new(topo: Topology, horizon: usize) -> Result<Self> {
        topo.validate()?;
        let observed: Vec<Vec<usize>> = (0..topo.n_pairs()).map(|i| topo.observed_links(i)).collect();
        let k = topo.pairs[0].k();
        if topo.pairs.iter().any(|p| p.k() != k) || observed.iter().any(|o| o.len() != observed[0].len()) {
            return Err(Error::Config(
                "all pairs must have the same number of paths and observed links".into(),
            ));
        }
        let demand_scale = observed
            .iter()
            .map(|ls| ls.iter().map(|&l| topo.links[l].capacity).sum::<f64>() / ls.len() as f64)
            .collect();
        let n = topo.n_pairs();
        let n_links = topo.links.len();
        Ok(Self {
            topo,
            horizon,
            observed,
            demand_scale,
            demands: vec![0.0; n],
            last_util: vec![0.0; n_links],
            t: 0,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn demands(&self) -> &[f64] {
        &self.demands
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn sample_demands(topo: &Topology, rng: &mut SimRng) -> Vec<f64> {
        topo.pairs
            .iter()
            .map(|p| {
                let (lo, hi) = p.demand_range;
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect()
    }

    /// Starts an episode with fixed demands; utilizations in the first state are zero.
    pub fn reset_with_demands(&mut self, demands: Vec<f64>) -> Result<Vec<Vec<f64>>> {
        if demands.len() != self.topo.n_pairs() || demands.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::Contract("one non-negative demand per pair required".into()));
        }
        self.demands = demands;
        self.last_util.iter_mut().for_each(|u| *u = 0.0);
        self.t = 0;
        Ok(self.states())
    }

    /// Local state of every pair: `[F_i / c_i, (U_l, max(0, 1 - U_l), max(0, U_l - 1)) for observed l]`,
    /// where `c_i` is the mean capacity of the pair's observed links.
    pub fn states(&self) -> Vec<Vec<f64>> {
        (0..self.topo.n_pairs()).map(|i| self.state_of(i)).collect()
    }

    fn state_of(&self, i: usize) -> Vec<f64> {
        let mut s = Vec::with_capacity(1 + 3 * self.observed[i].len());
        s.push(self.demands[i] / self.demand_scale[i]);
        for &l in &self.observed[i] {
            let u = self.last_util[l];
            s.extend([u, (1.0 - u).max(0.0), (u - 1.0).max(0.0)]);
        }
        s
    }

    pub fn step_splits(&mut self, splits: &[Vec<f64>]) -> Result<StepOutcome> {
        if self.t >= self.horizon {
            return Err(Error::Contract("episode already finished".into()));
        }
        let util = compute_link_utilization(&self.topo, &self.demands, splits)?;
        let max_u = max_utilization(&util);
        self.last_util.clone_from(&util);
        self.t += 1;
        Ok(StepOutcome {
            observations: self.states(),
            reward: 1.0 - max_u,
            done: self.t >= self.horizon,
            info: StepInfo::Routing {
                utilization: util,
                max_utilization: max_u,
            },
        })
    }
}

impl MultiAgentEnv for RoutingEnv {
    fn n_agents(&self) -> usize {
        self.topo.n_pairs()
    }

    fn obs_dim(&self) -> usize {
        1 + 3 * self.observed[0].len()
    }

    fn action_mode(&self) -> ActionMode {
        ActionMode::ContinuousSimplex { k: self.topo.pairs[0].k() }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<Vec<f64>> {
        let d = Self::sample_demands(&self.topo, rng);
        self.reset_with_demands(d).expect("sampled demands are valid")
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        let splits = actions
            .iter()
            .map(|a| {
                a.as_simplex()
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Contract("routing expects simplex actions".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.step_splits(&splits)
    }
}
