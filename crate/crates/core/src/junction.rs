//! Discrete-action traffic junction.
//!
//! Four one-way lanes cross near the centre of a square grid: an eastbound
//! lane entering on the left, a southbound lane entering at the top, a
//! westbound lane entering on the right and a northbound lane entering at the
//! bottom. Each lane carries exactly one car that either gasses (advances one
//! cell) or brakes. A car reaching the far edge is replaced by a fresh car at
//! its lane entry. Cars observe only their own location and heading.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionMode, MultiAgentEnv, StepInfo, StepOutcome};
use crate::error::{Error, Result};
use crate::SimRng;

pub const N_CARS: usize = 4;
pub const R_COLLISION: f64 = -10.0;
pub const R_TIME: f64 = -0.01;
pub const GAS: usize = 0;
pub const BRAKE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    East,
    South,
    West,
    North,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::East, Heading::South, Heading::West, Heading::North];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarState {
    /// Lane the car drives on; the lane fixes both heading and route.
    pub lane: usize,
    /// Index along the lane's route, `0` is the entry cell.
    pub progress: usize,
    /// Timesteps since arrival, starting at 1.
    pub tau: u32,
}

#[derive(Debug, Clone)]
pub struct JunctionGrid {
    size: usize,
    routes: [Vec<usize>; 4],
}

impl JunctionGrid {
    pub fn new(size: usize) -> Result<Self> {
        if size < 5 || size.is_multiple_of(2) {
            return Err(Error::Config(format!("junction grid side must be odd and >= 5, got {size}")));
        }
        let c = size / 2;
        let cell = |row: usize, col: usize| row * size + col;
        let routes = [
            (0..size).map(|col| cell(c, col)).collect(),
            (0..size).map(|row| cell(row, c - 1)).collect(),
            (0..size).rev().map(|col| cell(c - 1, col)).collect(),
            (0..size).rev().map(|row| cell(row, c)).collect(),
        ];
        Ok(Self { size, routes })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_cells(&self) -> usize {
        self.size * self.size
    }

    pub fn route(&self, lane: usize) -> &[usize] {
        &self.routes[lane]
    }

    pub fn heading(&self, lane: usize) -> Heading {
        Heading::ALL[lane]
    }

    pub fn cell_of(&self, car: &CarState) -> usize {
        self.routes[car.lane][car.progress]
    }

    pub fn entry_cells(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|l| self.routes[l][0])
    }

    pub fn obs_dim(&self) -> usize {
        self.n_cells() + 4
    }
}

/// One-hot location followed by one-hot heading. Depends on nothing but the
/// car itself and the grid geometry.
pub fn encode_state(car: &CarState, grid: &JunctionGrid) -> Vec<f64> {
    let mut v = vec![0.0; grid.obs_dim()];
    v[grid.cell_of(car)] = 1.0;
    v[grid.n_cells() + grid.heading(car.lane).index()] = 1.0;
    v
}

/// `sum over cells of max(0, occupants - 1)`
pub fn detect_collisions(cells: &[usize]) -> usize {
    let mut sorted = cells.to_vec();
    sorted.sort_unstable();
    sorted.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Cars that exchanged cells in one move (each moved into the other's old cell).
fn count_swaps(before: &[usize], after: &[usize]) -> usize {
    let mut n = 0;
    for a in 0..before.len() {
        for b in a + 1..before.len() {
            if before[a] != after[a] && before[a] == after[b] && before[b] == after[a] {
                n += 1;
            }
        }
    }
    n
}

/// `C * r_coll + sum_i r_time * tau_i`
pub fn junction_reward(collisions: usize, taus: &[u32]) -> f64 {
    collisions as f64 * R_COLLISION + taus.iter().map(|&t| R_TIME * t as f64).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JunctionConfig {
    pub size: usize,
    pub horizon: usize,
    /// Respawn on a uniformly random lane instead of the car's own lane.
    pub random_respawn_lane: bool,
}

impl Default for JunctionConfig {
    fn default() -> Self {
        Self {
            size: 7,
            horizon: 40,
            random_respawn_lane: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub cells: Vec<usize>,
    pub actions: Vec<usize>,
    pub collisions: usize,
}

pub struct JunctionEnv {
    cfg: JunctionConfig,
    grid: JunctionGrid,
    cars: Vec<CarState>,
    t: usize,
    failed: bool,
    respawn_rng: SimRng,
    trace: Option<Vec<TraceRow>>,
}

impl JunctionEnv {
    pub fn new(cfg: JunctionConfig) -> Result<Self> {
        use rand::SeedableRng;
        if cfg.horizon == 0 {
            return Err(Error::Config("junction horizon must be positive".into()));
        }
        let grid = JunctionGrid::new(cfg.size)?;
        let cars = Self::initial_cars();
        Ok(Self {
            cfg,
            grid,
            cars,
            t: 0,
            failed: false,
            respawn_rng: SimRng::seed_from_u64(0),
            trace: None,
        })
    }

    fn initial_cars() -> Vec<CarState> {
        (0..N_CARS)
            .map(|lane| CarState {
                lane,
                progress: 0,
                tau: 1,
            })
            .collect()
    }

    pub fn grid(&self) -> &JunctionGrid {
        &self.grid
    }

    pub fn cars(&self) -> &[CarState] {
        &self.cars
    }

    /// Overrides car placement (tests and replays).
    pub fn set_cars(&mut self, cars: Vec<CarState>) -> Result<()> {
        if cars.len() != N_CARS || cars.iter().any(|c| c.lane >= 4 || c.progress >= self.grid.size || c.tau == 0) {
            return Err(Error::Contract("need four on-road cars with tau >= 1".into()));
        }
        self.cars = cars;
        Ok(())
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.cars.iter().map(|c| encode_state(c, &self.grid)).collect()
    }

    pub fn cells(&self) -> Vec<usize> {
        self.cars.iter().map(|c| self.grid.cell_of(c)).collect()
    }

    pub fn step_actions(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if actions.len() != self.cars.len() {
            return Err(Error::Contract(format!(
                "{} cars but {} actions",
                self.cars.len(),
                actions.len()
            )));
        }
        if actions.iter().any(|&a| a > BRAKE) {
            return Err(Error::Contract("actions are gas (0) or brake (1)".into()));
        }
        if self.t >= self.cfg.horizon {
            return Err(Error::Contract("episode already finished".into()));
        }
        let before = self.cells();
        for (car, &a) in self.cars.iter_mut().zip(actions) {
            if a == GAS {
                car.progress += 1;
            }
        }
        let after = self.cells();
        let collisions = detect_collisions(&after) + count_swaps(&before, &after);
        let taus: Vec<u32> = self.cars.iter().map(|c| c.tau).collect();
        let reward = junction_reward(collisions, &taus);
        if collisions > 0 {
            self.failed = true;
        }
        if let Some(tr) = self.trace.as_mut() {
            tr.push(TraceRow {
                t: self.t,
                cells: after.clone(),
                actions: actions.to_vec(),
                collisions,
            });
        }
        let last = self.grid.size - 1;
        for i in 0..self.cars.len() {
            self.cars[i].tau += 1;
            if self.cars[i].progress == last {
                let lane = if self.cfg.random_respawn_lane {
                    self.respawn_rng.random_range(0..4)
                } else {
                    self.cars[i].lane
                };
                self.cars[i] = CarState {
                    lane,
                    progress: 0,
                    tau: 1,
                };
            }
        }
        self.t += 1;
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            done: self.t >= self.cfg.horizon,
            info: StepInfo::Junction {
                collisions,
                failed: self.failed,
            },
        })
    }
}

impl MultiAgentEnv for JunctionEnv {
    fn n_agents(&self) -> usize {
        N_CARS
    }

    fn obs_dim(&self) -> usize {
        self.grid.obs_dim()
    }

    fn action_mode(&self) -> ActionMode {
        ActionMode::Discrete { n: 2 }
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<Vec<f64>> {
        use rand::SeedableRng;
        self.cars = Self::initial_cars();
        self.t = 0;
        self.failed = false;
        self.respawn_rng = SimRng::seed_from_u64(rng.random());
        if let Some(tr) = self.trace.as_mut() {
            tr.clear();
        }
        self.observations()
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        let a = actions
            .iter()
            .map(|a| {
                a.as_discrete()
                    .ok_or_else(|| Error::Contract("junction expects discrete actions".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.step_actions(&a)
    }
}
