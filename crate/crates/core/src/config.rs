//! Experiment configuration: TOML file, then command-line overrides, over defaults.
//!
//! Defaults that depend on the environment (discount, episode budget, replay
//! mode, evaluation length, convergence threshold) are resolved once the
//! environment is known, and the resolved config echoes every value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::junction::JunctionConfig;
use crate::models::{Architecture, ArchitectureKind, CriticDesign, ModelHyper};
use crate::replay::ReplayMode;
use crate::routing::Topology;
use crate::training::Hyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Routing {
        /// Builtin name (`twoIE`, `threeIE`, `fiveIE`) or path to a topology file.
        #[serde(default = "default_topology")]
        topology: String,
        #[serde(default = "default_routing_horizon")]
        horizon: usize,
        /// Replaces every pair's demand range when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        demand_range: Option<[f64; 2]>,
    },
    Junction {
        #[serde(default = "default_grid")]
        size: usize,
        #[serde(default = "default_junction_horizon")]
        horizon: usize,
        #[serde(default)]
        random_respawn_lane: bool,
    },
}

fn default_topology() -> String {
    "twoIE".into()
}

fn default_routing_horizon() -> usize {
    30
}

fn default_grid() -> usize {
    7
}

fn default_junction_horizon() -> usize {
    40
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Routing {
            topology: default_topology(),
            horizon: default_routing_horizon(),
            demand_range: None,
        }
    }
}

impl EnvConfig {
    pub fn is_discrete(&self) -> bool {
        matches!(self, EnvConfig::Junction { .. })
    }

    /// Short label such as `routing-twoIE` or `junction-7`.
    pub fn label(&self) -> String {
        match self {
            EnvConfig::Routing { topology, .. } => {
                let stem = Path::new(topology)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| topology.clone());
                format!("routing-{stem}")
            }
            EnvConfig::Junction { size, .. } => format!("junction-{size}"),
        }
    }

    /// Parses `routing`, `routing:<topology>`, `junction` or `junction:<size>`.
    pub fn parse_flag(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind.to_ascii_lowercase().as_str(), arg) {
            ("routing", a) => Ok(EnvConfig::Routing {
                topology: a.map_or_else(default_topology, str::to_string),
                horizon: default_routing_horizon(),
                demand_range: None,
            }),
            ("junction", a) => Ok(EnvConfig::Junction {
                size: match a {
                    Some(v) => v
                        .parse()
                        .map_err(|_| Error::Config(format!("junction size must be an integer, got {v:?}")))?,
                    None => default_grid(),
                },
                horizon: default_junction_horizon(),
                random_respawn_lane: false,
            }),
            _ => Err(Error::Config(format!(
                "unknown env {s:?}; expected routing[:topology] or junction[:size]"
            ))),
        }
    }

    pub fn topology(&self) -> Result<Option<Topology>> {
        match self {
            EnvConfig::Routing {
                topology, demand_range, ..
            } => {
                let mut t = Topology::load(topology)?;
                if let Some([lo, hi]) = demand_range {
                    for p in &mut t.pairs {
                        p.demand_range = (*lo, *hi);
                    }
                    t.validate()?;
                }
                Ok(Some(t))
            }
            EnvConfig::Junction { .. } => Ok(None),
        }
    }

    pub fn junction(&self) -> Option<JunctionConfig> {
        match *self {
            EnvConfig::Junction {
                size,
                horizon,
                random_respawn_lane,
            } => Some(JunctionConfig {
                size,
                horizon,
                random_respawn_lane,
            }),
            EnvConfig::Routing { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayKind {
    None,
    Cer,
    Ceer,
}

impl std::str::FromStr for ReplayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ReplayKind::None),
            "cer" => Ok(ReplayKind::Cer),
            "ceer" => Ok(ReplayKind::Ceer),
            _ => Err(Error::Config(format!("unknown replay mode {s:?}; expected none, cer or ceer"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// `cer` for continuous environments and `none` for discrete ones when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ReplayKind>,
    pub mix: f64,
    pub capacity: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mode: None,
            mix: 0.5,
            capacity: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunsConfig {
    pub count: usize,
    /// Run `k` uses seed `base_seed + k`.
    pub base_seed: u64,
}

impl Default for RunsConfig {
    fn default() -> Self {
        Self {
            count: 10,
            base_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    /// Discrete policies: the frozen softmax is sampled at this temperature;
    /// `0` picks the most likely action instead.
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: None,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub window: usize,
    /// Routing: threshold on `oracle max-U - episode mean max-U`.
    /// Junction: threshold on the mean per-step reward.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// End training at the convergence episode instead of the full budget.
    pub stop_on_convergence: bool,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            window: 50,
            threshold: None,
            stop_on_convergence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    /// Training episodes whose channel evaluations are logged.
    pub message_log_episodes: Vec<u64>,
    /// Evaluation episodes whose channel evaluations are logged.
    pub message_log_eval_episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Write per-run artifacts (metrics, messages, PCA, checkpoint).
    pub artifacts: bool,
    /// Store only what execution needs in run checkpoints.
    pub actors_only_checkpoint: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            message_log_episodes: Vec::new(),
            message_log_eval_episodes: 1,
            out_dir: None,
            artifacts: true,
            actors_only_checkpoint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub architecture: ArchitectureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_design: Option<CriticDesign>,
    pub model: ModelHyper,
    pub hyper: Hyper,
    pub replay: ReplayConfig,
    pub runs: RunsConfig,
    pub eval: EvalConfig,
    pub convergence: ConvergenceConfig,
    pub logging: LoggingConfig,
    /// Permit replay with discrete environments, where it destabilizes training.
    pub allow_discrete_replay: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            architecture: ArchitectureKind::ACCNetSep,
            critic_design: None,
            model: ModelHyper::default(),
            hyper: Hyper::routing(),
            replay: ReplayConfig::default(),
            runs: RunsConfig::default(),
            eval: EvalConfig::default(),
            convergence: ConvergenceConfig::default(),
            logging: LoggingConfig::default(),
            allow_discrete_replay: false,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub arch: Option<ArchitectureKind>,
    pub env: Option<EnvConfig>,
    pub episodes: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub replay: Option<ReplayKind>,
    pub allow_discrete_replay: bool,
    pub actors_only: bool,
}

impl ExperimentConfig {
    /// Defaults for an environment with every env-dependent value resolved.
    pub fn for_env(env: EnvConfig) -> Result<Self> {
        let cfg = Self {
            hyper: if env.is_discrete() { Hyper::junction() } else { Hyper::routing() },
            env,
            ..Self::default()
        };
        cfg.resolved()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            kind: self.architecture,
            critic_design: self.critic_design,
        }
    }

    pub fn replay_mode(&self) -> ReplayMode {
        match self.replay.mode.unwrap_or(ReplayKind::None) {
            ReplayKind::None => ReplayMode::None,
            ReplayKind::Cer => ReplayMode::Cer,
            ReplayKind::Ceer => ReplayMode::Ceer { mix: self.replay.mix },
        }
    }

    pub fn eval_episodes(&self) -> usize {
        self.eval.episodes.unwrap_or(if self.env.is_discrete() { 1000 } else { 200 })
    }

    pub fn convergence_threshold(&self) -> f64 {
        self.convergence.threshold.unwrap_or(if self.env.is_discrete() { -0.5 } else { -0.05 })
    }

    /// Fills env-dependent defaults and checks cross-field rules.
    pub fn resolved(mut self) -> Result<Self> {
        if self.replay.mode.is_none() {
            self.replay.mode = Some(if self.env.is_discrete() { ReplayKind::None } else { ReplayKind::Cer });
        }
        self.eval.episodes = Some(self.eval_episodes());
        self.convergence.threshold = Some(self.convergence_threshold());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.env.is_discrete() && self.replay.mode != Some(ReplayKind::None) && !self.allow_discrete_replay {
            return Err(Error::Config(
                "replay with a discrete-action environment destabilizes training; use replay mode \"none\" \
                 or set allow_discrete_replay (--allow-discrete-replay)"
                    .into(),
            ));
        }
        if self.critic_design.is_some() && !self.architecture.is_critic_channel() {
            return Err(Error::Config(format!(
                "critic_design only applies to A-CCNet variants, not {}",
                self.architecture
            )));
        }
        if !(0.0..=1.0).contains(&self.replay.mix) {
            return Err(Error::Config("replay.mix must lie in [0, 1]".into()));
        }
        if self.replay.capacity == 0 {
            return Err(Error::Config("replay.capacity must be positive".into()));
        }
        if self.convergence.window == 0 {
            return Err(Error::Config("convergence.window must be at least 1".into()));
        }
        if !(self.eval.temperature >= 0.0 && self.eval.temperature.is_finite()) {
            return Err(Error::Config("eval.temperature must be finite and non-negative".into()));
        }
        match &self.env {
            EnvConfig::Routing { horizon, .. } if *horizon == 0 => {
                return Err(Error::Config("routing horizon must be positive".into()))
            }
            EnvConfig::Routing { .. } => {
                self.env.topology()?;
            }
            EnvConfig::Junction { .. } => {
                crate::junction::JunctionEnv::new(self.env.junction().expect("junction"))?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot render config: {e}")))
    }
}

/// Parses TOML text over the defaults, applies overrides, resolves and validates.
pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;

    if let Some(env) = &overrides.env {
        cfg.env = env.clone();
    }
    // Hyperparameters the file leaves out follow the chosen environment.
    let base = if cfg.env.is_discrete() { Hyper::junction() } else { Hyper::routing() };
    let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(toml::Value::Table(h)) = raw.get("hyper") {
        for (k, v) in h {
            merged.insert(k.clone(), v.clone());
        }
    }
    cfg.hyper = merged
        .try_into()
        .map_err(|e| Error::Config(format!("config [hyper]: {e}")))?;

    if let Some(a) = overrides.arch {
        cfg.architecture = a;
        if !a.is_critic_channel() {
            cfg.critic_design = None;
        }
    }
    if let Some(e) = overrides.episodes {
        cfg.hyper.episodes = e;
    }
    if let Some(r) = overrides.runs {
        cfg.runs.count = r;
    }
    if let Some(s) = overrides.seed {
        cfg.runs.base_seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.logging.out_dir = Some(o.clone());
    }
    if let Some(r) = overrides.replay {
        cfg.replay.mode = Some(r);
    }
    if overrides.allow_discrete_replay {
        cfg.allow_discrete_replay = true;
    }
    if overrides.actors_only {
        cfg.logging.actors_only_checkpoint = true;
    }
    cfg.resolved()
}

/// Reads `path` (or nothing) and applies [`parse_config_str`].
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
