//! Multi-agent actor-critic models.
//!
//! | kind        | actor input          | critic input                         | channel |
//! |-------------|----------------------|--------------------------------------|---------|
//! | IND         | `s_i`                | `s_i (, a_i)`                        | none    |
//! | FC          | all states (one net) | all states (, all actions)           | none    |
//! | AC-CNet     | `s_i ++ sg_i`        | `s_i (, a_i) ++ sg_i`                | between actors, payload `s_i` |
//! | A-CCNet     | `s_i`                | `s_i (, a_i) ++ sg_i (++ msg_i)`     | between critics, payload `s_i (++ a_i)` |
//!
//! Bracketed action parts appear only for continuous actions, where critics
//! estimate `Q`; for discrete actions critics estimate `V`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Channel, ChannelDims, ChannelGrads, ChannelPass};
use crate::env::{Action, ActionMode};
use crate::error::{shape_err, Error, Result};
use crate::nn::{chain, softmax_blocks, softmax_blocks_backprop, Activation, Mlp, ParamGrads, Tape};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchitectureKind {
    #[serde(rename = "IND")]
    Ind,
    #[serde(rename = "FC-sep", alias = "FC_sep")]
    FcSep,
    #[serde(rename = "FC-sha", alias = "FC_sha")]
    FcSha,
    #[serde(rename = "AC-CNet", alias = "AC_CNet")]
    AcCNet,
    #[serde(rename = "A-CCNet-sep", alias = "A_CCNet_sep")]
    ACCNetSep,
    #[serde(rename = "A-CCNet-sha", alias = "A_CCNet_sha")]
    ACCNetSha,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 6] = [
        ArchitectureKind::Ind,
        ArchitectureKind::FcSep,
        ArchitectureKind::FcSha,
        ArchitectureKind::AcCNet,
        ArchitectureKind::ACCNetSep,
        ArchitectureKind::ACCNetSha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::Ind => "IND",
            ArchitectureKind::FcSep => "FC-sep",
            ArchitectureKind::FcSha => "FC-sha",
            ArchitectureKind::AcCNet => "AC-CNet",
            ArchitectureKind::ACCNetSep => "A-CCNet-sep",
            ArchitectureKind::ACCNetSha => "A-CCNet-sha",
        }
    }

    pub fn is_fc(self) -> bool {
        matches!(self, ArchitectureKind::FcSep | ArchitectureKind::FcSha)
    }

    /// Channel between critics.
    pub fn is_critic_channel(self) -> bool {
        matches!(self, ArchitectureKind::ACCNetSep | ArchitectureKind::ACCNetSha)
    }

    /// Channel between actors.
    pub fn is_actor_channel(self) -> bool {
        self == ArchitectureKind::AcCNet
    }

    pub fn has_channel(self) -> bool {
        self.is_critic_channel() || self.is_actor_channel()
    }

    pub fn shared_critic(self) -> bool {
        matches!(self, ArchitectureKind::FcSha | ArchitectureKind::ACCNetSha)
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        ArchitectureKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = ArchitectureKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown architecture {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticDesign {
    /// Critic reads the global signal (and its own state and action).
    SignalOnly,
    /// Additionally reads the agent's own outgoing message.
    SignalPlusLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchitectureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_design: Option<CriticDesign>,
}

impl Architecture {
    pub fn new(kind: ArchitectureKind) -> Self {
        Self {
            kind,
            critic_design: None,
        }
    }

    pub fn with_design(kind: ArchitectureKind, design: CriticDesign) -> Self {
        Self {
            kind,
            critic_design: Some(design),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_mode: ActionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub channel_hidden: Vec<usize>,
    pub message_dim: usize,
    pub signal_dim: usize,
    /// Defaults to elu for continuous actions and relu for discrete ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_activation: Option<Activation>,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            actor_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            channel_hidden: vec![16],
            message_dim: 2,
            signal_dim: 4,
            hidden_activation: None,
        }
    }
}

/// How a policy output becomes an action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exploration {
    /// Policy mean (continuous) or arg-max (discrete).
    Greedy,
    /// `(1 - eps) * pi(s) + eps * Dirichlet(1)`; continuous actions only.
    Dirichlet { eps: f64 },
    /// Sample from the softmax sharpened or flattened by `temperature`; discrete only.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub actors: usize,
    pub critics: usize,
    pub channel: usize,
    pub critic_sets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CriticLayout {
    obs: usize,
    action: usize,
    signal: usize,
    message: usize,
}

impl CriticLayout {
    fn total(&self) -> usize {
        self.obs + self.action + self.signal + self.message
    }
}

/// Forward record of all actors.
#[derive(Debug, Clone)]
pub struct ActorPass {
    /// Per-agent action distribution (discrete) or simplex (continuous).
    pub policies: Vec<Vec<f64>>,
    tapes: Vec<Tape>,
    channel: Option<ChannelPass>,
}

impl ActorPass {
    pub fn channel(&self) -> Option<&ChannelPass> {
        self.channel.as_ref()
    }
}

/// Forward record of all critics.
#[derive(Debug, Clone)]
pub struct CriticPass {
    pub values: Vec<f64>,
    tapes: Vec<Tape>,
    channel: Option<ChannelPass>,
}

impl CriticPass {
    pub fn channel(&self) -> Option<&ChannelPass> {
        self.channel.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrads {
    pub nets: Vec<ParamGrads>,
    pub channel: Option<ChannelGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads {
    pub nets: Vec<ParamGrads>,
    pub channel: Option<ChannelGrads>,
}

fn scale_all(nets: &mut [ParamGrads], channel: Option<&mut ChannelGrads>, c: f64) {
    nets.iter_mut().for_each(|g| g.scale(c));
    if let Some(ch) = channel {
        ch.scale(c);
    }
}

impl ActorGrads {
    pub fn scale(&mut self, c: f64) {
        scale_all(&mut self.nets, self.channel.as_mut(), c);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.nets.iter().flat_map(ParamGrads::to_flat).collect();
        if let Some(c) = &self.channel {
            v.extend(c.to_flat());
        }
        v
    }
}

impl CriticGrads {
    pub fn scale(&mut self, c: f64) {
        scale_all(&mut self.nets, self.channel.as_mut(), c);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.nets.iter().flat_map(ParamGrads::to_flat).collect();
        if let Some(c) = &self.channel {
            v.extend(c.to_flat());
        }
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiAgentModel {
    arch: Architecture,
    env: EnvSpec,
    hyper: ModelHyper,
    actors: Vec<Mlp>,
    critics: Option<Vec<Mlp>>,
    channel: Option<Channel>,
}

impl MultiAgentModel {
    pub fn build(arch: Architecture, env: EnvSpec, hyper: &ModelHyper, rng: &mut SimRng) -> Result<Self> {
        let kind = arch.kind;
        if arch.critic_design.is_some() && !kind.is_critic_channel() {
            return Err(Error::Config(format!("critic_design only applies to A-CCNet variants, not {kind}")));
        }
        let arch = Architecture {
            kind,
            critic_design: kind.is_critic_channel().then(|| arch.critic_design.unwrap_or(CriticDesign::SignalPlusLocal)),
        };
        let EnvSpec {
            n_agents: n,
            obs_dim: d,
            action_mode,
        } = env;
        let a = action_mode.dim();
        if n == 0 || d == 0 || a < 2 {
            return Err(Error::Config(format!(
                "need at least one agent, a non-empty state and two actions (got N={n}, d={d}, A={a})"
            )));
        }
        if kind.has_channel() && (hyper.message_dim == 0 || hyper.signal_dim == 0) {
            return Err(Error::Config("message and signal dimensions must be positive".into()));
        }
        let act = hyper.hidden_activation.unwrap_or(if action_mode.is_discrete() {
            Activation::Relu
        } else {
            Activation::Elu
        });
        let mut model = Self {
            arch,
            env,
            hyper: hyper.clone(),
            actors: Vec::new(),
            critics: None,
            channel: None,
        };

        if kind.is_fc() {
            model.actors.push(Mlp::new(&chain(n * d, &hyper.actor_hidden, act, n * a, Activation::Identity), rng)?);
        } else {
            let in_dim = d + if kind.is_actor_channel() { hyper.signal_dim } else { 0 };
            for _ in 0..n {
                model.actors.push(Mlp::new(&chain(in_dim, &hyper.actor_hidden, act, a, Activation::Softmax), rng)?);
            }
        }

        let mut critics = Vec::new();
        if kind.is_fc() {
            let in_dim = n * d + if model.is_q() { n * a } else { 0 };
            let out = if kind.shared_critic() { 1 } else { n };
            critics.push(Mlp::new(&chain(in_dim, &hyper.critic_hidden, act, out, Activation::Identity), rng)?);
        } else {
            let count = if kind.shared_critic() { 1 } else { n };
            let in_dim = model.critic_layout().total();
            for _ in 0..count {
                critics.push(Mlp::new(&chain(in_dim, &hyper.critic_hidden, act, 1, Activation::Identity), rng)?);
            }
        }
        model.critics = Some(critics);

        if kind.has_channel() {
            let dims = ChannelDims {
                n_agents: n,
                payload_dim: model.payload_dim(),
                message_dim: hyper.message_dim,
                signal_dim: hyper.signal_dim,
            };
            model.channel = Some(Channel::new(dims, &hyper.channel_hidden, act, rng)?);
        }
        Ok(model)
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.arch.kind
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn critic_design(&self) -> Option<CriticDesign> {
        self.arch.critic_design
    }

    pub fn env_spec(&self) -> EnvSpec {
        self.env
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn n_agents(&self) -> usize {
        self.env.n_agents
    }

    pub fn action_dim(&self) -> usize {
        self.env.action_mode.dim()
    }

    /// Continuous actions: critics estimate `Q(s, a)`.
    pub fn is_q(&self) -> bool {
        !self.env.action_mode.is_discrete()
    }

    pub fn actors(&self) -> &[Mlp] {
        &self.actors
    }

    pub fn actors_mut(&mut self) -> &mut [Mlp] {
        &mut self.actors
    }

    pub fn critics(&self) -> Option<&[Mlp]> {
        self.critics.as_deref()
    }

    pub fn critics_mut(&mut self) -> Option<&mut [Mlp]> {
        self.critics.as_deref_mut()
    }

    pub fn channel(&self) -> Option<&Channel> {
        self.channel.as_ref()
    }

    pub fn channel_mut(&mut self) -> Option<&mut Channel> {
        self.channel.as_mut()
    }

    /// Number of channel forward evaluations so far (0 when there is no channel).
    pub fn channel_calls(&self) -> u64 {
        self.channel.as_ref().map_or(0, Channel::call_count)
    }

    /// Index of the critic net serving `agent`.
    pub fn critic_index(&self, agent: usize) -> usize {
        if self.arch.kind.shared_critic() || self.arch.kind.is_fc() {
            0
        } else {
            agent
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            actors: self.actors.iter().map(Mlp::num_params).sum(),
            critics: self.critics.iter().flatten().map(Mlp::num_params).sum(),
            channel: self.channel.as_ref().map_or(0, Channel::num_params),
            critic_sets: self.critics.as_ref().map_or(0, Vec::len),
        }
    }

    pub fn is_actors_only(&self) -> bool {
        self.critics.is_none()
    }

    /// Copy holding only what execution needs: actors, plus the channel for
    /// AC-CNet whose actors cannot run without it.
    pub fn actors_only(&self) -> Self {
        Self {
            arch: self.arch,
            env: self.env,
            hyper: self.hyper.clone(),
            actors: self.actors.clone(),
            critics: None,
            channel: if self.arch.kind.is_actor_channel() {
                self.channel.clone()
            } else {
                None
            },
        }
    }

    /// Reassembles a model from stored parts, re-checking every shape.
    pub fn from_parts(
        arch: Architecture,
        env: EnvSpec,
        hyper: ModelHyper,
        actors: Vec<Mlp>,
        critics: Option<Vec<Mlp>>,
        channel: Option<Channel>,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let template = Self::build(arch, env, &hyper, &mut SimRng::seed_from_u64(0))?;
        let specs = |v: &[Mlp]| v.iter().map(Mlp::specs).collect::<Vec<_>>();
        if specs(&actors) != specs(&template.actors) {
            return Err(Error::Checkpoint("actor shapes do not match the architecture".into()));
        }
        if let Some(c) = &critics {
            if specs(c) != specs(template.critics.as_deref().unwrap_or_default()) {
                return Err(Error::Checkpoint("critic shapes do not match the architecture".into()));
            }
        }
        match (&channel, &template.channel) {
            (Some(c), Some(t)) => {
                if c.dims() != t.dims() || specs(c.encoders()) != specs(t.encoders()) || c.coordinator().specs() != t.coordinator().specs() {
                    return Err(Error::Checkpoint("channel shapes do not match the architecture".into()));
                }
            }
            (Some(_), None) => return Err(Error::Checkpoint(format!("{} has no channel", arch.kind))),
            (None, Some(_)) if arch.kind.is_actor_channel() => {
                return Err(Error::MissingComponent("AC-CNet actors need the channel".into()))
            }
            (None, Some(_)) if critics.is_some() => {
                return Err(Error::Checkpoint("critics present without their channel".into()))
            }
            _ => {}
        }
        Ok(Self {
            arch: template.arch,
            env,
            hyper,
            actors,
            critics,
            channel,
        })
    }

    /// Re-runs the shape checks of [`Self::from_parts`] on a deserialized model.
    pub fn validated(self) -> Result<Self> {
        Self::from_parts(self.arch, self.env, self.hyper, self.actors, self.critics, self.channel)
    }

    fn critic_layout(&self) -> CriticLayout {
        let kind = self.arch.kind;
        CriticLayout {
            obs: self.env.obs_dim,
            action: if self.is_q() { self.action_dim() } else { 0 },
            signal: if kind.has_channel() { self.hyper.signal_dim } else { 0 },
            message: if self.arch.critic_design == Some(CriticDesign::SignalPlusLocal) {
                self.hyper.message_dim
            } else {
                0
            },
        }
    }

    fn payload_dim(&self) -> usize {
        if self.arch.kind.is_critic_channel() && self.is_q() {
            self.env.obs_dim + self.action_dim()
        } else {
            self.env.obs_dim
        }
    }

    fn check_states<S: AsRef<[f64]>>(&self, states: &[S]) -> Result<()> {
        if states.len() != self.env.n_agents {
            return shape_err(format!("{} agents but {} states", self.env.n_agents, states.len()));
        }
        if let Some(s) = states.iter().find(|s| s.as_ref().len() != self.env.obs_dim) {
            return shape_err(format!("state has {} entries, expected {}", s.as_ref().len(), self.env.obs_dim));
        }
        Ok(())
    }

    fn require_channel(&self) -> Result<&Channel> {
        self.channel
            .as_ref()
            .ok_or_else(|| Error::MissingComponent(format!("{} model has no channel loaded", self.arch.kind)))
    }

    fn require_critics(&self) -> Result<&[Mlp]> {
        self.critics
            .as_deref()
            .ok_or_else(|| Error::MissingComponent("critics are absent (actors-only model)".into()))
    }

    // ---- actors ----

    pub fn actor_pass<S: AsRef<[f64]>>(&self, states: &[S]) -> Result<ActorPass> {
        self.check_states(states)?;
        let n = self.env.n_agents;
        let a = self.action_dim();
        if self.arch.kind.is_fc() {
            let x: Vec<f64> = states.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
            let (logits, tape) = self.actors[0].forward(&x)?;
            let probs = softmax_blocks(&logits, a);
            return Ok(ActorPass {
                policies: probs.chunks(a).map(<[f64]>::to_vec).collect(),
                tapes: vec![tape],
                channel: None,
            });
        }
        let channel = if self.arch.kind.is_actor_channel() {
            let refs: Vec<&[f64]> = states.iter().map(AsRef::as_ref).collect();
            Some(self.require_channel()?.forward(&refs)?)
        } else {
            None
        };
        let mut policies = Vec::with_capacity(n);
        let mut tapes = Vec::with_capacity(n);
        for (i, s) in states.iter().enumerate() {
            let (p, tape) = match &channel {
                Some(pass) => {
                    let mut x = s.as_ref().to_vec();
                    x.extend_from_slice(&pass.signals[i].values);
                    self.actors[i].forward(&x)?
                }
                None => self.actors[i].forward(s.as_ref())?,
            };
            policies.push(p);
            tapes.push(tape);
        }
        Ok(ActorPass {
            policies,
            tapes,
            channel,
        })
    }

    /// Policy outputs without recording tapes.
    pub fn policy<S: AsRef<[f64]>>(&self, states: &[S]) -> Result<Vec<Vec<f64>>> {
        self.check_states(states)?;
        let a = self.action_dim();
        if self.arch.kind.is_fc() {
            let x: Vec<f64> = states.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
            let probs = softmax_blocks(&self.actors[0].predict(&x)?, a);
            return Ok(probs.chunks(a).map(<[f64]>::to_vec).collect());
        }
        if self.arch.kind.is_actor_channel() {
            let refs: Vec<&[f64]> = states.iter().map(AsRef::as_ref).collect();
            let pass = self.require_channel()?.forward(&refs)?;
            return states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut x = s.as_ref().to_vec();
                    x.extend_from_slice(&pass.signals[i].values);
                    self.actors[i].predict(&x)
                })
                .collect();
        }
        states.iter().zip(&self.actors).map(|(s, net)| net.predict(s.as_ref())).collect()
    }

    /// Reverse pass of `sum_i <policy_i, out_grads_i>` into actor parameters
    /// and, for AC-CNet when `acc.channel` is set, into the channel.
    pub fn actor_backward(&self, pass: &ActorPass, out_grads: &[Vec<f64>], acc: &mut ActorGrads) -> Result<()> {
        let n = self.env.n_agents;
        let a = self.action_dim();
        if out_grads.len() != n || out_grads.iter().any(|g| g.len() != a) {
            return shape_err("one policy gradient of action dimension per agent required");
        }
        if self.arch.kind.is_fc() {
            let y: Vec<f64> = pass.policies.iter().flatten().copied().collect();
            let g: Vec<f64> = out_grads.iter().flatten().copied().collect();
            let gz = softmax_blocks_backprop(&y, &g, a);
            self.actors[0].backward_into(&pass.tapes[0], &gz, Some(&mut acc.nets[0]))?;
            return Ok(());
        }
        let d = self.env.obs_dim;
        let mut signal_grads = Vec::new();
        for i in 0..n {
            let gin = self.actors[i].backward_into(&pass.tapes[i], &out_grads[i], Some(&mut acc.nets[i]))?;
            if pass.channel.is_some() {
                signal_grads.push(gin[d..].to_vec());
            }
        }
        if let (Some(cp), Some(cacc)) = (&pass.channel, acc.channel.as_mut()) {
            self.require_channel()?.backward(cp, &signal_grads, None, Some(cacc))?;
        }
        Ok(())
    }

    pub fn zero_actor_grads(&self, with_channel: bool) -> ActorGrads {
        ActorGrads {
            nets: self.actors.iter().map(ParamGrads::zeros_like).collect(),
            channel: if with_channel && self.arch.kind.is_actor_channel() {
                self.channel.as_ref().map(ChannelGrads::zeros_like)
            } else {
                None
            },
        }
    }

    pub fn act<S: AsRef<[f64]>>(&self, states: &[S], explore: Exploration, rng: &mut SimRng) -> Result<Vec<Action>> {
        let policies = self.policy(states)?;
        policies.iter().map(|p| self.choose(p, explore, rng)).collect()
    }

    fn choose(&self, p: &[f64], explore: Exploration, rng: &mut SimRng) -> Result<Action> {
        match (self.env.action_mode, explore) {
            (ActionMode::ContinuousSimplex { .. }, Exploration::Greedy) => Ok(Action::Simplex(p.to_vec())),
            (ActionMode::ContinuousSimplex { .. }, Exploration::Dirichlet { eps }) => {
                if !(0.0..=1.0).contains(&eps) {
                    return Err(Error::Config(format!("exploration mix must lie in [0, 1], got {eps}")));
                }
                if eps == 0.0 {
                    return Ok(Action::Simplex(p.to_vec()));
                }
                let noise = dirichlet_ones(p.len(), rng);
                Ok(Action::Simplex(
                    p.iter().zip(&noise).map(|(x, z)| (1.0 - eps) * x + eps * z).collect(),
                ))
            }
            (ActionMode::Discrete { .. }, Exploration::Greedy) => Ok(Action::Discrete(argmax(p))),
            (ActionMode::Discrete { .. }, Exploration::Sample { temperature }) => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
                }
                Ok(Action::Discrete(sample_tempered(p, temperature, rng)))
            }
            (mode, e) => Err(Error::Config(format!("exploration {e:?} does not apply to {mode:?}"))),
        }
    }

    // ---- critics ----

    /// Values of all agents under the model's own critics.
    pub fn evaluate_critics<S: AsRef<[f64]>>(&self, states: &[S], actions: Option<&[Action]>) -> Result<CriticPass> {
        let critics = self.require_critics()?;
        let feats: Option<Vec<Vec<f64>>> = actions.map(|acts| acts.iter().map(|a| a.features(self.env.action_mode)).collect());
        self.critic_pass_with(critics, self.channel.as_ref(), states, feats.as_deref())
    }

    /// Critic forward pass with explicit nets (own or target copies).
    pub fn critic_pass_with<S: AsRef<[f64]>>(
        &self,
        critics: &[Mlp],
        channel: Option<&Channel>,
        states: &[S],
        actions: Option<&[Vec<f64>]>,
    ) -> Result<CriticPass> {
        self.check_states(states)?;
        let n = self.env.n_agents;
        let a = self.action_dim();
        let acts = if self.is_q() {
            let acts = actions.ok_or_else(|| Error::Contract("Q critics need the joint action".into()))?;
            if acts.len() != n || acts.iter().any(|v| v.len() != a) {
                return shape_err("one action feature vector per agent required");
            }
            Some(acts)
        } else {
            None
        };
        let kind = self.arch.kind;
        if kind.is_fc() {
            let mut x: Vec<f64> = states.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
            if let Some(acts) = acts {
                x.extend(acts.iter().flatten());
            }
            let (out, tape) = critics[0].forward(&x)?;
            let values = if kind.shared_critic() { vec![out[0]; n] } else { out };
            return Ok(CriticPass {
                values,
                tapes: vec![tape],
                channel: None,
            });
        }
        let chan = if kind.has_channel() {
            let ch = channel.ok_or_else(|| Error::MissingComponent("critics need the channel".into()))?;
            let payloads: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut p = states[i].as_ref().to_vec();
                    if kind.is_critic_channel() {
                        if let Some(acts) = acts {
                            p.extend_from_slice(&acts[i]);
                        }
                    }
                    p
                })
                .collect();
            let refs: Vec<&[f64]> = payloads.iter().map(Vec::as_slice).collect();
            Some(ch.forward(&refs)?)
        } else {
            None
        };
        let layout = self.critic_layout();
        let mut values = Vec::with_capacity(n);
        let mut tapes = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = Vec::with_capacity(layout.total());
            x.extend_from_slice(states[i].as_ref());
            if let Some(acts) = acts {
                x.extend_from_slice(&acts[i]);
            }
            if let Some(pass) = &chan {
                x.extend_from_slice(&pass.signals[i].values);
                if layout.message > 0 {
                    x.extend_from_slice(&pass.messages[i].values);
                }
            }
            let (v, tape) = critics[self.critic_index(i)].forward(&x)?;
            values.push(v[0]);
            tapes.push(tape);
        }
        Ok(CriticPass {
            values,
            tapes,
            channel: chan,
        })
    }

    pub fn zero_critic_grads(&self, critics: &[Mlp], with_channel: bool) -> CriticGrads {
        CriticGrads {
            nets: critics.iter().map(ParamGrads::zeros_like).collect(),
            channel: if with_channel {
                self.channel.as_ref().map(ChannelGrads::zeros_like)
            } else {
                None
            },
        }
    }

    /// Reverse pass of `sum_i value_grads_i * value_i` into critic parameters
    /// and, when `acc.channel` is set, through the channel.
    pub fn critic_backward_with(
        &self,
        critics: &[Mlp],
        channel: Option<&Channel>,
        pass: &CriticPass,
        value_grads: &[f64],
        acc: &mut CriticGrads,
    ) -> Result<()> {
        let n = self.env.n_agents;
        if value_grads.len() != n {
            return shape_err("one value gradient per agent required");
        }
        let kind = self.arch.kind;
        if kind.is_fc() {
            let g = if kind.shared_critic() {
                vec![value_grads.iter().sum()]
            } else {
                value_grads.to_vec()
            };
            critics[0].backward_into(&pass.tapes[0], &g, Some(&mut acc.nets[0]))?;
            return Ok(());
        }
        let layout = self.critic_layout();
        let sig0 = layout.obs + layout.action;
        let msg0 = sig0 + layout.signal;
        let mut signal_grads = Vec::new();
        let mut message_grads = Vec::new();
        for i in 0..n {
            let k = self.critic_index(i);
            let gin = critics[k].backward_into(&pass.tapes[i], &[value_grads[i]], Some(&mut acc.nets[k]))?;
            if pass.channel.is_some() {
                signal_grads.push(gin[sig0..msg0].to_vec());
                message_grads.push(gin[msg0..].to_vec());
            }
        }
        if let (Some(cp), Some(cacc)) = (&pass.channel, acc.channel.as_mut()) {
            let ch = channel.ok_or_else(|| Error::MissingComponent("critics need the channel".into()))?;
            let mg = (layout.message > 0).then_some(message_grads.as_slice());
            ch.backward(cp, &signal_grads, mg, Some(cacc))?;
        }
        Ok(())
    }

    /// `dQ_i / da_i` for every agent (FC: gradient of the summed heads with
    /// respect to each agent's block of the joint action). Includes the paths
    /// through the channel in A-CCNet.
    pub fn critic_action_grads(&self, critics: &[Mlp], channel: Option<&Channel>, pass: &CriticPass) -> Result<Vec<Vec<f64>>> {
        if !self.is_q() {
            return Err(Error::Contract("action gradients need Q critics".into()));
        }
        let n = self.env.n_agents;
        let a = self.action_dim();
        let d = self.env.obs_dim;
        let kind = self.arch.kind;
        if kind.is_fc() {
            let g = vec![1.0; critics[0].out_dim()];
            let gin = critics[0].backward_into(&pass.tapes[0], &g, None)?;
            return Ok(gin[n * d..].chunks(a).map(<[f64]>::to_vec).collect());
        }
        let layout = self.critic_layout();
        let sig0 = layout.obs + layout.action;
        let msg0 = sig0 + layout.signal;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let gin = critics[self.critic_index(i)].backward_into(&pass.tapes[i], &[1.0], None)?;
            let mut ga = gin[d..d + a].to_vec();
            if kind.is_critic_channel() {
                let cp = pass.channel.as_ref().ok_or_else(|| Error::Contract("missing channel tape".into()))?;
                let ch = channel.ok_or_else(|| Error::MissingComponent("critics need the channel".into()))?;
                let mut sg = vec![vec![0.0; layout.signal]; n];
                sg[i] = gin[sig0..msg0].to_vec();
                let mg = (layout.message > 0).then(|| &gin[msg0..]);
                let gp = ch.payload_grad(cp, i, &sg, mg)?;
                for (x, y) in ga.iter_mut().zip(&gp[d..]) {
                    *x += y;
                }
            }
            out.push(ga);
        }
        Ok(out)
    }

    /// Payloads the channel would see for the given joint step (message logging).
    pub fn channel_payloads<S: AsRef<[f64]>>(&self, states: &[S], actions: &[Action]) -> Vec<Vec<f64>> {
        states
            .iter()
            .zip(actions)
            .map(|(s, a)| {
                let mut p = s.as_ref().to_vec();
                if self.arch.kind.is_critic_channel() && self.is_q() {
                    p.extend(a.features(self.env.action_mode));
                }
                p
            })
            .collect()
    }
}

/// Uniform point on the simplex.
pub fn dirichlet_ones(k: usize, rng: &mut SimRng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    if s > 0.0 {
        e.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Draws from `p^(1/T)` renormalized.
pub fn sample_tempered(p: &[f64], temperature: f64, rng: &mut SimRng) -> usize {
    let w: Vec<f64> = if temperature == 1.0 {
        p.to_vec()
    } else {
        let logs: Vec<f64> = p.iter().map(|&x| x.max(1e-300).ln() / temperature).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logs.iter().map(|l| (l - m).exp()).collect()
    };
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}
