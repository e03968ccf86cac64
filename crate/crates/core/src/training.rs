//! Update rules and the per-episode training loop.
//!
//! Discrete environments train a `V` critic by TD(0) and a stochastic actor by
//! `delta * grad log pi`. Continuous environments train a `Q` critic against
//! slowly tracking target copies and a deterministic actor along `dQ/da`.

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, ChannelGrads};
use crate::env::{Action, MultiAgentEnv, StepInfo};
use crate::error::{Error, Result};
use crate::models::{ActorGrads, CriticGrads, Exploration, MultiAgentModel};
use crate::nn::{clip_global_norm, Mlp, Optimizer, ParamGrads, UpdateMode};
use crate::replay::{JointBuffer, JointExperience, ReplayMode};
use crate::SimRng;

/// Probabilities below this are clamped before taking the log.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// `r + gamma * v_next * (1 - done) - v_now`
pub fn td_error_v(r: f64, gamma: f64, v_next: f64, v_now: f64, done: bool) -> f64 {
    let boot = if done { 0.0 } else { gamma * v_next };
    r + boot - v_now
}

/// Returns `(delta, y)` with `y = r + gamma * q_next * (1 - done)`.
pub fn td_error_q(r: f64, gamma: f64, q_next: f64, q_now: f64, done: bool) -> (f64, f64) {
    let y = if done { r } else { r + gamma * q_next };
    (y - q_now, y)
}

/// One step of `theta += lr * delta * grad log pi(a | s)` on a softmax-headed actor.
/// Returns `true` when `pi(a | s)` had to be clamped.
pub fn actor_update_stochastic(actor: &mut Mlp, opt: &mut Optimizer, s: &[f64], a: usize, delta: f64, lr: f64) -> Result<bool> {
    let (p, tape) = actor.forward(s)?;
    if a >= p.len() {
        return Err(Error::Contract(format!("action {a} outside the {}-way policy", p.len())));
    }
    let clamped = p[a] < LOG_PROB_FLOOR;
    let mut g = vec![0.0; p.len()];
    g[a] = delta / p[a].max(LOG_PROB_FLOOR);
    let rec = actor.backward(&tape, &g)?;
    opt.step(actor, &rec.params, lr)?;
    Ok(clamped)
}

/// One step of `theta += lr * dQ/da * dpi/dtheta` with `a = pi(s)` evaluated
/// fresh; `dq_da` supplies the critic's action gradient at that action.
pub fn actor_update_deterministic<F>(actor: &mut Mlp, opt: &mut Optimizer, s: &[f64], lr: f64, dq_da: F) -> Result<()>
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let (a, tape) = actor.forward(s)?;
    let g = dq_da(&a)?;
    let rec = actor.backward(&tape, &g)?;
    opt.step(actor, &rec.params, lr)
}

/// `dQ/da` of a critic reading `s ++ a`.
pub fn mlp_action_grad(critic: &Mlp, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let mut x = s.to_vec();
    x.extend_from_slice(a);
    let (_, tape) = critic.forward(&x)?;
    let gin = critic.backward_into(&tape, &[1.0], None)?;
    Ok(gin[s.len()..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing fields take the routing defaults.
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub optimizer: OptimizerKind,
    /// Soft target update rate (continuous actions only).
    pub target_tau: f64,
    /// Global gradient norm cap; `0` disables clipping.
    pub grad_clip: f64,
    /// Buffer entries required before replay updates start.
    pub warmup: usize,
    pub updates_per_step: usize,
    /// Dirichlet mix at the first episode, annealed linearly to `explore_end`.
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_decay_episodes: usize,
    /// Sampling temperature of discrete policies during training.
    pub temperature: f64,
    /// AC-CNet: let critic gradients reach the shared channel as well.
    pub ac_critic_to_channel: bool,
    /// CEER: also update after every step, not only at episode end.
    pub ceer_per_step: bool,
    /// CEER: updates at episode end (`0` means one per episode step).
    pub ceer_updates: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self::routing()
    }
}

impl Hyper {
    pub fn routing() -> Self {
        Self {
            gamma: 0.9,
            actor_lr: 1e-3,
            critic_lr: 1e-2,
            batch_size: 32,
            episodes: 2000,
            optimizer: OptimizerKind::Adam,
            target_tau: 0.01,
            grad_clip: 1.0,
            warmup: 64,
            updates_per_step: 1,
            explore_start: 0.5,
            explore_end: 0.02,
            explore_decay_episodes: 500,
            temperature: 1.0,
            ac_critic_to_channel: true,
            ceer_per_step: false,
            ceer_updates: 0,
        }
    }

    pub fn junction() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 1,
            episodes: 300,
            warmup: 1,
            ..Self::routing()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.updates_per_step == 0 {
            return bad("batch_size and updates_per_step must be positive");
        }
        if !(self.target_tau > 0.0 && self.target_tau <= 1.0) {
            return bad("target_tau must lie in (0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if !((0.0..=1.0).contains(&self.explore_start) && (0.0..=1.0).contains(&self.explore_end)) {
            return bad("exploration mix must lie in [0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    fn actor_mode(&self) -> UpdateMode {
        match self.optimizer {
            OptimizerKind::Adam => UpdateMode::AdamAscent,
            OptimizerKind::Sgd => UpdateMode::SgdAscent,
        }
    }

    fn critic_mode(&self) -> UpdateMode {
        match self.optimizer {
            OptimizerKind::Adam => UpdateMode::AdamDescent,
            OptimizerKind::Sgd => UpdateMode::SgdDescent,
        }
    }
}

#[derive(Debug, Clone)]
struct Targets {
    critics: Vec<Mlp>,
    channel: Option<Channel>,
}

/// A model together with its optimizer state and (for `Q` critics) target copies.
#[derive(Debug, Clone)]
pub struct Learner {
    model: MultiAgentModel,
    hyper: Hyper,
    targets: Option<Targets>,
    opt_actors: Vec<Optimizer>,
    opt_critics: Vec<Optimizer>,
    opt_channel: Vec<Optimizer>,
    clamped: u64,
}

impl Learner {
    pub fn new(model: MultiAgentModel, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        let critics = model
            .critics()
            .ok_or_else(|| Error::MissingComponent("training needs critics".into()))?;
        let targets = model.is_q().then(|| Targets {
            critics: critics.to_vec(),
            channel: model.channel().cloned(),
        });
        let opt_actors = model.actors().iter().map(|_| Optimizer::new(hyper.actor_mode())).collect();
        let opt_critics = critics.iter().map(|_| Optimizer::new(hyper.critic_mode())).collect();
        let opt_channel = model
            .channel()
            .map(|c| (0..=c.encoders().len()).map(|_| Optimizer::new(hyper.critic_mode())).collect())
            .unwrap_or_default();
        Ok(Self {
            model,
            hyper,
            targets,
            opt_actors,
            opt_critics,
            opt_channel,
            clamped: 0,
        })
    }

    pub fn model(&self) -> &MultiAgentModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut MultiAgentModel {
        &mut self.model
    }

    pub fn into_model(self) -> MultiAgentModel {
        self.model
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    /// Log-probabilities clamped so far.
    pub fn clamped_log_probs(&self) -> u64 {
        self.clamped
    }

    pub fn exploration(&self, episode: u64) -> Exploration {
        if self.model.is_q() {
            let h = &self.hyper;
            let frac = if h.explore_decay_episodes == 0 {
                1.0
            } else {
                (episode as f64 / h.explore_decay_episodes as f64).min(1.0)
            };
            Exploration::Dirichlet {
                eps: h.explore_start + (h.explore_end - h.explore_start) * frac,
            }
        } else {
            Exploration::Sample {
                temperature: self.hyper.temperature,
            }
        }
    }

    fn critic_channel_trainable(&self) -> bool {
        let kind = self.model.kind();
        kind.is_critic_channel() || (kind.is_actor_channel() && self.hyper.ac_critic_to_channel)
    }

    /// Gradient of `(1/B) sum_b sum_i delta_bi^2 / 2` with respect to the critics
    /// (and the channel where critic gradients reach it), plus every `delta_bi`.
    pub fn critic_grads(&self, batch: &[&JointExperience]) -> Result<(CriticGrads, Vec<Vec<f64>>)> {
        let m = &self.model;
        let critics = m.critics().ok_or_else(|| Error::MissingComponent("training needs critics".into()))?;
        let mut acc = m.zero_critic_grads(critics, self.critic_channel_trainable());
        let mut deltas = Vec::with_capacity(batch.len());
        let mode = m.env_spec().action_mode;
        for e in batch {
            if e.agents.len() != m.n_agents() || !e.is_aligned() {
                return Err(Error::Contract("batch item is not a timestep-aligned joint experience".into()));
            }
            let s = e.states();
            let s2 = e.next_states();
            let (pass, d) = if m.is_q() {
                let t = self.targets.as_ref().expect("Q learners keep targets");
                let a: Vec<Vec<f64>> = e.actions().iter().map(|a| a.features(mode)).collect();
                let a2 = m.policy(&s2)?;
                let q_next = m.critic_pass_with(&t.critics, t.channel.as_ref(), &s2, Some(&a2))?.values;
                let pass = m.critic_pass_with(critics, m.channel(), &s, Some(&a))?;
                let d: Vec<f64> = (0..m.n_agents())
                    .map(|i| td_error_q(e.reward, self.hyper.gamma, q_next[i], pass.values[i], e.done).0)
                    .collect();
                (pass, d)
            } else {
                let v_next = m.critic_pass_with(critics, m.channel(), &s2, None)?.values;
                let pass = m.critic_pass_with(critics, m.channel(), &s, None)?;
                let d: Vec<f64> = (0..m.n_agents())
                    .map(|i| td_error_v(e.reward, self.hyper.gamma, v_next[i], pass.values[i], e.done))
                    .collect();
                (pass, d)
            };
            let vg: Vec<f64> = d.iter().map(|x| -x).collect();
            m.critic_backward_with(critics, m.channel(), &pass, &vg, &mut acc)?;
            deltas.push(d);
        }
        acc.scale(1.0 / batch.len().max(1) as f64);
        Ok((acc, deltas))
    }

    /// Gradient of `(1/B) sum_b sum_i Q_i(s_b, pi(s_b))` along each agent's own
    /// action, with respect to the actors (and the AC-CNet channel).
    pub fn actor_grads_q(&self, batch: &[&JointExperience]) -> Result<ActorGrads> {
        let m = &self.model;
        let critics = m.critics().ok_or_else(|| Error::MissingComponent("training needs critics".into()))?;
        let mut acc = m.zero_actor_grads(true);
        for e in batch {
            let s = e.states();
            let ap = m.actor_pass(&s)?;
            let cp = m.critic_pass_with(critics, m.channel(), &s, Some(&ap.policies))?;
            let g = m.critic_action_grads(critics, m.channel(), &cp)?;
            m.actor_backward(&ap, &g, &mut acc)?;
        }
        acc.scale(1.0 / batch.len().max(1) as f64);
        Ok(acc)
    }

    /// Gradient of `(1/B) sum_b sum_i delta_bi * log pi_i(a_bi | .)`.
    /// Returns the number of clamped probabilities alongside.
    pub fn actor_grads_v(&self, batch: &[&JointExperience], deltas: &[Vec<f64>]) -> Result<(ActorGrads, u64)> {
        let m = &self.model;
        let mut acc = m.zero_actor_grads(true);
        let mut clamped = 0;
        for (e, d) in batch.iter().zip(deltas) {
            let ap = m.actor_pass(&e.states())?;
            let mut g = vec![vec![0.0; m.action_dim()]; m.n_agents()];
            for (i, act) in e.actions().iter().enumerate() {
                let a = act
                    .as_discrete()
                    .ok_or_else(|| Error::Contract("stochastic actor update needs discrete actions".into()))?;
                let p = ap.policies[i][a];
                if p < LOG_PROB_FLOOR {
                    clamped += 1;
                }
                g[i][a] = d[i] / p.max(LOG_PROB_FLOOR);
            }
            m.actor_backward(&ap, &g, &mut acc)?;
        }
        acc.scale(1.0 / batch.len().max(1) as f64);
        Ok((acc, clamped))
    }

    fn clip(&self, nets: &mut [ParamGrads], channel: Option<&mut ChannelGrads>) {
        if self.hyper.grad_clip > 0.0 {
            let mut parts: Vec<&mut ParamGrads> = nets.iter_mut().collect();
            if let Some(c) = channel {
                parts.extend(c.parts_mut());
            }
            clip_global_norm(&mut parts, self.hyper.grad_clip);
        }
    }

    fn step_channel(&mut self, grads: &ChannelGrads, lr: f64) -> Result<()> {
        let ch = self.model.channel_mut().expect("channel grads imply a channel");
        let n = ch.encoders().len();
        for (k, g) in grads.encoders.iter().enumerate() {
            self.opt_channel[k].step(&mut ch.encoders_mut()[k], g, lr)?;
        }
        self.opt_channel[n].step(ch.coordinator_mut(), &grads.coordinator, lr)
    }

    /// Descends the critic loss; touches critics and, where configured, the channel.
    pub fn apply_critic_grads(&mut self, mut grads: CriticGrads) -> Result<()> {
        self.clip(&mut grads.nets, grads.channel.as_mut());
        let lr = self.hyper.critic_lr;
        let critics = self.model.critics_mut().expect("checked at construction");
        for ((net, opt), g) in critics.iter_mut().zip(&mut self.opt_critics).zip(&grads.nets) {
            opt.step(net, g, lr)?;
        }
        if let Some(cg) = &grads.channel {
            self.step_channel(cg, lr)?;
        }
        Ok(())
    }

    /// Ascends the actor objective; touches actors and, for AC-CNet, the channel.
    pub fn apply_actor_grads(&mut self, mut grads: ActorGrads) -> Result<()> {
        self.clip(&mut grads.nets, grads.channel.as_mut());
        let lr = self.hyper.actor_lr;
        for ((net, opt), g) in self.model.actors_mut().iter_mut().zip(&mut self.opt_actors).zip(&grads.nets) {
            opt.step(net, g, lr)?;
        }
        if let Some(mut cg) = grads.channel {
            // channel optimizers descend, so flip the ascent direction
            cg.scale(-1.0);
            self.step_channel(&cg, lr)?;
        }
        Ok(())
    }

    pub fn critic_step(&mut self, batch: &[&JointExperience]) -> Result<Vec<Vec<f64>>> {
        let (g, d) = self.critic_grads(batch)?;
        self.apply_critic_grads(g)?;
        Ok(d)
    }

    fn soft_update_targets(&mut self) -> Result<()> {
        let tau = self.hyper.target_tau;
        if let Some(t) = self.targets.as_mut() {
            let critics = self.model.critics().expect("checked at construction");
            for (dst, src) in t.critics.iter_mut().zip(critics) {
                dst.soft_update_from(src, tau)?;
            }
            if let (Some(dst), Some(src)) = (t.channel.as_mut(), self.model.channel()) {
                dst.soft_update_from(src, tau)?;
            }
        }
        Ok(())
    }

    /// One critic and one actor update on `batch`; returns mean `|delta|`.
    pub fn update(&mut self, batch: &[&JointExperience]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let deltas = if self.model.is_q() {
            let d = self.critic_step(batch)?;
            let ag = self.actor_grads_q(batch)?;
            self.apply_actor_grads(ag)?;
            self.soft_update_targets()?;
            d
        } else {
            // both steps use the pre-update TD errors
            let (cg, d) = self.critic_grads(batch)?;
            let (ag, clamped) = self.actor_grads_v(batch, &d)?;
            self.clamped += clamped;
            self.apply_critic_grads(cg)?;
            self.apply_actor_grads(ag)?;
            d
        };
        let n: usize = deltas.iter().map(Vec::len).sum();
        Ok(deltas.iter().flatten().map(|x| x.abs()).sum::<f64>() / n.max(1) as f64)
    }
}

/// One row of the message log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRow {
    pub episode: u64,
    pub t: usize,
    pub agent: usize,
    pub kind: MessageKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Message,
    Signal,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Message => "message",
            MessageKind::Signal => "signal",
        }
    }
}

/// Evaluates the channel on one joint step and appends message and signal rows.
pub fn log_channel(model: &MultiAgentModel, episode: u64, t: usize, states: &[Vec<f64>], actions: &[Action], out: &mut Vec<MessageRow>) -> Result<()> {
    let Some(ch) = model.channel() else {
        return Ok(());
    };
    let payloads = model.channel_payloads(states, actions);
    let refs: Vec<&[f64]> = payloads.iter().map(Vec::as_slice).collect();
    let pass = ch.forward(&refs)?;
    for (m, s) in pass.messages.iter().zip(&pass.signals) {
        out.push(MessageRow {
            episode,
            t,
            agent: m.agent_id,
            kind: MessageKind::Message,
            values: m.values.clone(),
        });
        out.push(MessageRow {
            episode,
            t,
            agent: s.agent_id,
            kind: MessageKind::Signal,
            values: s.values.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: u64,
    /// Undiscounted sum of rewards.
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: usize,
    pub updates: usize,
    pub mean_abs_td: f64,
    /// Dirichlet mix or sampling temperature used for this episode.
    pub explore: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_max_utilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_max_utilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collisions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<bool>,
    /// Series value used for convergence detection (set by the harness).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Resets `env`, then runs act, step, store and update until the episode ends.
/// When `log` is given, the channel is evaluated on every step and logged.
pub fn train_episode(
    learner: &mut Learner,
    env: &mut dyn MultiAgentEnv,
    buffer: &mut JointBuffer,
    episode: u64,
    rng: &mut SimRng,
    mut log: Option<&mut Vec<MessageRow>>,
) -> Result<EpisodeStats> {
    let explore = learner.exploration(episode);
    let mut obs = env.reset(rng);
    let mut stats = EpisodeStats {
        episode,
        ret: 0.0,
        steps: 0,
        updates: 0,
        mean_abs_td: 0.0,
        explore: match explore {
            Exploration::Dirichlet { eps } => eps,
            Exploration::Sample { temperature } => temperature,
            Exploration::Greedy => 0.0,
        },
        mean_max_utilization: None,
        oracle_max_utilization: None,
        collisions: None,
        failed: None,
        score: None,
    };
    let mut td_sum = 0.0;
    let mut util_sum = 0.0;
    let hyper = learner.hyper().clone();
    for t in 0..env.horizon() {
        let actions = learner.model().act(&obs, explore, rng)?;
        let out = env.step(&actions)?;
        stats.ret += out.reward;
        stats.steps += 1;
        match &out.info {
            StepInfo::Routing { max_utilization, .. } => util_sum += max_utilization,
            StepInfo::Junction { collisions, failed } => {
                *stats.collisions.get_or_insert(0) += collisions;
                stats.failed = Some(*failed);
            }
        }
        if let Some(rows) = log.as_deref_mut() {
            log_channel(learner.model(), episode, t, &obs, &actions, rows)?;
        }
        let exp = JointExperience::new(
            episode,
            t,
            std::mem::take(&mut obs),
            actions,
            out.reward,
            out.observations.clone(),
            out.done,
        )?;
        buffer.push_joint(exp)?;
        match buffer.mode() {
            ReplayMode::None => {
                let batch = vec![buffer.latest().expect("just pushed")];
                td_sum += learner.update(&batch)?;
                stats.updates += 1;
            }
            ReplayMode::Cer => {
                if buffer.len() >= hyper.warmup.max(1) {
                    for _ in 0..hyper.updates_per_step {
                        let batch = buffer.sample_cer(hyper.batch_size, rng)?;
                        td_sum += learner.update(&batch)?;
                        stats.updates += 1;
                    }
                }
            }
            ReplayMode::Ceer { mix } => {
                if hyper.ceer_per_step && buffer.len() + buffer.scratch_len() >= hyper.warmup.max(1) {
                    for _ in 0..hyper.updates_per_step {
                        let batch = buffer.sample_ceer(hyper.batch_size, mix, rng)?;
                        td_sum += learner.update(&batch)?;
                        stats.updates += 1;
                    }
                }
            }
        }
        obs = out.observations;
        if out.done {
            break;
        }
    }
    if let ReplayMode::Ceer { mix } = buffer.mode() {
        if buffer.scratch_len() > 0 {
            let n = if hyper.ceer_updates == 0 { stats.steps } else { hyper.ceer_updates };
            for _ in 0..n {
                let batch = buffer.sample_ceer(hyper.batch_size, mix, rng)?;
                td_sum += learner.update(&batch)?;
                stats.updates += 1;
            }
        }
        buffer.end_episode();
    }
    if stats.updates > 0 {
        stats.mean_abs_td = td_sum / stats.updates as f64;
    }
    if !learner.model().env_spec().action_mode.is_discrete() && stats.steps > 0 {
        stats.mean_max_utilization = Some(util_sum / stats.steps as f64);
    }
    Ok(stats)
}
