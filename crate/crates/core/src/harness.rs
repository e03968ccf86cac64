//! Seeded experiment runs: training, convergence detection, frozen-policy
//! evaluation, aggregation and per-run artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{EnvConfig, ExperimentConfig};
use crate::env::{Action, MultiAgentEnv, StepInfo};
use crate::error::{Error, Result};
use crate::junction::JunctionEnv;
use crate::models::{ArchitectureKind, EnvSpec, Exploration, MultiAgentModel};
use crate::replay::JointBuffer;
use crate::routing::{min_max_lp, RoutingEnv, Topology};
use crate::training::{log_channel, train_episode, EpisodeStats, Learner, MessageKind, MessageRow};
use crate::{par, pca, SimRng};

/// Evaluation draws come from a stream separate from training.
const EVAL_STREAM: u64 = 0x5EED_E7A1_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    /// Routing: mean over episodes of the per-step mean max-U.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_max_utilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_max_utilization: Option<f64>,
    /// Routing: mean utilization of each bottleneck link over all steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_utilization: Option<Vec<f64>>,
    /// Junction: episodes with at least one collision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failures: Option<usize>,
    /// Channel evaluations triggered by `act()` during evaluation.
    pub act_channel_calls: u64,
}

impl EvalSummary {
    pub fn oracle_gap(&self) -> Option<f64> {
        Some(self.mean_max_utilization? - self.oracle_max_utilization?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub architecture: ArchitectureKind,
    pub env: String,
    pub episode_returns: Vec<f64>,
    /// Series the convergence test reads (see [`ExperimentConfig::convergence_threshold`]).
    pub scores: Vec<f64>,
    pub converged: bool,
    /// Number of episodes completed when the window first met the threshold.
    pub convergence_episode: Option<usize>,
    pub eval: Option<EvalSummary>,
    /// Set when an error aborted the run; such runs count as not converged.
    pub failure_reason: Option<String>,
    pub message_log_path: Option<PathBuf>,
}

impl RunRecord {
    /// Per-bottleneck utilization after training, for routing runs.
    pub fn post_convergence_mlu(&self) -> Option<&[f64]> {
        self.eval.as_ref()?.bottleneck_utilization.as_deref()
    }
}

/// First episode count `e >= window` whose trailing window mean reaches `threshold`.
pub fn detect_convergence(series: &[f64], window: usize, threshold: f64) -> Option<usize> {
    let window = window.max(1);
    (window..=series.len()).find(|&e| window_mean(&series[e - window..e]) >= threshold)
}

fn window_mean(w: &[f64]) -> f64 {
    w.iter().sum::<f64>() / w.len() as f64
}

enum EnvInstance {
    Routing { env: RoutingEnv, topo: Topology },
    Junction(JunctionEnv),
}

impl EnvInstance {
    fn new(cfg: &EnvConfig) -> Result<Self> {
        match cfg {
            EnvConfig::Routing { horizon, .. } => {
                let topo = cfg.topology()?.expect("routing topology");
                Ok(EnvInstance::Routing {
                    env: RoutingEnv::new(topo.clone(), *horizon)?,
                    topo,
                })
            }
            EnvConfig::Junction { .. } => Ok(EnvInstance::Junction(JunctionEnv::new(cfg.junction().expect("junction"))?)),
        }
    }

    fn env(&mut self) -> &mut dyn MultiAgentEnv {
        match self {
            EnvInstance::Routing { env, .. } => env,
            EnvInstance::Junction(env) => env,
        }
    }

    fn spec(&mut self) -> EnvSpec {
        let e = self.env();
        EnvSpec {
            n_agents: e.n_agents(),
            obs_dim: e.obs_dim(),
            action_mode: e.action_mode(),
        }
    }

    /// Optimal max-U for the current episode's demands.
    fn oracle(&self) -> Result<Option<f64>> {
        match self {
            EnvInstance::Routing { env, topo } => Ok(Some(min_max_lp(topo, env.demands())?.max_utilization)),
            EnvInstance::Junction(_) => Ok(None),
        }
    }
}

/// Attaches the convergence score to an episode: routing uses `oracle - mean max-U`
/// (the gap to the best achievable reward), the junction the mean per-step reward.
fn score_episode(stats: &mut EpisodeStats, oracle: Option<f64>) -> f64 {
    let score = match (oracle, stats.mean_max_utilization) {
        (Some(o), Some(u)) => {
            stats.oracle_max_utilization = Some(o);
            o - u
        }
        _ => stats.ret / stats.steps.max(1) as f64,
    };
    stats.score = Some(score);
    score
}

pub struct TrainOutcome {
    pub model: MultiAgentModel,
    pub history: Vec<EpisodeStats>,
    pub messages: Vec<MessageRow>,
    pub convergence_episode: Option<usize>,
}

/// Trains one model from `seed`; stops early at convergence when configured.
pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let mut inst = EnvInstance::new(&cfg.env)?;
    let spec = inst.spec();
    let mut rng = SimRng::seed_from_u64(seed);
    let model = MultiAgentModel::build(cfg.architecture(), spec, &cfg.model, &mut rng)?;
    let mut learner = Learner::new(model, cfg.hyper.clone())?;
    let mut buffer = JointBuffer::new(cfg.replay_mode(), spec.n_agents, cfg.replay.capacity)?;
    let (window, threshold) = (cfg.convergence.window, cfg.convergence_threshold());
    let mut history = Vec::with_capacity(cfg.hyper.episodes);
    let mut scores = Vec::with_capacity(cfg.hyper.episodes);
    let mut messages = Vec::new();
    let mut convergence_episode = None;
    for e in 0..cfg.hyper.episodes as u64 {
        let log = cfg.logging.message_log_episodes.contains(&e).then_some(&mut messages);
        let mut stats = train_episode(&mut learner, inst.env(), &mut buffer, e, &mut rng, log)?;
        scores.push(score_episode(&mut stats, inst.oracle()?));
        history.push(stats);
        if convergence_episode.is_none() && scores.len() >= window && window_mean(&scores[scores.len() - window..]) >= threshold {
            convergence_episode = Some(scores.len());
            if cfg.convergence.stop_on_convergence {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: learner.into_model(),
        history,
        messages,
        convergence_episode,
    })
}

pub struct EvalOutcome {
    pub summary: EvalSummary,
    /// Joint actions of every step, when requested.
    pub actions: Option<Vec<Vec<Action>>>,
    pub messages: Vec<MessageRow>,
}

/// What one evaluation episode contributes to the summary.
struct EvalEpisode {
    ret: f64,
    /// `(mean max-U, oracle max-U)` for routing.
    routing: Option<(f64, f64)>,
    link_sums: Vec<f64>,
    link_steps: usize,
    failed: bool,
    act_calls: u64,
    actions: Vec<Vec<Action>>,
    messages: Vec<MessageRow>,
}

fn eval_episode(model: &MultiAgentModel, cfg: &ExperimentConfig, seed: u64, episode: u64, explore: Exploration, log: bool, record: bool) -> Result<EvalEpisode> {
    // every episode owns its environment, random stream and model copy, so
    // episodes can run in any order and the channel-call count stays local
    let model = model.clone();
    let mut inst = EnvInstance::new(&cfg.env)?;
    let mut rng = SimRng::seed_from_u64(seed ^ EVAL_STREAM);
    rng.set_stream(episode);
    let mut obs = inst.env().reset(&mut rng);
    let oracle = inst.oracle()?;
    let mut ep = EvalEpisode {
        ret: 0.0,
        routing: None,
        link_sums: Vec::new(),
        link_steps: 0,
        failed: false,
        act_calls: 0,
        actions: Vec::new(),
        messages: Vec::new(),
    };
    let (mut util, mut steps) = (0.0, 0usize);
    for t in 0..inst.env().horizon() {
        let before = model.channel_calls();
        let acts = model.act(&obs, explore, &mut rng)?;
        ep.act_calls += model.channel_calls() - before;
        if log {
            log_channel(&model, episode, t, &obs, &acts, &mut ep.messages)?;
        }
        let out = inst.env().step(&acts)?;
        if record {
            ep.actions.push(acts);
        }
        ep.ret += out.reward;
        steps += 1;
        match &out.info {
            StepInfo::Routing {
                utilization,
                max_utilization,
            } => {
                util += max_utilization;
                if let EnvInstance::Routing { topo, .. } = &inst {
                    ep.link_sums.resize(topo.bottlenecks.len(), 0.0);
                    for (s, &l) in ep.link_sums.iter_mut().zip(&topo.bottlenecks) {
                        *s += utilization[l];
                    }
                    ep.link_steps += 1;
                }
            }
            StepInfo::Junction { failed, .. } => ep.failed |= failed,
        }
        obs = out.observations;
        if out.done {
            break;
        }
    }
    ep.routing = oracle.map(|o| (util / steps.max(1) as f64, o));
    Ok(ep)
}

/// Runs the frozen policy without exploration. Discrete policies sample at
/// `eval.temperature` (arg-max when it is zero). `first_episode` only numbers
/// logged message rows.
pub fn evaluate(model: &MultiAgentModel, cfg: &ExperimentConfig, seed: u64, first_episode: u64, record_actions: bool) -> Result<EvalOutcome> {
    let mut inst = EnvInstance::new(&cfg.env)?;
    if inst.spec() != model.env_spec() {
        return Err(Error::Shape("model does not fit the configured environment".into()));
    }
    let explore = if model.env_spec().action_mode.is_discrete() && cfg.eval.temperature > 0.0 {
        Exploration::Sample {
            temperature: cfg.eval.temperature,
        }
    } else {
        Exploration::Greedy
    };
    let n_eps = cfg.eval_episodes();
    let has_channel = model.channel().is_some();
    let episodes = par::map_indices(n_eps, |i| {
        let log = has_channel && i < cfg.logging.message_log_eval_episodes;
        eval_episode(model, cfg, seed, first_episode + i as u64, explore, log, record_actions)
    });

    let mut actions_log = record_actions.then(Vec::new);
    let mut messages = Vec::new();
    let (mut ret_sum, mut util_sum, mut oracle_sum) = (0.0, 0.0, 0.0);
    let mut link_sum: Vec<f64> = Vec::new();
    let (mut link_steps, mut failures, mut act_calls) = (0usize, 0usize, 0u64);
    for ep in episodes {
        let ep = ep?;
        ret_sum += ep.ret;
        if let Some((u, o)) = ep.routing {
            util_sum += u;
            oracle_sum += o;
        }
        link_sum.resize(ep.link_sums.len().max(link_sum.len()), 0.0);
        for (s, x) in link_sum.iter_mut().zip(&ep.link_sums) {
            *s += x;
        }
        link_steps += ep.link_steps;
        failures += usize::from(ep.failed);
        act_calls += ep.act_calls;
        if let Some(a) = actions_log.as_mut() {
            a.extend(ep.actions);
        }
        messages.extend(ep.messages);
    }
    let routing = matches!(inst, EnvInstance::Routing { .. });
    let per_ep = |x: f64| x / n_eps.max(1) as f64;
    let summary = EvalSummary {
        episodes: n_eps,
        mean_return: per_ep(ret_sum),
        mean_max_utilization: (routing && n_eps > 0).then(|| per_ep(util_sum)),
        oracle_max_utilization: (routing && n_eps > 0).then(|| per_ep(oracle_sum)),
        bottleneck_utilization: (routing && link_steps > 0).then(|| link_sum.iter().map(|s| s / link_steps as f64).collect()),
        failures: (!routing).then_some(failures),
        act_channel_calls: act_calls,
    };
    Ok(EvalOutcome {
        summary,
        actions: actions_log,
        messages,
    })
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}_{}_seed{seed}", cfg.architecture, cfg.env.label())
}

/// Trains, evaluates and (when an output root is configured) writes the run
/// directory. Errors are recorded in the returned record rather than raised.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> RunRecord {
    let id = run_id(cfg, seed);
    let mut record = RunRecord {
        run_id: id.clone(),
        seed,
        architecture: cfg.architecture,
        env: cfg.env.label(),
        episode_returns: Vec::new(),
        scores: Vec::new(),
        converged: false,
        convergence_episode: None,
        eval: None,
        failure_reason: None,
        message_log_path: None,
    };
    if let Err(e) = run_into(cfg, seed, &mut record) {
        record.failure_reason = Some(e.to_string());
        record.converged = false;
        record.convergence_episode = None;
    }
    record
}

fn run_into(cfg: &ExperimentConfig, seed: u64, record: &mut RunRecord) -> Result<()> {
    let trained = train(cfg, seed)?;
    record.episode_returns = trained.history.iter().map(|s| s.ret).collect();
    record.scores = trained.history.iter().map(|s| s.score.unwrap_or(f64::NAN)).collect();
    record.convergence_episode = trained.convergence_episode;
    record.converged = trained.convergence_episode.is_some();
    let eval = evaluate(&trained.model, cfg, seed, trained.history.len() as u64, false)?;
    record.eval = Some(eval.summary);
    if let (Some(root), true) = (&cfg.logging.out_dir, cfg.logging.artifacts) {
        let dir = root.join(&record.run_id);
        std::fs::create_dir_all(&dir)?;
        write_metrics(&dir.join("metrics.jsonl"), &trained.history)?;
        let mut rows = trained.messages;
        rows.extend(eval.messages);
        if !rows.is_empty() {
            let path = dir.join("messages.csv");
            write_messages(&path, &record.run_id, &rows)?;
            write_pca(&dir.join("pca.csv"), &rows)?;
            record.message_log_path = Some(path);
        }
        save_checkpoint(&trained.model, &dir.join("checkpoint.ckpt"), cfg.logging.actors_only_checkpoint)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        std::fs::write(dir.join("record.json"), serde_json::to_vec_pretty(&*record)?)?;
    }
    Ok(())
}

pub fn write_metrics(path: &Path, history: &[EpisodeStats]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in history {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `run_id,episode,t,agent_id,kind,values...` with one column per vector entry.
pub fn write_messages(path: &Path, run_id: &str, rows: &[MessageRow]) -> Result<()> {
    let width = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "run_id,episode,t,agent_id,kind")?;
    for j in 0..width {
        write!(w, ",v{j}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(w, "{run_id},{},{},{},{}", r.episode, r.t, r.agent, r.kind.as_str())?;
        for j in 0..width {
            match r.values.get(j) {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-dimensional projections of the logged messages and signals, each
/// kind fitted separately: `x,y,agent_id,label`.
pub fn write_pca(path: &Path, rows: &[MessageRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,agent_id,label")?;
    for kind in [MessageKind::Message, MessageKind::Signal] {
        let sel: Vec<&MessageRow> = rows.iter().filter(|r| r.kind == kind).collect();
        if sel.is_empty() {
            continue;
        }
        let data: Vec<Vec<f64>> = sel.iter().map(|r| r.values.clone()).collect();
        let (_, pts) = pca::project_2d(&data)?;
        for (r, p) in sel.iter().zip(pts) {
            writeln!(w, "{},{},{},{}", p[0], p[1], r.agent, kind.as_str())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub architecture: ArchitectureKind,
    pub env: String,
    pub n_runs: usize,
    pub converged_runs: usize,
    pub crashed_runs: usize,
    /// Convergence ratio: `converged_runs / n_runs`.
    pub cr: f64,
    /// Mean bottleneck utilization over converged runs; absent without any.
    pub mlu: Option<Vec<f64>>,
    /// Mean evaluation max-U and oracle max-U over converged runs.
    pub max_utilization: Option<f64>,
    pub oracle_max_utilization: Option<f64>,
    /// Failed over total evaluation episodes of all runs (junction).
    pub fr: Option<f64>,
    pub failures: Option<usize>,
    pub eval_episodes: Option<usize>,
}

pub fn aggregate(records: &[RunRecord]) -> Result<AggregateMetrics> {
    let Some(first) = records.first() else {
        return Err(Error::Contract("cannot aggregate zero runs".into()));
    };
    if records.iter().any(|r| r.architecture != first.architecture || r.env != first.env) {
        return Err(Error::Contract("aggregated runs must share architecture and env".into()));
    }
    let n = records.len();
    let conv: Vec<&RunRecord> = records.iter().filter(|r| r.converged).collect();
    let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mlus: Vec<&[f64]> = conv.iter().filter_map(|r| r.post_convergence_mlu()).collect();
    let mlu = (!mlus.is_empty()).then(|| {
        (0..mlus[0].len())
            .map(|i| mlus.iter().map(|m| m[i]).sum::<f64>() / mlus.len() as f64)
            .collect()
    });
    let evals: Vec<&EvalSummary> = records.iter().filter_map(|r| r.eval.as_ref()).collect();
    let failures: Option<usize> = evals.iter().map(|e| e.failures).sum();
    let total: usize = evals.iter().filter(|e| e.failures.is_some()).map(|e| e.episodes).sum();
    Ok(AggregateMetrics {
        architecture: first.architecture,
        env: first.env.clone(),
        n_runs: n,
        converged_runs: conv.len(),
        crashed_runs: records.iter().filter(|r| r.failure_reason.is_some()).count(),
        cr: conv.len() as f64 / n as f64,
        mlu,
        max_utilization: mean_of(conv.iter().filter_map(|r| r.eval.as_ref()?.mean_max_utilization).collect()),
        oracle_max_utilization: mean_of(conv.iter().filter_map(|r| r.eval.as_ref()?.oracle_max_utilization).collect()),
        fr: failures.filter(|_| total > 0).map(|f| f as f64 / total as f64),
        failures: failures.filter(|_| total > 0),
        eval_episodes: (total > 0).then_some(total),
    })
}

/// Runs `cfg.runs.count` seeds (`base_seed + k`) on the worker pool and
/// aggregates them; writes `aggregate.json` next to the run directories.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<(Vec<RunRecord>, AggregateMetrics)> {
    let records = par::map_indices(cfg.runs.count, |k| run_experiment(cfg, cfg.runs.base_seed + k as u64));
    let agg = aggregate(&records)?;
    if let (Some(root), true) = (&cfg.logging.out_dir, cfg.logging.artifacts) {
        std::fs::create_dir_all(root)?;
        let name = format!("aggregate_{}_{}.json", cfg.architecture, cfg.env.label());
        std::fs::write(root.join(name), serde_json::to_vec_pretty(&agg)?)?;
    }
    Ok((records, agg))
}
