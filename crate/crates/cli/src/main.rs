use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accnet::checkpoint::load_checkpoint;
use accnet::config::{parse_config, EnvConfig, ExperimentConfig, Overrides, ReplayKind};
use accnet::harness::{self, AggregateMetrics, RunRecord};
use accnet::models::ArchitectureKind;
use accnet::tables::{render_tables, render_text, Table};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "accnet", version, about = "Multi-agent actor-critic experiments with learned communication channels")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate seeded runs of one architecture.
    Train(RunArgs),
    /// Evaluate a saved checkpoint with exploration off.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation episodes.
        #[arg(long)]
        eval_episodes: Option<usize>,
    },
    /// Run every architecture on one environment and print the comparison table.
    Sweep(RunArgs),
    /// Project logged vectors of a messages.csv onto two principal components.
    Pca {
        messages: PathBuf,
        /// `message` or `signal`.
        #[arg(long, default_value = "message")]
        kind: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the comparison table from aggregate files in a directory.
    Tables {
        dir: PathBuf,
        /// Print the machine-readable form instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// IND, FC-sep, FC-sha, AC-CNet, A-CCNet-sep or A-CCNet-sha.
    #[arg(long)]
    arch: Option<ArchitectureKind>,
    /// routing[:topology] or junction[:size].
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "ACCNET_OUT_DIR")]
    out: Option<PathBuf>,
    /// none, cer or ceer.
    #[arg(long)]
    replay: Option<ReplayKind>,
    /// Store only actors (plus the AC-CNet channel) in checkpoints.
    #[arg(long)]
    actors_only: bool,
    #[arg(long)]
    allow_discrete_replay: bool,
    /// Print the resolved configuration before running.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            arch: self.arch,
            env: self.env.as_deref().map(EnvConfig::parse_flag).transpose()?,
            episodes: self.episodes,
            runs: self.runs,
            seed: self.seed,
            out: self.out.clone(),
            replay: self.replay,
            allow_discrete_replay: self.allow_discrete_replay,
            actors_only: self.actors_only,
        };
        let cfg = parse_config(self.config.as_deref(), &overrides)?;
        if self.print_config {
            println!("{}", cfg.to_toml()?);
        }
        Ok(cfg)
    }
}

fn print_run(r: &RunRecord) {
    let mut line = format!("{}: ", r.run_id);
    match &r.failure_reason {
        Some(e) => line.push_str(&format!("FAILED ({e})")),
        None => {
            line.push_str(&format!("{} episodes, ", r.episode_returns.len()));
            match r.convergence_episode {
                Some(e) => line.push_str(&format!("converged at {e}")),
                None => line.push_str("not converged"),
            }
            if let Some(ev) = &r.eval {
                if let (Some(u), Some(o)) = (ev.mean_max_utilization, ev.oracle_max_utilization) {
                    line.push_str(&format!(", eval max-U {u:.4} (oracle {o:.4})"));
                }
                if let Some(f) = ev.failures {
                    line.push_str(&format!(", failures {f}/{}", ev.episodes));
                }
            }
        }
    }
    println!("{line}");
}

fn run_batch(cfg: &ExperimentConfig) -> Result<(bool, AggregateMetrics)> {
    let (records, agg) = harness::run_batch(cfg)?;
    records.iter().for_each(print_run);
    Ok((records.iter().all(|r| r.failure_reason.is_none()), agg))
}

fn write_table(out: Option<&Path>, aggs: &[AggregateMetrics]) -> Result<()> {
    let (text, json) = render_tables(aggs)?;
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.txt"), &text)?;
        std::fs::write(dir.join("table.json"), &json)?;
    }
    Ok(())
}

fn pca_command(messages: &Path, kind: &str, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(messages).with_context(|| format!("reading {}", messages.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty messages file")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).with_context(|| format!("missing column {name}"));
    let (agent_col, kind_col) = (col("agent_id")?, col("kind")?);
    let first_value = kind_col + 1;
    let mut agents = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.get(kind_col) != Some(&kind) {
            continue;
        }
        let values = fields[first_value..]
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("bad value on data row {}", i + 1))?;
        agents.push(fields[agent_col].to_string());
        data.push(values);
    }
    if data.is_empty() {
        bail!("no rows of kind {kind:?} in {}", messages.display());
    }
    let (pca, pts) = accnet::pca::project_2d(&data)?;
    let mut csv = String::from("x,y,agent_id,label\n");
    for (p, a) in pts.iter().zip(&agents) {
        csv.push_str(&format!("{},{},{a},{kind}\n", p[0], p[1]));
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    eprintln!("explained variance: {:?}", pca.explained);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = args.resolve()?;
            let (ok, agg) = run_batch(&cfg)?;
            write_table(None, &[agg])?;
            Ok(ok)
        }
        Cmd::Sweep(args) => {
            if args.arch.is_some() {
                bail!("sweep runs every architecture; drop --arch");
            }
            let cfg = args.resolve()?;
            let mut all_ok = true;
            let mut aggs = Vec::new();
            for kind in ArchitectureKind::ALL {
                let mut c = cfg.clone();
                c.architecture = kind;
                if !kind.is_critic_channel() {
                    c.critic_design = None;
                }
                let (ok, agg) = run_batch(&c)?;
                all_ok &= ok;
                aggs.push(agg);
            }
            write_table(cfg.logging.out_dir.as_deref(), &aggs)?;
            Ok(all_ok)
        }
        Cmd::Evaluate {
            run,
            checkpoint,
            eval_episodes,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(n) = eval_episodes {
                cfg.eval.episodes = Some(n);
            }
            let model = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let out = harness::evaluate(&model, &cfg, cfg.runs.base_seed, 0, false)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            Ok(true)
        }
        Cmd::Pca { messages, kind, out } => {
            pca_command(&messages, &kind, out.as_deref())?;
            Ok(true)
        }
        Cmd::Tables { dir, json } => {
            let mut aggs: Vec<AggregateMetrics> = Vec::new();
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("aggregate_") && n.ends_with(".json"))
                })
                .collect();
            paths.sort();
            for p in paths {
                let text = std::fs::read_to_string(&p)?;
                aggs.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
            }
            if aggs.is_empty() {
                bail!("no aggregate_*.json files in {}", dir.display());
            }
            let order = |a: &AggregateMetrics| ArchitectureKind::ALL.iter().position(|k| *k == a.architecture);
            aggs.sort_by_key(order);
            let table: Table = accnet::tables::build_table(&aggs);
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", render_text(&table));
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some runs failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
