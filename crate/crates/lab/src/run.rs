//! Run directories: training, checkpoints, metrics and evaluation reports.
//!
//! Layout of one run directory:
//!
//! ```text
//! config.toml        snapshot with `run.seeds = [seed]`
//! metrics.csv        one row per evaluation
//! sampling_log.csv   every environment-batch draw
//! checkpoint.bin     final parameters, little-endian f64
//! checkpoint.json    manifest for checkpoint.bin
//! checkpoints/       intermediate checkpoints when checkpoint_every > 0
//! eval_report.json   final evaluation
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use invlab_core::agent::{eval_seed, training_loop, Agent, MetricsRow, NetworkSpec, Networks, TrainConfig, TrainEvent};
use invlab_core::bisim::{bisim_metric_fixed_point, FixedPointOptions, MetricMatrix};
use invlab_core::envlab::{DomainSpec, GridEnv};
use invlab_core::eval::{bisim_correlation, evaluate, invariance_score};
use invlab_core::seeded_rng;
use serde::{Deserialize, Serialize};

use crate::config::{NetworkSection, RunConfig};
use crate::HarnessError;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SAMPLING_FILE: &str = "sampling_log.csv";
pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub step: u64,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub network: NetworkSection,
    pub param_count: usize,
    pub slices: Vec<SliceEntry>,
}

pub fn write_checkpoint(dir: &Path, stem: &str, nets: &Networks, seed: u64, step: u64) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let shape = &nets.spec.shape;
    let manifest = CheckpointManifest {
        format: "f64-le".into(),
        seed,
        step,
        obs_dim: nets.spec.obs_dim,
        n_actions: nets.spec.n_actions,
        network: NetworkSection {
            latent_dim: shape.latent_dim,
            encoder_hidden: shape.encoder_hidden.clone(),
            model_hidden: shape.model_hidden.clone(),
            actor_hidden: shape.actor_hidden.clone(),
            critic_hidden: shape.critic_hidden.clone(),
            proprio: shape.proprio,
        },
        param_count: nets.params.len(),
        slices: nets
            .params
            .slices()
            .iter()
            .map(|s| SliceEntry { name: s.name.clone(), start: s.range.start, len: s.range.len() })
            .collect(),
    };
    fs::write(dir.join(format!("{stem}.bin")), nets.params.to_bytes())?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuilds the networks stored in `<dir>/checkpoint.{bin,json}`.
pub fn load_checkpoint(dir: &Path) -> anyhow::Result<(Networks, CheckpointManifest)> {
    let json = dir.join(CHECKPOINT_JSON);
    let manifest: CheckpointManifest = serde_json::from_str(
        &fs::read_to_string(&json).with_context(|| format!("reading {}", json.display()))?,
    )
    .with_context(|| format!("parsing {}", json.display()))?;
    if manifest.format != "f64-le" {
        bail!("unsupported checkpoint format {:?}", manifest.format);
    }
    let n = &manifest.network;
    let spec = NetworkSpec {
        obs_dim: manifest.obs_dim,
        n_actions: manifest.n_actions,
        shape: invlab_core::agent::NetworkShape {
            latent_dim: n.latent_dim,
            encoder_hidden: n.encoder_hidden.clone(),
            model_hidden: n.model_hidden.clone(),
            actor_hidden: n.actor_hidden.clone(),
            critic_hidden: n.critic_hidden.clone(),
            proprio: n.proprio,
        },
    };
    // Initial values are overwritten by the stored parameters.
    let mut nets = Networks::new(spec, 1.0, &mut seeded_rng(0))?;
    let layout: Vec<SliceEntry> = nets
        .params
        .slices()
        .iter()
        .map(|s| SliceEntry { name: s.name.clone(), start: s.range.start, len: s.range.len() })
        .collect();
    if layout != manifest.slices {
        bail!("checkpoint slice layout does not match its network description");
    }
    let bytes = fs::read(dir.join(CHECKPOINT_BIN))?;
    nets.params.load_bytes(&bytes)?;
    Ok((nets, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain_id: u32,
    /// Whether the agent was allowed to train on this domain.
    pub trained_on: bool,
    pub mean_return: f64,
    pub stderr: f64,
    pub success_rate: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub step: u64,
    pub episodes: usize,
    pub domains: Vec<DomainReport>,
    /// Mean over the domains trained on.
    pub return_seen: f64,
    pub return_unseen: f64,
    pub success_seen: f64,
    pub success_unseen: f64,
    pub invariance_score: f64,
    pub invariance_degenerate: bool,
    /// Against the exact metric with `c = bisim_gamma`, on domain 0.
    pub bisim_correlation: f64,
    pub bisim_correlation_degenerate: bool,
    pub metric_c: f64,
}

impl EvalReport {
    /// Seen minus unseen return.
    pub fn gap(&self) -> f64 {
        self.return_seen - self.return_unseen
    }
}

/// Exact metric used by the correlation diagnostic.
pub fn diagnostic_metric(env: &GridEnv, c: f64) -> anyhow::Result<MetricMatrix> {
    Ok(bisim_metric_fixed_point(&env.mdp, FixedPointOptions::with_c(c))?.metric)
}

/// Final evaluation: greedy returns on every domain plus both diagnostics.
pub fn eval_report(
    nets: &Networks,
    cfg: &TrainConfig,
    env: &GridEnv,
    domains: &[DomainSpec],
    step: u64,
) -> anyhow::Result<EvalReport> {
    let evals =
        evaluate(nets, env, domains, cfg.eval_episodes, cfg.episode_limit, eval_seed(cfg.seed, u64::MAX))?;
    let train_ids = cfg.training_domain_ids(domains);
    let unseen = domains.len() - 1;
    let reports: Vec<DomainReport> = evals
        .iter()
        .map(|d| DomainReport {
            domain_id: d.domain_id,
            trained_on: train_ids.contains(&d.domain_id),
            mean_return: d.mean_return,
            stderr: d.stderr,
            success_rate: d.success_rate,
            returns: d.returns.clone(),
        })
        .collect();
    let seen: Vec<&DomainReport> = reports.iter().filter(|d| d.trained_on).collect();
    let mean = |f: fn(&DomainReport) -> f64| seen.iter().map(|d| f(d)).sum::<f64>() / seen.len() as f64;
    let inv = invariance_score(nets, env, domains)?;
    let metric = diagnostic_metric(env, cfg.bisim_gamma)?;
    let corr = bisim_correlation(nets, env, &metric, &domains[0])?;
    Ok(EvalReport {
        seed: cfg.seed,
        step,
        episodes: cfg.eval_episodes,
        return_seen: mean(|d| d.mean_return),
        return_unseen: reports[unseen].mean_return,
        success_seen: mean(|d| d.success_rate),
        success_unseen: reports[unseen].success_rate,
        domains: reports,
        invariance_score: inv.value,
        invariance_degenerate: inv.degenerate,
        bisim_correlation: corr.value,
        bisim_correlation_degenerate: corr.degenerate,
        metric_c: cfg.bisim_gamma,
    })
}

pub const METRICS_HEADER: [&str; 13] = [
    "step",
    "env_tags",
    "episode_return_seen",
    "episode_return_unseen",
    "success_seen",
    "success_unseen",
    "critic_loss",
    "actor_loss",
    "bisim_loss",
    "dyn_loss",
    "rew_loss",
    "risk_variance",
    "alpha",
];

fn join_tags(tags: &[u32]) -> String {
    tags.iter().map(u32::to_string).collect::<Vec<_>>().join(";")
}

fn metrics_record(r: &MetricsRow) -> Vec<String> {
    let f = |v: f64| format!("{v:?}");
    vec![
        r.step.to_string(),
        join_tags(&r.env_tags),
        f(r.episode_return_seen),
        f(r.episode_return_unseen),
        f(r.success_seen),
        f(r.success_unseen),
        f(r.critic_loss),
        f(r.actor_loss),
        f(r.bisim_loss),
        f(r.dyn_loss),
        f(r.rew_loss),
        f(r.risk_variance),
        f(r.alpha),
    ]
}

/// Paths and outcome of a finished training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub rows: usize,
}

/// Trains one (config, seed) pair into `dir`, which must not already hold a run.
pub fn train(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<RunOutcome, HarnessError> {
    let train_cfg = cfg.train_config(seed)?;
    let env = cfg.env()?;
    let domains = cfg.domains()?;
    if dir.join(CONFIG_FILE).exists() {
        return Err(HarnessError::Config(format!("{} already holds a run", dir.display())));
    }
    let mut snapshot = cfg.clone();
    snapshot.run.seeds = vec![seed];
    let runtime = |e: anyhow::Error| HarnessError::Runtime(e);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    fs::write(dir.join(CONFIG_FILE), snapshot.to_toml()).context("writing config snapshot").map_err(runtime)?;

    let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(|e| runtime(e.into()))?;
    metrics.write_record(METRICS_HEADER).map_err(|e| runtime(e.into()))?;
    let mut sampling = csv::Writer::from_path(dir.join(SAMPLING_FILE)).map_err(|e| runtime(e.into()))?;
    sampling.write_record(["step", "domain_ids"]).map_err(|e| runtime(e.into()))?;
    let ckpt_dir = dir.join("checkpoints");

    let outcome = training_loop(&train_cfg, &env, &domains, |event| {
        let res: anyhow::Result<()> = (|| {
            match event {
                TrainEvent::Resample { step, domain_ids } => {
                    sampling.write_record([step.to_string(), join_tags(domain_ids)])?;
                }
                TrainEvent::Metrics(row) => {
                    metrics.write_record(metrics_record(row))?;
                    metrics.flush()?;
                }
                TrainEvent::Checkpoint { step, agent } => {
                    write_checkpoint(&ckpt_dir, &format!("step-{step}"), &agent.nets, seed, step)?;
                }
            }
            Ok(())
        })();
        res.map_err(|e| invlab_core::Error::Observer(format!("{e:#}")))
    })
    .map_err(|e| runtime(e.into()))?;
    sampling.flush().map_err(|e| runtime(e.into()))?;
    finish(&outcome.agent, &train_cfg, &env, &domains, dir, outcome.rows.len())
}

fn finish(
    agent: &Agent,
    cfg: &TrainConfig,
    env: &GridEnv,
    domains: &[DomainSpec],
    dir: &Path,
    rows: usize,
) -> Result<RunOutcome, HarnessError> {
    let inner = || -> anyhow::Result<EvalReport> {
        write_checkpoint(dir, "checkpoint", &agent.nets, cfg.seed, cfg.total_steps)?;
        let report = eval_report(&agent.nets, cfg, env, domains, cfg.total_steps)?;
        fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    };
    let report = inner().map_err(HarnessError::Runtime)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), report, rows })
}

/// Recomputes the final report of a run directory from its config snapshot
/// and checkpoint.
pub fn evaluate_run(dir: &Path) -> Result<EvalReport, HarnessError> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let inner = || -> anyhow::Result<EvalReport> {
        let (nets, manifest) = load_checkpoint(dir)?;
        let train_cfg = cfg.train_config(manifest.seed)?;
        eval_report(&nets, &train_cfg, &cfg.env()?, &cfg.domains()?, manifest.step)
    };
    inner().map_err(HarnessError::Runtime)
}

pub fn read_report(dir: &Path) -> anyhow::Result<EvalReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Domain ids of every environment-batch draw in a run's sampling log.
pub fn read_sampling_log(dir: &Path) -> anyhow::Result<Vec<(u64, Vec<u32>)>> {
    let mut reader = csv::Reader::from_path(dir.join(SAMPLING_FILE))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let step: u64 = rec[0].parse()?;
        let ids = rec[1].split(';').filter(|s| !s.is_empty()).map(str::parse).collect::<Result<Vec<u32>, _>>()?;
        out.push((step, ids));
    }
    Ok(out)
}
