//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use invlab_core::bisim::{bisim_metric_fixed_point, coarsest_bisim_partition, FixedPointOptions};
use invlab_core::envlab::GridEnv;

use crate::ablation::{run_ablation, Cell, SUMMARY_FILE};
use crate::config::RunConfig;
use crate::export::{export_latents, parse_task, write_metric_csv, write_observations_csv, write_partition_csv};
use crate::run::{evaluate_run, read_report, train};
use crate::HarnessError;

#[derive(Parser, Debug)]
#[command(name = "invlab", version, about = "Invariant transfer experiments on grid reach tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Recompute the evaluation report of a run directory from its checkpoint.
    Eval(EvalArgs),
    /// Exact bisimulation metric and coarsest partition of a task.
    Metric(MetricArgs),
    /// Run the intervention x method ablation matrix.
    Ablate(AblateArgs),
    /// Dump latents, critic values and a 2D PCA of every rendered state.
    ExportLatents(ExportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config; defaults apply to anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train only this seed instead of `run.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (single seed) or parent directory; defaults to `run.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the report; defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricArgs {
    /// Task shorthand such as `grid5` or `grid4-sparse`.
    #[arg(long, conflicts_with = "config")]
    pub task: Option<String>,
    /// Take the task from a run config instead.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight of the transport term; defaults to the config's bisim gamma.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long, default_value = "1e-6")]
    pub tol: f64,
    /// Output directory for metric.csv and partition.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, counting from 0; defaults to `run.seeds`.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `<run>/latents.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the clean observations of every state and domain.
    #[arg(long)]
    pub observations: Option<PathBuf>,
}

/// Parses `argv` and runs the command; returns the process exit code
/// (0 ok, 1 config or usage error, 2 runtime error).
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> HarnessError {
    HarnessError::Runtime(e.into())
}

pub fn dispatch(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Metric(a) => cmd_metric(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportLatents(a) => cmd_export(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), HarnessError> {
    let cfg = load_config(a.config.as_deref())?;
    let seeds = a.seed.map_or_else(|| cfg.run.seeds.clone(), |s| vec![s]);
    let label = cfg.label()?;
    for &seed in &seeds {
        let dir = match &a.out {
            Some(d) if seeds.len() == 1 => d.clone(),
            Some(d) => d.join(format!("{label}_seed{seed}")),
            None => Path::new(&cfg.run.output_dir).join(format!("{label}_seed{seed}")),
        };
        let out = train(&cfg, seed, &dir)?;
        let r = &out.report;
        println!(
            "{} seed {seed}: seen {:.4} unseen {:.4} success {:.2}/{:.2} invariance {:.4} correlation {:.4} -> {}",
            cfg.method()?.name(),
            r.return_seen,
            r.return_unseen,
            r.success_seen,
            r.success_unseen,
            r.invariance_score,
            r.bisim_correlation,
            out.dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), HarnessError> {
    let report = evaluate_run(&a.run)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    match &a.out {
        Some(p) => fs::write(p, &json).with_context(|| format!("writing {}", p.display())).map_err(runtime)?,
        None => println!("{json}"),
    }
    if let Ok(stored) = read_report(&a.run) {
        let same = stored == report;
        eprintln!("stored report {}", if same { "reproduced exactly" } else { "differs" });
        if !same {
            return Err(runtime(anyhow::anyhow!("recomputed report differs from {}", a.run.display())));
        }
    }
    Ok(())
}

fn cmd_metric(a: MetricArgs) -> Result<(), HarnessError> {
    let (task, default_c) = match (&a.task, &a.config) {
        (Some(t), _) => (parse_task(t).map_err(|e| HarnessError::Config(format!("{e:#}")))?, RunConfig::default().method.bisim_gamma),
        (None, Some(p)) => {
            let cfg = RunConfig::load(p)?;
            (cfg.task(), cfg.method.bisim_gamma)
        }
        (None, None) => return Err(HarnessError::Config("metric needs --task or --config".into())),
    };
    let c = a.c.unwrap_or(default_c);
    if !(0.0..1.0).contains(&c) {
        return Err(HarnessError::Config(format!("c must lie in [0, 1), got {c}")));
    }
    let env = GridEnv::new(task).map_err(|e| HarnessError::Config(e.to_string()))?;
    let report = bisim_metric_fixed_point(&env.mdp, FixedPointOptions::with_c_tol(c, a.tol)).map_err(runtime)?;
    let partition = coarsest_bisim_partition(&env.mdp);
    fs::create_dir_all(&a.out).map_err(runtime)?;
    write_metric_csv(&a.out.join("metric.csv"), &report.metric).map_err(runtime)?;
    write_partition_csv(&a.out.join("partition.csv"), &partition).map_err(runtime)?;
    let max = report.metric.as_slice().iter().copied().fold(0.0, f64::max);
    println!(
        "{} states, {} blocks, {} sweeps, final residual {:.3e}, max distance {:.6}",
        env.mdp.n_states(),
        partition.n_blocks(),
        report.iterations(),
        report.residuals.last().copied().unwrap_or(0.0),
        max
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), HarnessError> {
    let cfg = load_config(a.config.as_deref())?;
    let seeds: Vec<u64> = a.seeds.map_or_else(|| cfg.run.seeds.clone(), |n| (0..n).collect());
    if seeds.is_empty() {
        return Err(HarnessError::Config("need at least one seed".into()));
    }
    let out = a.out.unwrap_or_else(|| Path::new(&cfg.run.output_dir).join("ablation"));
    let rows = run_ablation(&cfg, &Cell::matrix(), &seeds, &out, a.jobs, |r| {
        println!(
            "{:<8} ri={} pri={} seed {:>2}: seen {:.4} unseen {:.4} gap {:.4} invariance {:.4} correlation {:.4}",
            r.method, r.ri as u8, r.pri as u8, r.seed, r.return_seen, r.return_unseen, r.gap, r.invariance_score, r.bisim_correlation
        );
    })?;
    println!("{} rows -> {}", rows.len(), out.join(SUMMARY_FILE).display());
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), HarnessError> {
    let out = a.out.unwrap_or_else(|| a.run.join("latents.csv"));
    let n = export_latents(&a.run, &out).map_err(runtime)?;
    println!("{n} latent rows -> {}", out.display());
    if let Some(path) = &a.observations {
        let cfg = RunConfig::load(&a.run.join(crate::run::CONFIG_FILE))?;
        let n = write_observations_csv(path, &cfg.env()?, &cfg.domains()?).map_err(runtime)?;
        println!("{n} observations -> {}", path.display());
    }
    Ok(())
}
