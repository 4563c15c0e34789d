//! CSV exports: exact metrics, partitions, observations and latents.

use std::path::Path;

use anyhow::{bail, Context};
use invlab_core::bisim::{MetricMatrix, Partition};
use invlab_core::envlab::{render, DomainSpec, GridEnv, GridReachTask, RewardMode};
use invlab_core::eval::latent_rows;

use crate::config::RunConfig;
use crate::pca::project_2d;
use crate::run::{load_checkpoint, CONFIG_FILE};

/// Parses task shorthands `grid<N>` and `grid<N>-sparse` (goal at the centre).
pub fn parse_task(name: &str) -> anyhow::Result<GridReachTask> {
    let (body, mode) = match name.strip_suffix("-sparse") {
        Some(b) => (b, RewardMode::Sparse),
        None => (name, RewardMode::Dense),
    };
    let side: usize = body
        .strip_prefix("grid")
        .and_then(|n| n.parse().ok())
        .with_context(|| format!("unknown task {name:?}; expected grid<N> or grid<N>-sparse"))?;
    if side < 2 {
        bail!("grid side must be at least 2");
    }
    Ok(GridReachTask { side, goal: (side / 2, side / 2), reward_mode: mode, ..GridReachTask::default() })
}

/// One `i,j,distance` row per ordered state pair.
pub fn write_metric_csv(path: &Path, metric: &MetricMatrix) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "distance"])?;
    let n = metric.size();
    for i in 0..n {
        for j in 0..n {
            w.write_record([i.to_string(), j.to_string(), format!("{:?}", metric.get(i, j))])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_csv(path: &Path) -> anyhow::Result<Vec<(usize, usize, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((rec[0].parse()?, rec[1].parse()?, rec[2].parse()?));
    }
    Ok(out)
}

pub fn write_partition_csv(path: &Path, partition: &Partition) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["state", "block"])?;
    for (s, b) in partition.labels().iter().enumerate() {
        w.write_record([s.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Clean renders of every state under every domain, one flat row-major
/// observation per line.
pub fn write_observations_csv(path: &Path, env: &GridEnv, domains: &[DomainSpec]) -> anyhow::Result<usize> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["domain_id".to_string(), "state_id".to_string()];
    header.extend((0..env.obs_len()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    let mut rows = 0;
    for d in domains {
        let clean = DomainSpec { post_render: None, ..d.clone() };
        for s in 0..env.mdp.n_states() {
            let obs = render(env, &clean, s);
            let mut rec = vec![d.domain_id.to_string(), s.to_string()];
            rec.extend(obs.values.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

/// Writes `latents.csv` rows `(z..., domain_id, state_id, value, pc1, pc2)`
/// for every state under every domain of a run. Returns the row count.
pub fn export_latents(run_dir: &Path, out: &Path) -> anyhow::Result<usize> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let (nets, _) = load_checkpoint(run_dir)?;
    let env = cfg.env()?;
    let domains = cfg.domains()?;
    let rows = latent_rows(&nets, &env, &domains)?;
    let latents: Vec<Vec<f64>> = rows.iter().map(|r| r.latent.clone()).collect();
    let pcs = project_2d(&latents);

    let dim = nets.spec.shape.latent_dim;
    let mut w = csv::Writer::from_path(out)?;
    let mut header: Vec<String> = (0..dim).map(|k| format!("z{k}")).collect();
    header.extend(["domain_id", "state_id", "value", "pc1", "pc2"].map(String::from));
    w.write_record(&header)?;
    for (r, pc) in rows.iter().zip(&pcs) {
        let mut rec: Vec<String> = r.latent.iter().map(|v| format!("{v:?}")).collect();
        rec.push(r.domain_id.to_string());
        rec.push(r.state_id.to_string());
        rec.push(format!("{:?}", r.value));
        rec.push(format!("{:?}", pc[0]));
        rec.push(format!("{:?}", pc[1]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows.len())
}

/// A parsed `latents.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub latent: Vec<f64>,
    pub domain_id: u32,
    pub state_id: usize,
    pub value: f64,
    pub pc: [f64; 2],
}

pub fn read_latents_csv(path: &Path) -> anyhow::Result<Vec<LatentRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.iter().filter(|h| h.starts_with('z')).count();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let latent = (0..dim).map(|k| rec[k].parse()).collect::<Result<Vec<f64>, _>>()?;
        out.push(LatentRecord {
            latent,
            domain_id: rec[dim].parse()?,
            state_id: rec[dim + 1].parse()?,
            value: rec[dim + 2].parse()?,
            pc: [rec[dim + 3].parse()?, rec[dim + 4].parse()?],
        });
    }
    Ok(out)
}

/// Mean L1 latent distance between rows of the same state in different
/// domains, and between rows of different states in different domains.
pub fn matched_mismatched_distances(rows: &[LatentRecord]) -> (f64, f64) {
    let mut matched = (0.0, 0usize);
    let mut mismatched = (0.0, 0usize);
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            if a.domain_id == b.domain_id {
                continue;
            }
            let d: f64 = a.latent.iter().zip(&b.latent).map(|(x, y)| (x - y).abs()).sum();
            let acc = if a.state_id == b.state_id { &mut matched } else { &mut mismatched };
            acc.0 += d;
            acc.1 += 1;
        }
    }
    (matched.0 / matched.1.max(1) as f64, mismatched.0 / mismatched.1.max(1) as f64)
}
