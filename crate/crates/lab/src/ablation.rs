//! The ablation matrix: intervention switches for IBIT and one
//! full-intervention cell per method, over a list of seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use invlab_core::agent::Method;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::{read_report, train, EvalReport, CONFIG_FILE, REPORT_FILE};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    /// Rendering interventions (RI).
    pub rendering: bool,
    /// Post-rendering interventions (PRI).
    pub post_rendering: bool,
}

impl Cell {
    pub const fn new(method: Method, rendering: bool, post_rendering: bool) -> Self {
        Self { method, rendering, post_rendering }
    }

    /// Full-intervention cell of a method. SAC never uses post-rendering
    /// interventions, so its cell has RI only.
    pub const fn full(method: Method) -> Self {
        Self { method, rendering: true, post_rendering: !matches!(method, Method::Sac) }
    }

    /// {RI, no RI} x {PRI, no PRI} for IBIT, then the full-intervention cells
    /// of SAC, DrQ and IBIT-REx. The IBIT full cell appears once.
    pub fn matrix() -> Vec<Cell> {
        let mut cells = Vec::new();
        for rendering in [true, false] {
            for post_rendering in [true, false] {
                cells.push(Cell::new(Method::Ibit, rendering, post_rendering));
            }
        }
        cells.extend([Method::Sac, Method::DrQ, Method::IbitRex].map(Cell::full));
        cells
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.method.name = self.method.name().to_string();
        cfg.method.rendering = self.rendering;
        cfg.method.post_rendering = self.post_rendering;
        cfg
    }

    pub fn label(&self) -> String {
        format!(
            "{}-ri{}-pri{}",
            self.method.name().to_ascii_lowercase(),
            self.rendering as u8,
            self.post_rendering as u8
        )
    }
}

/// One line of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub ri: bool,
    pub pri: bool,
    pub seed: u64,
    pub return_seen: f64,
    pub return_unseen: f64,
    pub success_seen: f64,
    pub success_unseen: f64,
    pub gap: f64,
    pub invariance_score: f64,
    pub bisim_correlation: f64,
    pub run_dir: String,
}

impl SummaryRow {
    fn new(cell: &Cell, seed: u64, report: &EvalReport, dir: &Path) -> Self {
        Self {
            method: cell.method.name().to_string(),
            ri: cell.rendering,
            pri: cell.post_rendering,
            seed,
            return_seen: report.return_seen,
            return_unseen: report.return_unseen,
            success_seen: report.success_seen,
            success_unseen: report.success_unseen,
            gap: report.gap(),
            invariance_score: report.invariance_score,
            bisim_correlation: report.bisim_correlation,
            run_dir: dir.display().to_string(),
        }
    }
}

pub const SUMMARY_FILE: &str = "ablation.csv";

/// A finished run whose snapshot matches `cfg` is reused instead of retrained.
fn finished_report(dir: &Path, cfg: &RunConfig, seed: u64) -> Option<EvalReport> {
    if !dir.join(REPORT_FILE).exists() {
        return None;
    }
    let snap = RunConfig::load(&dir.join(CONFIG_FILE)).ok()?;
    let mut want = cfg.clone();
    want.run.seeds = vec![seed];
    (snap == want).then(|| read_report(dir).ok()).flatten()
}

/// Runs every (cell, seed) pair under `out`, `jobs` at a time, and writes
/// `ablation.csv`. Rows come back in (cell, seed) order whatever the
/// completion order.
pub fn run_ablation(
    base: &RunConfig,
    cells: &[Cell],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
    on_row: impl Fn(&SummaryRow) + Sync,
) -> Result<Vec<SummaryRow>, HarnessError> {
    let tasks: Vec<(Cell, u64, RunConfig, PathBuf)> = cells
        .iter()
        .flat_map(|cell| {
            let cfg = cell.apply(base);
            seeds.iter().map(move |&seed| (*cell, seed, cfg.clone(), out.join(format!("{}_seed{seed}", cell.label()))))
        })
        .collect();
    for (_, seed, cfg, _) in &tasks {
        cfg.train_config(*seed)?;
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::Runtime(e.into()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SummaryRow, HarnessError>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((cell, seed, cfg, dir)) = tasks.get(i) else { break };
        let res = match finished_report(dir, cfg, *seed) {
            Some(report) => Ok(report),
            None => {
                if dir.exists() {
                    // Incomplete or stale run: start over.
                    let _ = fs::remove_dir_all(dir);
                }
                train(cfg, *seed, dir).map(|o| o.report)
            }
        }
        .map(|report| SummaryRow::new(cell, *seed, &report, dir));
        if let Ok(row) = &res {
            on_row(row);
        }
        let failed = res.is_err();
        results.lock().expect("results lock")[i] = Some(res);
        if failed {
            next.store(tasks.len(), Ordering::SeqCst);
        }
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(worker);
        }
    });

    let mut rows = Vec::with_capacity(tasks.len());
    for r in results.into_inner().expect("results lock") {
        match r {
            Some(Ok(row)) => rows.push(row),
            Some(Err(e)) => return Err(e),
            None => return Err(HarnessError::Runtime(anyhow::anyhow!("ablation stopped after a failed run"))),
        }
    }
    let write = || -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(HarnessError::Runtime)?;
    Ok(rows)
}

pub fn read_summary(path: &Path) -> anyhow::Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_covers_the_grid_and_every_method() {
        let cells = Cell::matrix();
        assert_eq!(cells.len(), 7);
        for ri in [true, false] {
            for pri in [true, false] {
                assert!(cells.contains(&Cell::new(Method::Ibit, ri, pri)));
            }
        }
        for m in Method::ALL {
            assert!(cells.contains(&Cell::full(m)), "{m:?}");
        }
        let mut labels: Vec<String> = cells.iter().map(Cell::label).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), cells.len());
    }

    #[test]
    fn every_cell_is_a_valid_config() {
        let base = RunConfig::default();
        for cell in Cell::matrix() {
            cell.apply(&base).validate().unwrap_or_else(|e| panic!("{}: {e}", cell.label()));
        }
    }
}
