//! The (method, α, seed) evaluation grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_gaussian_domains_with_marginal, sample_target_marginal, DomainPair, GaussianTask, LabelShiftSpec};
use crate::error::{Error, Result};

use super::config::{Alpha, ExperimentConfig, Method, TrainConfig};
use super::train::{train, RunRecord};

/// Synthetic domains for one (α, seed) pair. The marginal depends on the
/// seed alone, so every method sees the same target.
pub fn prepare_data(task: &GaussianTask, alpha: Alpha, seed: u64) -> Result<DomainPair> {
    let marginal = sample_target_marginal(&LabelShiftSpec {
        alpha: alpha.0,
        classes: task.classes,
        seed,
    })?;
    make_gaussian_domains_with_marginal(task, &marginal, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub method: Method,
    pub alpha: Alpha,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Summary over seeds for one (method, α) cell. Statistics cover the
/// completed runs only; `complete` is false when any run aborted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: Method,
    pub alpha: Alpha,
    pub n_runs: usize,
    pub n_failed: usize,
    pub complete: bool,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub cssd_mean: f64,
    pub cssd_std: f64,
    pub joint_ssd_mean: f64,
    pub ssd_mean: f64,
    pub wasserstein_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub runs: Vec<GridRun>,
}

impl GridReport {
    pub fn cell(&self, method: Method, alpha: Alpha) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.method == method && c.alpha == alpha)
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(method: Method, alpha: Alpha, runs: &[&GridRun]) -> GridCell {
    let done: Vec<&RunRecord> = runs.iter().filter_map(|r| r.record.as_ref()).collect();
    let pick = |f: &dyn Fn(&RunRecord) -> f64| done.iter().map(|r| f(r)).collect::<Vec<_>>();
    let (acc_mean, acc_std) = mean_std(&pick(&|r| r.final_per_class_acc));
    let (cssd_mean, cssd_std) = mean_std(&pick(&|r| r.final_divergences.cssd));
    let n_failed = runs.len() - done.len();
    GridCell {
        method,
        alpha,
        n_runs: runs.len(),
        n_failed,
        complete: n_failed == 0,
        acc_mean,
        acc_std,
        cssd_mean,
        cssd_std,
        joint_ssd_mean: mean_std(&pick(&|r| r.final_divergences.joint_ssd)).0,
        ssd_mean: mean_std(&pick(&|r| r.final_divergences.ssd)).0,
        wasserstein_mean: mean_std(&pick(&|r| r.final_divergences.wasserstein)).0,
    }
}

fn run_job(base: &TrainConfig, method: Method, seed: u64, data: &std::result::Result<DomainPair, String>) -> std::result::Result<RunRecord, String> {
    let data = data.as_ref().map_err(Clone::clone)?;
    let cfg = TrainConfig {
        method,
        seed,
        ..base.clone()
    };
    train(&cfg, data).map(|o| o.record).map_err(|e| e.to_string())
}

/// Runs every (method, α, seed) job, up to `grid.workers` at a time. Job
/// order, and so every output, is independent of the worker count.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridReport> {
    cfg.validate()?;
    let g = &cfg.grid;
    let datasets: Vec<(Alpha, u64, std::result::Result<DomainPair, String>)> = g
        .alphas
        .iter()
        .flat_map(|&a| g.seeds.iter().map(move |&s| (a, s)))
        .map(|(a, s)| (a, s, prepare_data(&cfg.task, a, s).map_err(|e| e.to_string())))
        .collect();
    let jobs: Vec<(Method, usize)> = g
        .methods
        .iter()
        .flat_map(|&m| (0..datasets.len()).map(move |d| (m, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<GridRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, d)| {
                let (alpha, seed, data) = &datasets[d];
                let outcome = run_job(&cfg.train, method, *seed, data);
                let (record, error) = match outcome {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e)),
                };
                GridRun {
                    method,
                    alpha: *alpha,
                    seed: *seed,
                    record,
                    error,
                }
            })
            .collect()
    });
    let mut cells = Vec::new();
    for &m in &g.methods {
        for &a in &g.alphas {
            let members: Vec<&GridRun> = runs.iter().filter(|r| r.method == m && r.alpha == a).collect();
            cells.push(summarize(m, a, &members));
        }
    }
    Ok(GridReport { cells, runs })
}

#[derive(Serialize)]
struct CsvCell<'a> {
    method: &'a str,
    alpha: String,
    n_runs: usize,
    n_failed: usize,
    complete: bool,
    acc_mean: f64,
    acc_std: f64,
    cssd_mean: f64,
    cssd_std: f64,
    joint_ssd_mean: f64,
    ssd_mean: f64,
    wasserstein_mean: f64,
}

pub fn write_grid_csv(path: &Path, report: &GridReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in &report.cells {
        w.serialize(CsvCell {
            method: c.method.name(),
            alpha: c.alpha.to_string(),
            n_runs: c.n_runs,
            n_failed: c.n_failed,
            complete: c.complete,
            acc_mean: c.acc_mean,
            acc_std: c.acc_std,
            cssd_mean: c.cssd_mean,
            cssd_std: c.cssd_std,
            joint_ssd_mean: c.joint_ssd_mean,
            ssd_mean: c.ssd_mean,
            wasserstein_mean: c.wasserstein_mean,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `grid.csv` plus `runs.jsonl`, one line per job in job order.
pub fn write_grid(dir: &Path, report: &GridReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_grid_csv(&dir.join("grid.csv"), report)?;
    let mut w = BufWriter::new(File::create(dir.join("runs.jsonl"))?);
    for r in &report.runs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
