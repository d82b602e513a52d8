use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use casa_core::datagen::{make_gaussian_domains_with_marginal, DatasetManifest};
use casa_core::harness::{check, emit, grid, train, Alpha, ExperimentConfig, Method};
use casa_core::Error;

#[derive(Parser)]
#[command(name = "casa", version, about = "Conditional adversarial support alignment workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML document of configuration keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on the synthetic task
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        /// Dirichlet concentration of the target labels, or "none"
        #[arg(long)]
        alpha: Option<Alpha>,
    },
    /// Run the (method, alpha, seed) grid and write grid.csv
    Grid {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one method
        #[arg(long)]
        method: Option<Method>,
        /// Restrict the grid to one alpha
        #[arg(long)]
        alpha: Option<Alpha>,
    },
    /// Bound and equivalence checks on random discrete instances
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 200)]
        joint_instances: usize,
    },
    /// Gradient and training-invariant suites
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

enum Outcome {
    Ok(serde_json::Value),
    Failed(serde_json::Value),
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn run(cmd: Command) -> Result<Outcome, Error> {
    match cmd {
        Command::Train { common, method, alpha } => {
            let mut cfg = load(&common)?;
            if let Some(m) = method {
                cfg.train.method = m;
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(a) = alpha {
                cfg.grid.alpha = a;
                cfg.grid.target_marginal = None;
            }
            cfg.validate()?;
            let seed = cfg.train.seed;
            let data = match &cfg.grid.target_marginal {
                Some(m) => make_gaussian_domains_with_marginal(&cfg.task, m, seed)?,
                None => grid::prepare_data(&cfg.task, cfg.grid.alpha, seed)?,
            };
            let out = train::train(&cfg.train, &data)?;
            emit::write_run(&common.out, &out)?;
            let manifest = DatasetManifest::describe("gaussian", &data, cfg.grid.alpha.0, seed);
            write_json(&common.out.join("dataset.json"), &manifest)?;
            std::fs::write(common.out.join("config.toml"), cfg.to_toml_string())?;
            Ok(Outcome::Ok(json!({
                "method": cfg.train.method,
                "seed": seed,
                "per_class_acc": out.record.final_per_class_acc,
                "cssd": out.record.final_divergences.cssd,
                "out": common.out,
            })))
        }
        Command::Grid { common, method, alpha } => {
            let mut cfg = load(&common)?;
            if let Some(m) = method {
                cfg.grid.methods = vec![m];
            }
            if let Some(a) = alpha {
                cfg.grid.alphas = vec![a];
            }
            if let Some(s) = common.seed {
                cfg.grid.seeds = vec![s];
            }
            let report = grid::run_grid(&cfg)?;
            grid::write_grid(&common.out, &report)?;
            let incomplete = report.cells.iter().filter(|c| !c.complete).count();
            Ok(Outcome::Ok(json!({
                "cells": report.cells.len(),
                "runs": report.runs.len(),
                "incomplete_cells": incomplete,
                "out": common.out,
            })))
        }
        Command::Oracle {
            common,
            instances,
            joint_instances,
        } => {
            let rep = check::oracle_suite(instances, joint_instances, common.seed.unwrap_or(0))?;
            std::fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("oracle.json"), &rep)?;
            let summary = json!({
                "passed": rep.passed(),
                "lemma_instances": rep.lemma.instances,
                "min_slack_conditional": rep.lemma.min_slack_conditional,
                "min_slack_cssd": rep.lemma.min_slack_cssd,
                "min_slack_marginal": rep.lemma.min_slack_marginal,
                "prop1_checked": rep.prop1.checked,
                "prop1_counterexamples": rep.prop1.counterexamples.len(),
            });
            Ok(if rep.passed() { Outcome::Ok(summary) } else { Outcome::Failed(summary) })
        }
        Command::Check { common, instances } => {
            let seed = common.seed.unwrap_or(0);
            let grads = check::gradient_suite(instances, seed)?;
            let inv = check::invariant_suite(seed)?;
            std::fs::create_dir_all(&common.out)?;
            let rep = json!({ "gradients": grads, "invariants": inv });
            write_json(&common.out.join("check.json"), &rep)?;
            let passed = grads.all_passed() && inv.iter().all(|c| c.passed);
            let summary = json!({
                "passed": passed,
                "gradients": grads.rows.iter().map(|r| json!({"loss": r.loss, "max_rel_err": r.max_rel_err})).collect::<Vec<_>>(),
                "invariants": inv.iter().map(|c| json!({"name": c.name, "passed": c.passed})).collect::<Vec<_>>(),
            });
            Ok(if passed { Outcome::Ok(summary) } else { Outcome::Failed(summary) })
        }
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let kind = match e {
        Error::Tensor(_) => "tensor",
        Error::Lp(_) => "lp",
        Error::Data(_) => "data",
        Error::Empty(_) => "empty",
        Error::Precondition(_) => "precondition",
        Error::Config(_) => "config",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    };
    let mut v = json!({ "error": kind, "message": e.to_string() });
    if let Error::NonFiniteLoss { step, term } = e {
        v["step"] = json!(step);
        v["term"] = json!(term);
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok(v)) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Ok(Outcome::Failed(v)) => {
            eprintln!("{}", json!({ "error": "check_failed", "report": v }));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
