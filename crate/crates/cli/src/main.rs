//! `latentdrive`: pretrain, deploy, fine-tune, evaluate and report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentdrive::config::{IntrinsicKind, ENV_PREFIX};
use latentdrive::eval::Provenance;
use latentdrive::pipeline::{self, RunDir};
use latentdrive::protocol::{Counters, Stage};
use latentdrive::Config;
use serde_json::json;

mod selftest;

#[derive(Parser, Debug)]
#[command(name = "latentdrive", version, about = "Reward-free world-model pretraining and transfer evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides protocol.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Step budget: a bare number applies to the invoked stage, or
    /// `pretrain=N,finetune=M`.
    #[arg(long, global = true)]
    budget_override: Option<String>,
    /// 500k/10k budgets, 10k density period, 50 evaluation episodes.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Overrides intrinsic.kind.
    #[arg(long, global = true)]
    arm: Option<IntrinsicKind>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Reward-free pretraining in Town-A.
    Pretrain,
    /// Frozen deployment of the pretrained exploration policy on the full grid.
    Zeroshot,
    /// Task fine-tuning on top of the pretrained agent.
    Finetune,
    /// Task-reward-only training from scratch (requires arm `none`).
    Baseline,
    /// Evaluate the policy of a trained stage.
    Eval {
        #[arg(long, default_value = "finetune")]
        stage: String,
    },
    /// Aggregate record files into tables, gap table and charts.
    Report {
        /// `records.csv` files from any runs.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
    },
    /// Deterministic self-test: gradient suite, oracles, repeated tiny pipeline.
    Selftest,
}

fn apply_budget(cfg: &mut Config, budget: &str, stage: Option<Stage>) -> Result<()> {
    let parse = |v: &str| v.trim().parse::<u64>().with_context(|| format!("bad budget `{v}`"));
    if !budget.contains('=') {
        let n = parse(budget)?;
        match stage {
            Some(Stage::Pretrain) => cfg.protocol.pretrain_steps = n,
            Some(Stage::Finetune) => cfg.protocol.finetune_steps = n,
            _ => bail!("a bare --budget-override only applies to pretrain or finetune; use pretrain=N,finetune=M"),
        }
        return Ok(());
    }
    for part in budget.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| anyhow!("bad budget entry `{part}`"))?;
        match k.trim() {
            "pretrain" => cfg.protocol.pretrain_steps = parse(v)?,
            "finetune" => cfg.protocol.finetune_steps = parse(v)?,
            other => bail!("unknown budget `{other}` (expected pretrain or finetune)"),
        }
    }
    Ok(())
}

/// Defaults, then file, then scale preset, then environment, then flags.
fn resolve(common: &Common, stage: Option<Stage>) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if common.paper_scale {
        cfg = cfg.paper_scale();
    }
    cfg = cfg.with_env(std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))?;
    if let Some(s) = common.seed {
        cfg.protocol.seed = s;
    }
    if let Some(k) = common.arm {
        cfg.intrinsic.kind = k;
    }
    if let Some(b) = &common.budget_override {
        apply_budget(&mut cfg, b, stage)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
}

fn counters_json(c: &Counters) -> serde_json::Value {
    json!({
        "env_steps": c.env_steps,
        "prefill_steps": c.prefill_steps,
        "updates": c.updates,
        "replay_writes": c.replay_writes,
        "episodes": c.episodes,
    })
}

fn run(cli: Cli) -> Result<()> {
    let stage = match &cli.cmd {
        Cmd::Pretrain => Some(Stage::Pretrain),
        Cmd::Finetune => Some(Stage::Finetune),
        Cmd::Baseline => Some(Stage::Baseline),
        Cmd::Zeroshot => Some(Stage::Zeroshot),
        Cmd::Eval { stage } => Some(stage.parse()?),
        Cmd::Report { .. } | Cmd::Selftest => None,
    };
    let cfg = resolve(&cli.common, stage)?;
    let workers = cli.common.workers.max(1);
    let summary = match cli.cmd {
        Cmd::Pretrain | Cmd::Finetune | Cmd::Baseline => {
            let dir = RunDir::open(out_dir(&cli.common)?, &cfg)?;
            let out = match stage {
                Some(Stage::Pretrain) => dir.pretrain()?,
                Some(Stage::Finetune) => dir.finetune()?,
                _ => dir.baseline()?,
            };
            json!({
                "stage": stage.map(Stage::name),
                "arm": cfg.intrinsic.kind.name(),
                "config_hash": cfg.hash(),
                "seed": cfg.protocol.seed,
                "counters": counters_json(&out.counters),
                "freeze_checks": out.freeze_checks,
            })
        }
        Cmd::Zeroshot | Cmd::Eval { .. } => {
            let dir = RunDir::open(out_dir(&cli.common)?, &cfg)?;
            let stage = stage.unwrap_or(Stage::Zeroshot);
            let d = dir.eval(stage, workers)?;
            json!({
                "stage": stage.name(),
                "arm": cfg.intrinsic.kind.name(),
                "config_hash": cfg.hash(),
                "seed": cfg.protocol.seed,
                "records": d.records.len(),
                "invalid": d.records.iter().filter(|r| !r.is_valid()).count(),
                "updates": d.updates,
                "replay_writes": d.replay_writes,
            })
        }
        Cmd::Report { records } => {
            let out = out_dir(&cli.common)?;
            let prov = Provenance { config_hash: cfg.hash(), seed: cfg.protocol.seed, stage: "report".into() };
            let files = pipeline::report(&records, out, &prov)?;
            json!({ "stage": "report", "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() })
        }
        Cmd::Selftest => {
            let ok = selftest::run(cli.common.out.as_deref())?;
            if !ok {
                bail!("self-test failed");
            }
            json!({ "stage": "selftest", "passed": true })
        }
    };
    println!("{summary}");
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use latentdrive::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config(_)) => "config",
        Some(E::Contract(_)) => "contract",
        Some(E::Numeric(_)) => "numeric",
        Some(E::InsufficientData(_)) => "insufficient-data",
        Some(E::Format(_)) => "format",
        Some(E::Tensor(_)) => "tensor",
        Some(E::Sim(_)) => "simulator",
        Some(E::Io(_)) => "io",
        None => "usage",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            if kind == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
