//! `lct`: train, evaluate, probe and cut sub-models from local critic
//! networks.
//!
//! Exit codes: 0 success, 2 invalid configuration or mismatched shapes,
//! 3 numeric blow-up, 4 no sub-model fits the budget, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lct_core::checkpoint::{self, Checkpoint};
use lct_core::config::{ProbeSource, RunConfig};
use lct_core::diagnostics::{grad_check, probe};
use lct_core::run::{check_compatible, evaluate_heads, head_name, train, RunData};
use lct_core::submodel::{all_submodels, anytime_select};
use lct_core::Error;

#[derive(Parser)]
#[command(name = "lct", version, about = "Local critic training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the main network and every sub-model of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Take the dataset from this config instead of the checkpoint's.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Cost and quality of each early-exit head; optionally pick one for a
    /// FLOP budget.
    Submodel {
        checkpoint: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// σ per group, loss gaps, gradient norm and a gradient check, as JSON.
    Probe {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Examples (or streams) in the probe batch.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            if e.is_numeric() {
                return 3;
            }
            return match e {
                Error::Config { .. } | Error::Dimension { .. } => 2,
                Error::NoFeasibleModel { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Eval { checkpoint, data, csv } => cmd_eval(&checkpoint, data.as_deref(), csv.as_deref()),
        Command::Submodel { checkpoint, budget, data } => cmd_submodel(&checkpoint, budget, data.as_deref()),
        Command::Probe {
            checkpoint,
            data,
            batch,
            eps,
            tol,
            coords,
            out,
        } => cmd_probe(&checkpoint, data.as_deref(), batch, eps, tol, coords, out.as_deref()),
    }
}

fn cmd_train(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output.dir = Some(o);
    }
    let data = RunData::load(&cfg)?;
    let outcome = train(&cfg, &data, cfg.output.dir.as_deref()).map_err(|e| {
        let step = match &e {
            Error::Worker { batch_id, .. } => format!(" at batch {batch_id}"),
            _ => String::new(),
        };
        anyhow::Error::new(e).context(format!("training stopped{step}"))
    })?;
    for h in outcome.final_eval() {
        println!("{:<6} {} {:.4}", h.head, metric_name(&data), h.eval.headline());
    }
    if let Some(p) = &outcome.pipeline {
        println!("messages conserved: {}", p.conserved());
    }
    if let Some(dir) = &cfg.output.dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn metric_name(data: &RunData) -> &'static str {
    match data {
        RunData::Classes { .. } => "accuracy",
        RunData::Chars { .. } => "bpc",
    }
}

/// Loads a checkpoint and the data to run it on.
fn open(path: &Path, data_cfg: Option<&Path>) -> Result<(Checkpoint, RunData)> {
    let ck = checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut cfg = match data_cfg {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ck.config.clone(),
    };
    // Streams are cut per batch size, which must match the checkpoint run.
    cfg.train.batch_size = ck.config.train.batch_size;
    let data = RunData::load(&cfg)?;
    check_compatible(ck.trainer.arch(), &data)?;
    Ok((ck, data))
}

fn cmd_eval(path: &Path, data_cfg: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let (ck, data) = open(path, data_cfg)?;
    let heads = evaluate_heads(&ck.trainer.snapshot(), &data, true)?;
    let mut table = format!("head,depth,loss,{}\n", metric_name(&data));
    for h in &heads {
        table.push_str(&format!("{},{},{},{}\n", h.head, h.depth, h.eval.loss, h.eval.headline()));
    }
    print!("{table}");
    if let Some(p) = csv {
        std::fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_submodel(path: &Path, budget: Option<u64>, data_cfg: Option<&Path>) -> Result<()> {
    let (ck, data) = open(path, data_cfg)?;
    let model = ck.trainer.snapshot();
    let subs = all_submodels(&model)?;
    let n = subs.len();
    println!("depth,head,{},flops,params,critic_flops_pct,critic_params_pct", metric_name(&data));
    for s in &subs {
        let e = data.evaluate(&s.net)?;
        let c = s.complexity;
        println!(
            "{},{},{},{},{},{:.2},{:.2}",
            s.depth,
            head_name(s.depth - 1, n),
            e.headline(),
            c.flops,
            c.params,
            c.critic_flops_pct(),
            c.critic_params_pct()
        );
    }
    if let Some(b) = budget {
        let s = anytime_select(&subs, b)?;
        println!("selected {} (depth {}, {} FLOPs)", head_name(s.depth - 1, n), s.depth, s.complexity.flops);
    }
    Ok(())
}

fn cmd_probe(path: &Path, data_cfg: Option<&Path>, batch: usize, eps: f64, tol: f64, coords: usize, out: Option<&Path>) -> Result<()> {
    let (ck, data) = open(path, data_cfg)?;
    let model = ck.trainer.snapshot();
    let (xs, ys) = data.probe_batch(batch, ProbeSource::Test)?;
    let report = probe(&model, &xs, &ys, ck.trainer.steps_done())?;
    let check = grad_check(&model, &xs, &ys, eps, tol, coords, ck.config.seed)?;
    let json = serde_json::json!({
        "step": ck.trainer.steps_done(),
        "batch_size": report.sigma.batch_size,
        "sigma": report.sigma.sigma,
        "sigma_non_positive": report.sigma.non_positive(),
        "head_losses": report.head_losses,
        "loss_gaps": report.loss_gaps,
        "grad_norm_sq": report.grad_norm_sq,
        "group_grad_norm_sq": report.group_grad_norm_sq,
        "grad_check": {
            "eps": check.eps,
            "tol": check.tol,
            "passed": check.passed(),
            "max_rel_err": check.max_rel_err(),
            "blocks": check.blocks,
        },
    });
    let text = serde_json::to_string_pretty(&json)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
