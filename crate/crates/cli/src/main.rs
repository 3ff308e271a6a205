use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sidforge::alignment::DpoTarget;
use sidforge::config::RunConfig;
use sidforge::pipeline;
use sidforge::tokenizer::TaskContext;

#[derive(Debug, Parser)]
#[command(name = "sidforge", version, about = "Semantic-ID generative recommendation pipeline")]
struct Cli {
    /// Run configuration (JSON). Defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 lets rayon decide.
    #[arg(long, global = true, env = "SIDFORGE_THREADS")]
    threads: Option<usize>,

    /// Fail instead of repairing when capacity cannot be met.
    #[arg(long, global = true)]
    strict_capacity: bool,

    /// Run directory holding all artifacts.
    #[arg(long, global = true, visible_alias = "out")]
    dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and interaction log.
    GenData,
    /// Build semantic IDs with capacity-constrained residual quantization.
    Quantize(QuantizeArgs),
    /// Exposure concentration and conditional-entropy report.
    Analyze,
    /// Token sequences, train/eval samples and request contexts.
    BuildSeqs,
    /// Next-token-prediction training of the scorer.
    Train(TrainArgs),
    /// Joint reward-weighted and preference fine-tuning.
    Align(AlignArgs),
    /// Trie-constrained beam search for held-out requests.
    Decode(DecodeArgs),
    /// Token and beam-search hit ratios on the held-out split.
    Eval(EvalArgs),
    /// Attribute-chain and quantizer ablation grid.
    Ablate,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Capacity tolerance; `none` disables the constraint.
    #[arg(long)]
    tau: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    lambda_rft: Option<f64>,
    #[arg(long)]
    lambda_dpo: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    c_clip: Option<f64>,
    #[arg(long)]
    pairs_per_request: Option<usize>,
    /// `last-sid` or `all-steps`.
    #[arg(long)]
    dpo_target: Option<DpoTarget>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Task as `objective:scene`, applied to every request.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    beam_width: Option<usize>,
}

fn parse_task(s: &str) -> Result<TaskContext> {
    match s.split_once(':') {
        Some((o, sc)) if !o.is_empty() && !sc.is_empty() => Ok(TaskContext::new(o, sc)),
        _ => bail!("--task expects objective:scene, got {s:?}"),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.strict_capacity {
        cfg.quantizer.strict = true;
    }
    if let Some(dir) = &cli.dir {
        cfg.paths.dir = dir.clone();
    }
    match &cli.command {
        Command::Quantize(a) => {
            if let Some(tau) = &a.tau {
                cfg.quantizer.tau = match tau.as_str() {
                    "none" => None,
                    t => Some(t.parse().with_context(|| format!("--tau expects a number or none, got {t:?}"))?),
                };
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.scorer.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.scorer.optimizer.lr = lr;
            }
        }
        Command::Align(a) => {
            let al = &mut cfg.alignment;
            if let Some(v) = a.lambda_rft {
                al.lambda_rft = v;
            }
            if let Some(v) = a.lambda_dpo {
                al.lambda_dpo = v;
            }
            if let Some(v) = a.beta {
                al.beta = v;
            }
            if let Some(v) = a.c_clip {
                al.reward.c_clip = v;
            }
            if let Some(v) = a.pairs_per_request {
                al.pairs_per_request = v;
            }
            if let Some(v) = a.dpo_target {
                al.dpo_target = v;
            }
            if let Some(v) = a.epochs {
                al.epochs = v;
            }
        }
        Command::Decode(a) => {
            if let Some(v) = a.beam_width {
                cfg.decoder.beam_width = v;
            }
            if let Some(v) = a.top_k {
                cfg.decoder.top_k = v;
            }
            if let Some(t) = &a.task {
                cfg.decoder.task = Some(parse_task(t)?);
            }
        }
        Command::Eval(a) => {
            if let Some(v) = a.beam_width {
                cfg.decoder.beam_width = v;
                cfg.decoder.top_k = cfg.decoder.top_k.min(v);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli)?;
    let dir = cfg.paths.dir.clone();
    let out = |v: serde_json::Value| println!("{v}");
    match cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, &dir)?;
            out(serde_json::json!({"stage": "gen-data", "dir": dir}));
        }
        Command::Quantize(_) => {
            pipeline::quantize(&cfg, &dir)?;
            out(serde_json::json!({"stage": "quantize", "dir": dir}));
        }
        Command::Analyze => {
            let rep = pipeline::analyze(&cfg, &dir)?;
            let top1: Vec<f64> = rep.exposure.levels.iter().map(|l| l.top_1pct).collect();
            let delta: Vec<f64> = rep.entropy.layers.iter().map(|l| l.delta).collect();
            out(serde_json::json!({"stage": "analyze", "top_1pct_by_depth": top1, "entropy_delta_bits": delta}));
        }
        Command::BuildSeqs => {
            pipeline::build_seqs(&cfg, &dir)?;
            out(serde_json::json!({"stage": "build-seqs", "dir": dir}));
        }
        Command::Train(_) => {
            let ckpt = pipeline::train(&cfg, &dir)?;
            out(serde_json::json!({"stage": "train", "final_loss": ckpt.loss_trace.last()}));
        }
        Command::Align(_) => {
            let ckpt = pipeline::align(&cfg, &dir)?;
            out(serde_json::json!({"stage": "align", "final_loss": ckpt.loss_trace.last()}));
        }
        Command::Decode(_) => {
            let cands = pipeline::decode(&cfg, &dir)?;
            out(serde_json::json!({"stage": "decode", "candidates": cands.len()}));
        }
        Command::Eval(_) => {
            let rep = pipeline::eval(&cfg, &dir)?;
            out(serde_json::to_value(&rep)?);
        }
        Command::Ablate => {
            let rep = pipeline::ablate(&cfg, &dir)?;
            out(serde_json::to_value(&rep)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
