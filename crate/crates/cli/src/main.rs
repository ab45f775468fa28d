//! `adaptwin`: toy-model generation, compression, layer-wise fine-tuning and
//! evaluation from a TOML run config.

use std::path::PathBuf;
use std::process::ExitCode;

use adaptwin::pipeline::RunConfig;
use adaptwin::Error;
use clap::{Parser, Subcommand};

mod stages;

use stages::Workspace;

#[derive(Debug, Parser)]
#[command(name = "adaptwin", version, about = "Joint low-rank compression and layer-wise fine-tuning of toy transformers")]
struct Cli {
    /// TOML run config; defaults are used for anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory (overrides `paths.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Source checkpoint (overrides `paths.source`).
    #[arg(long, global = true)]
    source: Option<PathBuf>,

    /// Fine-tuning worker threads (1 = sequential).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Recompute stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a random toy transformer (`source.adpt`).
    GenToy,
    /// Train the toy model end to end on a synthetic task (`trained.adpt`).
    TrainToy {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Capture per-layer hidden-state pairs from the source model.
    Capture,
    /// Print the rank plan and its parameter accounting.
    Plan {
        /// Fraction of attention and feed-forward weights to remove.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Compress the source model without fine-tuning (`svd.adpt`).
    Compress,
    /// Compress and fine-tune every planned layer (`finetuned.adpt`).
    Finetune,
    /// Post-training int8 quantization of the fine-tuned model (`quantized.adpt`).
    Quantize,
    /// Choose which compressed slots are active (`assembled.adpt`).
    Assemble {
        /// Checkpoint with compressed slots; `finetuned.adpt` by default.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Layers that run compressed, comma separated; every compressed slot when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Evaluate against the source model. Without `--model`, compares the
    /// SVD-only and fine-tuned models (`eval.adpt`).
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Successive-layer and rank sweeps (`sweep.adpt`).
    Sweep {
        /// Skip the rank sweep, which fine-tunes one model per point.
        #[arg(long)]
        successive_only: bool,
    },
    /// Print a report, checkpoint or pair-set container.
    Report { path: PathBuf },
    /// capture → plan → compress → fine-tune → assemble → eval. Requires `--seed`.
    Pipeline,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
}

/// Exit status per error category; 2 is left to clap's usage errors.
fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 3,
        "plan" | "rank" => 4,
        "input" => 5,
        "format" => 6,
        "io" => 7,
        "training" | "numerical" => 8,
        "shape" | "assembly" => 9,
        _ => 1,
    }
}

fn load_config(cli: &Cli, extra: &[(String, String)]) -> Result<RunConfig, Error> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|source| Error::Io {
            path: Some(p.clone()),
            source,
        })?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(w) = cli.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    overrides.extend_from_slice(extra);
    let mut cfg = RunConfig::from_toml(&text, &overrides)?;
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(src) = &cli.source {
        cfg.paths.source = Some(src.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::Report { path } = &cli.command {
        print!("{}", stages::describe(path)?);
        return Ok(());
    }
    let mut extra = Vec::new();
    match &cli.command {
        Command::TrainToy { task, steps } => {
            if let Some(t) = task {
                let name = match t {
                    TaskArg::Copy => "copy",
                    TaskArg::Reverse => "reverse",
                };
                extra.push(("toy.task".to_string(), format!("\"{name}\"")));
            }
            if let Some(s) = steps {
                extra.push(("toy.steps".to_string(), s.to_string()));
            }
        }
        Command::Plan { target: Some(t) } => {
            extra.push(("plan.target".to_string(), t.to_string()));
        }
        Command::Pipeline if cli.seed.is_none() => {
            return Err(Error::Config("pipeline runs require an explicit --seed".into()));
        }
        _ => {}
    }
    let cfg = load_config(&cli, &extra)?;
    let ws = Workspace::open(cfg, cli.force)?;
    match cli.command {
        Command::GenToy => ws.gen_toy().map(|_| ()),
        Command::TrainToy { .. } => ws.train_toy().map(|_| ()),
        Command::Capture => ws.capture().map(|_| ()),
        Command::Plan { .. } => ws.plan(),
        Command::Compress => ws.compress().map(|_| ()),
        Command::Finetune => ws.finetune().map(|_| ()),
        Command::Quantize => ws.quantize(),
        Command::Assemble { from, layers } => ws.assemble(from, layers),
        Command::Eval { model: Some(m) } => ws.eval_checkpoint(&m),
        Command::Eval { model: None } => ws.eval().map(|_| ()),
        Command::Sweep { successive_only } => ws.sweep(!successive_only),
        Command::Pipeline => ws.pipeline(),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
