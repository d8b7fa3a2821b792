use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ggnet::config::RunConfig;
use ggnet::run::{self, Split};
use ggnet::{verify, Error};

#[derive(Parser)]
#[command(name = "ggnet", version, about = "Guided non-local segmentation on synthetic ultrasound phantoms")]
struct Cli {
    /// TOML run configuration. Every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy, Default)]
struct Ablation {
    /// Drop both guidance blocks.
    #[arg(long)]
    no_ggb: bool,
    /// Drop the boundary heads and their loss terms.
    #[arg(long)]
    no_bd: bool,
    /// Keep the non-local blocks but remove their guidance gating.
    #[arg(long)]
    no_guidance: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write a synthetic phantom dataset to the data root.
    Generate {
        /// Number of phantoms (defaults to data.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on the train split.
    Train {
        #[command(flatten)]
        ablation: Ablation,
        /// Continue from the variant's saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write per-image CSV and JSON summaries.
    Eval {
        #[command(flatten)]
        ablation: Ablation,
        /// Defaults to the configured variant's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Segment one grayscale PNG.
    Infer {
        #[command(flatten)]
        ablation: Ablation,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the gradient, normalization, identity and metric checks.
    Verify {
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Corrupt softmax normalization to confirm the checks catch it.
        #[arg(long, hide = true)]
        inject_softmax_fault: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_INTERNAL: u8 = 1;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Phantom(_) | Error::LayerCount { .. } => EXIT_CONFIG,
        Error::MissingPair { .. } | Error::Format { .. } | Error::Io { .. } | Error::Checkpoint(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::UndefinedMetric(_) => EXIT_NUMERIC,
        Error::Tensor(_) | Error::Param(_) => EXIT_INTERNAL,
    }
}

impl Ablation {
    fn apply(self, cfg: &mut RunConfig) {
        if self.no_ggb {
            cfg.model.spatial_ggb = false;
            cfg.model.channel_ggb = false;
        }
        if self.no_bd {
            cfg.model.bd = false;
        }
        if self.no_guidance {
            cfg.model.guidance = false;
        }
    }
}

fn load_config(cli: &Cli) -> ggnet::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> ggnet::Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Generate { count } => {
            let n = count.unwrap_or(cfg.data.count);
            let root = run::generate(&cfg, n)?;
            println!("wrote {n} phantoms to {}", root.display());
        }
        Command::Train { ablation, resume } => {
            ablation.apply(&mut cfg);
            let total = cfg.train.epochs;
            let out = run::train(&cfg, resume, |l| {
                println!(
                    "epoch {}/{total}  lr {:.2e}  loss {:.5}  final {:.5}  steps {}",
                    l.epoch, l.lr, l.loss, l.final_seg, l.steps
                )
            })?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::Eval { ablation, checkpoint, split } => {
            ablation.apply(&mut cfg);
            let ck = checkpoint.unwrap_or_else(|| run::default_checkpoint(&cfg));
            let out = run::eval(&cfg, &ck, split)?;
            for s in &out.report.overall {
                let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
                println!("{:<10} mean {}  std {}  (n={}, undefined={})", s.metric, fmt(s.mean), fmt(s.std), s.count, s.missing);
            }
            println!("wrote {} and {}", out.csv.display(), out.json.display());
        }
        Command::Infer { ablation, checkpoint, input } => {
            ablation.apply(&mut cfg);
            let ck = checkpoint.unwrap_or_else(|| run::default_checkpoint(&cfg));
            println!("wrote {}", run::infer(&cfg, &ck, &input)?.display());
        }
        Command::Verify { json, inject_softmax_fault } => {
            ggnet::tensor::set_softmax_fault(inject_softmax_fault);
            let report = verify::run_all();
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                println!("{report}");
            }
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
