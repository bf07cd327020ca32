use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rtgen_cli::commands::{cmd_eval, cmd_gen, cmd_infer, cmd_sweep, cmd_train, SweepAxis};
use rtgen_cli::config::RunConfig;
use rtgen_cli::error::{CliError, CliResult, EXIT_CONFIG};
use rtgen_core::model::Decode;
use rtgen_core::train::TrainConfig;

#[derive(Parser)]
#[command(name = "rtgen", version, about = "Generative object detection on synthetic scenes")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (for `gen`: first training scene seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `infer`: output file, default stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Batch 1, warmup and cosine decay (the default).
    Desk,
    /// Batch 16 at a constant 1e-4.
    LargeBatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Viterbi,
    Greedy,
}

impl From<DecodeArg> for Decode {
    fn from(d: DecodeArg) -> Self {
        match d {
            DecodeArg::Viterbi => Decode::Viterbi,
            DecodeArg::Greedy => Decode::Greedy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    TextTokens,
    DecoderLayers,
}

/// Overrides applied on top of the config file.
#[derive(clap::Args, Clone)]
struct TrainFlags {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Dataset root holding `train/` and `val/`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and val splits of synthetic scenes.
    Gen,
    /// Train, scoring the val split after every epoch.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from `last.rtgk` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (one split).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "viterbi")]
        decode: DecodeArg,
    },
    /// Detect objects in one PPM image and print them as JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "viterbi")]
        decode: DecodeArg,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Minimum objectness.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Train one model per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

fn apply_flags(cfg: &mut RunConfig, flags: &TrainFlags, seed: Option<u64>) {
    if let Some(Preset::LargeBatch) = flags.preset {
        cfg.train = TrainConfig { epochs: cfg.train.epochs, seed: cfg.train.seed, loss: cfg.train.loss, ..TrainConfig::large_batch() };
    }
    if let Some(Preset::Desk) = flags.preset {
        cfg.train = TrainConfig { epochs: cfg.train.epochs, seed: cfg.train.seed, loss: cfg.train.loss, ..TrainConfig::default() };
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &flags.data {
        cfg.paths.data_dir = d.clone();
    }
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen => {
            if let Some(s) = cli.seed {
                cfg.data.train_seed = s;
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            print(&cmd_gen(&cfg, &out)?);
        }
        Command::Train { flags, resume } => {
            apply_flags(&mut cfg, flags, cli.seed);
            if let Some(o) = &cli.out {
                cfg.paths.out_dir = o.clone();
            }
            cfg.validate()?;
            print(&cmd_train(&cfg, &cfg.paths.data_dir, &cfg.paths.out_dir, *resume)?);
        }
        Command::Eval { checkpoint, data, decode } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
            print(&cmd_eval(checkpoint, data, &out, (*decode).into())?);
        }
        Command::Infer { checkpoint, image, decode, topk, threshold } => {
            let records = cmd_infer(checkpoint, image, (*decode).into(), *topk, *threshold)?;
            let text = serde_json::to_string_pretty(&records).expect("detections serialize");
            match &cli.out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
        }
        Command::Sweep { flags, axis, values } => {
            apply_flags(&mut cfg, flags, cli.seed);
            if let Some(o) = &cli.out {
                cfg.paths.out_dir = o.clone();
            }
            let axis = match axis {
                AxisArg::TextTokens => SweepAxis::TextTokens,
                AxisArg::DecoderLayers => SweepAxis::DecoderLayers,
            };
            for row in cmd_sweep(&cfg, &cfg.paths.data_dir, &cfg.paths.out_dir, axis, values)? {
                print(&row);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::Config(e.to_string().trim().to_string()).line());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
