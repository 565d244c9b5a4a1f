use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skinseg::checkpoint;
use skinseg::config::TrainConfig;
use skinseg::dataset::Split;
use skinseg::network::parameter_count;
use skinseg::pipeline::{self, PartsSource};
use skinseg::synth::{NoiseConfig, SynthConfig};
use skinseg::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "skinseg", version, about = "Skin segmentation with body-part attention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of part masks named after the image stems
    #[arg(long, global = true)]
    parts_dir: Option<PathBuf>,
    /// Check inputs and configuration without writing anything
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model
    Train {
        /// Dataset root with train/ and val/ splits
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Segment a single image
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Part mask PNG for the image (otherwise looked up in --parts-dir)
        #[arg(long)]
        parts: Option<PathBuf>,
        /// Rescale inputs that do not match the model size
        #[arg(long)]
        resize: bool,
    },
    /// Recursive label refinement with a direct-training baseline
    Relabel {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate a synthetic dataset
    Synth {
        /// Training scenes; validation and test get a quarter each
        #[arg(long, default_value_t = 200)]
        num: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.75)]
        noise_iou_target: f64,
    },
}

fn load_config(common: &Common, data: Option<PathBuf>, epochs: Option<usize>) -> skinseg::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::InvalidConfig(e.to_string()),
            other => other,
        })?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = &common.parts_dir {
        cfg.parts_dir = Some(p.clone());
    }
    if data.is_some() {
        cfg.data_dir = data;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(msg: String) {
    eprintln!("{msg}");
}

fn run(command: Command, common: Common) -> skinseg::Result<()> {
    match command {
        Command::Train { data, epochs } => {
            let cfg = load_config(&common, data, epochs)?;
            let out = pipeline::cmd_train(&cfg, common.dry_run, &mut log)?;
            match out.report {
                Some(r) => print!("{}", r.to_text()),
                None => println!("dry run ok: {} parameters", out.params),
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
        } => {
            let cfg = load_config(&common, data, None)?;
            let split: Split = split.parse()?;
            let root = cfg.require_data_dir()?;
            if common.dry_run {
                let model = checkpoint::load(&ckpt)?;
                let idx = skinseg::dataset::load_dataset_with(root, split, cfg.parts_dir.as_deref())?;
                println!(
                    "dry run ok: {} parameters, {} {split} records",
                    parameter_count(&model),
                    idx.len()
                );
                return Ok(());
            }
            let r = pipeline::cmd_eval(&ckpt, root, split, cfg.parts_dir.as_deref(), &cfg.out_dir, &mut log)?;
            print!("{}", r.to_text());
        }
        Command::Infer {
            checkpoint: ckpt,
            image,
            parts,
            resize,
        } => {
            let source = match (parts, &common.parts_dir) {
                (Some(p), _) => PartsSource::File(p),
                (None, Some(d)) => PartsSource::Dir(d.clone()),
                (None, None) => {
                    return Err(Error::InvalidConfig("infer needs --parts or --parts-dir".into()));
                }
            };
            if common.dry_run {
                let model = checkpoint::load(&ckpt)?;
                println!("dry run ok: {} parameters", parameter_count(&model));
                return Ok(());
            }
            let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let out = pipeline::cmd_infer(&ckpt, &image, &source, &out_dir, resize)?;
            println!("mask: {}\nattention: {}", out.mask.display(), out.attention.display());
        }
        Command::Relabel { data, epochs } => {
            let cfg = load_config(&common, data, epochs)?;
            if common.dry_run {
                let out = pipeline::cmd_train(&cfg, true, &mut log)?;
                println!("dry run ok: {} parameters", out.params);
                return Ok(());
            }
            let s = pipeline::cmd_relabel(&cfg, &mut log)?;
            println!("recursive {}", s.recursive.csv_row());
            println!("direct    {}", s.direct.csv_row());
            println!("final generation {}", s.state.final_generation.unwrap_or(0));
        }
        Command::Synth {
            num,
            size,
            noise_iou_target,
        } => {
            let cfg = SynthConfig {
                noise: NoiseConfig {
                    iou_target: Some(noise_iou_target),
                    ..NoiseConfig::default()
                },
                ..SynthConfig::with_num(num, size, common.seed.unwrap_or(0))
            };
            cfg.noise.validate()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data/synth"));
            if common.dry_run {
                println!(
                    "dry run ok: {} train / {} val / {} test scenes at {size}x{size} into {}",
                    cfg.num_train,
                    cfg.num_val,
                    cfg.num_test,
                    out.display()
                );
                return Ok(());
            }
            let s = pipeline::cmd_synth(&cfg, &out)?;
            println!("train noise IoU {:.4}", s.train_noise_iou);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.common.clone();
    match run(cli.command, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
