//! `zseg`: weakly supervised 3D cell segmentation pipeline.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use zseg::config::{PipelineConfig, CONFIG_ENV};
use zseg::error::{Error, Result};
use zseg::manifest::{DatasetManifest, Split};
use zseg::net::Stage;
use zseg::pipeline;
use zseg::synth::generate_dataset;
use zseg::volume::read_volume;

#[derive(Parser)]
#[command(name = "zseg", version, about = "Weakly supervised 3D cell instance segmentation from centroid annotations")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Seed for every stochastic stage; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Build centre-likelihood targets from centroid annotations.
    Centermap {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the stage-one centre regressor.
    TrainS1 {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint directory (default: <dataset>/models/s1).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive pseudo labels from peak responses of the stage-one model.
    Prm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the stage-two segmenter on pseudo labels.
    TrainS2 {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_s1: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict foreground, likelihood and instances.
    Infer {
        #[arg(long)]
        model_s1: Option<PathBuf>,
        #[arg(long)]
        model_s2: Option<PathBuf>,
        /// A single volume.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        volume: Option<PathBuf>,
        /// Every entry of a split of a dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions of the validation entries.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Render one slice as PNG, optionally with instance contours.
    Plot {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Argument(_) => 2,
        Error::PipelineOrder { .. } => 3,
        Error::Storage { .. } | Error::Format { .. } | Error::NoMarkers | Error::Runtime(_) => 4,
    }
}

fn model_dir(arg: Option<PathBuf>, m: Option<&DatasetManifest>, cfg: &PipelineConfig, stage: Stage) -> Result<PathBuf> {
    match (arg, m) {
        (Some(p), _) => Ok(p),
        (None, Some(m)) => Ok(pipeline::default_model_dir(m, cfg, stage)),
        (None, None) => Err(Error::Argument(format!("a {stage:?} model directory is required"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let load = |p: &Path| DatasetManifest::load(p);
    match cli.command {
        Command::GenSynth { out, n } => {
            let m = generate_dataset(&cfg.synth, n, &out)?;
            println!("wrote {} samples to {}", m.entries.len(), out.display());
        }
        Command::Centermap { manifest } => {
            let m = load(&manifest)?;
            let n = pipeline::run_centermap(&m, &cfg)?;
            println!("wrote {n} centre maps");
        }
        Command::TrainS1 { manifest, out } => {
            let m = load(&manifest)?;
            let dir = model_dir(out, Some(&m), &cfg, Stage::S1)?;
            let o = pipeline::run_train_s1(&m, &cfg, &dir)?;
            println!("stage-one model (epoch {}) saved to {}", o.best_epoch, dir.display());
        }
        Command::Prm { manifest, model } => {
            let m = load(&manifest)?;
            let dir = model_dir(model, Some(&m), &cfg, Stage::S1)?;
            let n = pipeline::run_prm(&m, &cfg, &dir)?;
            println!("wrote {n} pseudo labels");
        }
        Command::TrainS2 { manifest, model_s1, out } => {
            let m = load(&manifest)?;
            let s1 = model_dir(model_s1, Some(&m), &cfg, Stage::S1)?;
            let dir = model_dir(out, Some(&m), &cfg, Stage::S2)?;
            let o = pipeline::run_train_s2(&m, &cfg, &s1, &dir)?;
            println!("stage-two model (epoch {}) saved to {}", o.best_epoch, dir.display());
        }
        Command::Infer { model_s1, model_s2, volume, manifest, split, out } => {
            let m = manifest.as_deref().map(load).transpose()?;
            let s1 = model_dir(model_s1, m.as_ref(), &cfg, Stage::S1)?;
            let s2 = model_dir(model_s2, m.as_ref(), &cfg, Stage::S2)?;
            match (volume, m) {
                (Some(v), _) => {
                    let dir = out.unwrap_or_else(|| PathBuf::from("."));
                    let p = pipeline::run_infer_volume(&cfg, &s1, &s2, &v, &dir)?;
                    println!("wrote {}", p.instances.display());
                }
                (None, Some(m)) => {
                    let dir = out.unwrap_or_else(|| pipeline::default_prediction_dir(&m, &cfg));
                    let split = match split {
                        SplitArg::Train => Some(Split::Train),
                        SplitArg::Validation => Some(Split::Validation),
                        SplitArg::All => None,
                    };
                    let n = pipeline::run_infer_manifest(&m, &cfg, &s1, &s2, &dir, split)?;
                    println!("wrote predictions for {n} volumes to {}", dir.display());
                }
                (None, None) => unreachable!("clap requires --volume or --manifest"),
            }
        }
        Command::Eval { manifest, pred_dir } => {
            let m = load(&manifest)?;
            let dir = pred_dir.unwrap_or_else(|| pipeline::default_prediction_dir(&m, &cfg));
            let (reports, mean) = pipeline::run_eval(&m, &dir)?;
            for r in &reports {
                println!("{}\tIoU {:.4}\tSEG {:.4}\tMUCov {:.4}", r.id, r.iou, r.seg, r.mucov);
            }
            println!("mean\tIoU {:.4}\tSEG {:.4}\tMUCov {:.4}", mean.iou, mean.seg, mean.mucov);
            println!("wrote {}", dir.join(pipeline::EVAL_CSV).display());
        }
        Command::Plot { volume, labels, slice, out } => {
            let v = read_volume(&volume)?.into_f32();
            let l = labels.map(|p| read_volume(p).map(|a| a.into_labels())).transpose()?;
            let img = plot::render_slice(&v, l.as_ref(), slice)?;
            plot::write_png(&img, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
