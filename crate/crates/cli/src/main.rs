use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panscope::config::PipelineConfig;
use panscope::pipeline::{self, EvalInputs, PipelineError};

#[derive(Debug, Parser)]
#[command(name = "panscope", version, about = "Cavity panorama stitching and lesion detection")]
struct Cli {
    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene, its ground truth and a detector dataset.
    Synth,
    /// Stitch a directory of frames into a panorama.
    Stitch { frames: PathBuf },
    /// Bake frames with known poses into the double-cube atlas.
    Unfold { frames: PathBuf, poses: PathBuf },
    /// Train the detector on `DATASET/train`.
    Train { dataset: PathBuf },
    /// Run a trained detector on one image.
    Detect { model: PathBuf, image: PathBuf },
    /// Evaluate stitching and detection artifacts.
    Eval {
        /// Directory written by `synth`.
        #[arg(long)]
        synth: Option<PathBuf>,
        /// Directory written by `stitch`.
        #[arg(long)]
        stitch: Option<PathBuf>,
        /// Model written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print every configuration key with its current value.
    Config,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Io {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?;
            PipelineConfig::parse(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Synth => {
            pipeline::run_synth(&cfg, &out("synth_out"))?;
        }
        Command::Stitch { frames } => {
            let s = pipeline::run_stitch(&cfg, &frames, &out("stitch_out"))?;
            log::info!("{} frames, final loss {:?}", s.frames.len(), s.loss_trace.last());
        }
        Command::Unfold { frames, poses } => pipeline::run_unfold(&cfg, &frames, &poses, &out("unfold_out"))?,
        Command::Train { dataset } => {
            pipeline::run_train(&cfg, &dataset, &out("model.json"))?;
        }
        Command::Detect { model, image } => {
            let dets = pipeline::run_detect(&cfg, &model, &image, &out("detections.json"))?;
            log::info!("{} detections", dets.len());
        }
        Command::Eval { synth, stitch, model } => {
            let r = pipeline::run_eval(&cfg, &EvalInputs { synth, stitch, model }, &out("eval_out"))?;
            print!("{}", r.to_table());
        }
        Command::Config => print!("{}", cfg.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
