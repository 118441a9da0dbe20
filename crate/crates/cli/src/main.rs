use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use mitopeft::config::RunConfig;
use mitopeft::pipeline::{cmd_evaluate, cmd_predict, cmd_report, cmd_split, cmd_train, PredictInput};
use mitopeft::synth::{generate, SynthConfig};
use mitopeft::zoo::{list_backbones, WEIGHTS_DIR_ENV};
use mitopeft::Exec;

#[derive(Parser)]
#[command(name = "mitopeft", version, about = "LoRA fine-tuning of ViT backbones for atypical mitotic figure classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long, short)]
    config: PathBuf,
    /// Seed for both the split and training
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "parallel")]
    exec: ExecArg,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, Exec)> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            // relative to the working directory, not the config file
            cfg.output_dir = Some(std::path::absolute(out)?);
        }
        let exec = match self.exec {
            ExecArg::Parallel => Exec::Parallel,
            ExecArg::Sequential => Exec::Sequential,
        };
        Ok((cfg, exec))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Assign source images to cross-validation folds
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train one fold, or every fold
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Out-of-fold evaluation, threshold selection and domain-wise reports
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Extra thresholds to report (repeatable)
        #[arg(long)]
        threshold: Vec<f64>,
    },
    /// Fold-ensemble predictions
    Predict {
        #[command(flatten)]
        common: Common,
        /// Decision threshold; defaults to the config, then the evaluated optimum
        #[arg(long)]
        threshold: Option<f64>,
        /// Manifest of crops to score (defaults to the run manifest)
        #[arg(long, conflicts_with = "images")]
        manifest: Option<PathBuf>,
        /// Directory of crop images to score
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Summarize the artifacts in the output directory
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic crop dataset with a manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        crops: usize,
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 0.25)]
        amf_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List registered backbones
    Backbones,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { common } => {
            let (cfg, _) = common.load()?;
            let summary = cmd_split(&cfg)?;
            print!("{}", summary.to_table());
        }
        Command::Train { common, fold } => {
            let (cfg, exec) = common.load()?;
            for s in cmd_train(&cfg, fold, exec)? {
                println!(
                    "fold {}: best epoch {} of {}, val BAC {}, {} trainable of {} parameters",
                    s.fold,
                    s.best_epoch,
                    s.epochs_run,
                    s.best_val.balanced_accuracy.map_or("-".into(), |b| format!("{b:.4}")),
                    s.trainable_params,
                    s.total_params
                );
            }
        }
        Command::Evaluate { common, threshold } => {
            let (cfg, exec) = common.load()?;
            let eval = cmd_evaluate(&cfg, &threshold, exec)?;
            print!("{}", eval.to_text());
        }
        Command::Predict { common, threshold, manifest, images } => {
            let (cfg, exec) = common.load()?;
            let input = match (manifest, images) {
                (Some(m), _) => PredictInput::Manifest(m),
                (None, Some(dir)) => PredictInput::Directory(dir),
                (None, None) => PredictInput::RunManifest,
            };
            let s = cmd_predict(&cfg, &input, threshold, exec)?;
            println!(
                "{} crops scored by {} members at τ = {:.2}; {} predicted AMF",
                s.crops, s.members, s.threshold, s.predicted_amf
            );
        }
        Command::Report { common } => {
            let (cfg, _) = common.load()?;
            print!("{}", cmd_report(&cfg)?);
        }
        Command::Synth { out, crops, images, domains, amf_fraction, seed } => {
            let cfg = SynthConfig { n_crops: crops, n_images: images, n_domains: domains, amf_fraction, seed, ..SynthConfig::default() };
            let m = generate(&out, &cfg)?;
            println!("wrote {} crops to {}", m.len(), out.join("manifest.csv").display());
        }
        Command::Backbones => {
            for b in list_backbones() {
                let weights = match &b.gated_source {
                    Some(src) => format!("external ({src}; set {WEIGHTS_DIR_ENV} or `weights`)"),
                    None => "built-in random".to_string(),
                };
                println!("{:<10} {:<9} {:>5}M params  {}", b.name, b.architecture, b.base_param_count() / 1_000_000, weights);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
