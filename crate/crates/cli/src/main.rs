use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmc_core::config::{Arm, ExperimentConfig, Preset};
use cmc_core::data::{Dataset, GeneratorParams};
use cmc_core::error::ErrorCategory;
use cmc_core::experiment::{self, Report, ReportPoint};
use cmc_core::par::{self, ExecMode};
use cmc_core::train::{self, CheckpointMeta, FinetuneOptions};
use cmc_core::{verify, CmcError, Modality, Result};

#[derive(Parser)]
#[command(name = "cmc", version, about = "Contrastive multiview pretraining for SAR building segmentation")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; the built-in desk config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `generate`.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 64)]
        extent: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Radar difficulty in [0,1].
        #[arg(long)]
        difficulty: Option<f64>,
    },
    /// Contrastive pretraining with the configured preset.
    Pretrain(RunArgs),
    /// Segmentation finetuning, from scratch or from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pretrained checkpoint whose SAR encoder initialises the model.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Evaluate a segmentation checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finetune and evaluate every arm along the configured sweep axis.
    Sweep(RunArgs),
    /// Run the built-in oracle and gradient checks.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Random instances per gradient case.
        #[arg(long, default_value_t = 20)]
        rounds: usize,
    },
}

enum Outcome {
    Done,
    VerifyFailed,
}

fn exit_code(e: &CmcError) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("CMC_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => par::init_threads(n),
            _ => {
                eprintln!("error: CMC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    if cli.serial {
        par::set_mode(ExecMode::Serial);
    }
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(1),
        Err(e) => {
            let label = match e.category() {
                ErrorCategory::Config => "config",
                ErrorCategory::Data => "data",
                ErrorCategory::Numeric => "numeric",
                ErrorCategory::Internal => "internal",
            };
            eprintln!("{label} error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    match &args.config {
        Some(path) => ExperimentConfig::load(path, &args.overrides),
        None => ExperimentConfig::desk().with_overrides(&args.overrides),
    }
}

/// Resolved config, dataset and seed, with the config snapshot written.
fn prepare(run: &RunArgs) -> Result<(ExperimentConfig, Dataset, u64)> {
    let config = load_config(&run.config)?;
    let dataset = Dataset::load(&run.data)?;
    if dataset.manifest.extent != config.patch.extent {
        return Err(CmcError::Data(format!(
            "dataset extent {} differs from config extent {}",
            dataset.manifest.extent, config.patch.extent
        )));
    }
    std::fs::create_dir_all(&run.out)?;
    std::fs::write(run.out.join("config.json"), config.to_json_pretty())?;
    let seed = run.seed.unwrap_or(config.seeds[0]);
    Ok((config, dataset, seed))
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Generate { scenes, extent, seed, out, force, difficulty } => {
            generate(scenes, extent, seed, &out, force, difficulty)?;
        }
        Command::Pretrain(run) => pretrain(&run)?,
        Command::Finetune { run, weights, fraction } => finetune(&run, weights.as_deref(), fraction)?,
        Command::Evaluate { run, weights, split } => evaluate(&run, &weights, &split)?,
        Command::Sweep(run) => {
            let (config, dataset, _) = prepare(&run)?;
            let report = experiment::run_sweep(&config, &dataset)?;
            report.write(&run.out)?;
            print!("{}", report.to_csv());
        }
        Command::Verify { config, rounds } => return verify_all(&config, rounds),
    }
    Ok(Outcome::Done)
}

fn generate(scenes: usize, extent: usize, seed: u64, out: &Path, force: bool, difficulty: Option<f64>) -> Result<()> {
    if scenes < 2 {
        return Err(CmcError::Config(format!("--scenes must be at least 2 to allow a split, got {scenes}")));
    }
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(CmcError::Data(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out)?;
    }
    let mut params = GeneratorParams::default();
    if let Some(d) = difficulty {
        if !(0.0..=1.0).contains(&d) {
            return Err(CmcError::Config(format!("--difficulty {d} must lie in [0,1]")));
        }
        params.difficulty = d;
    }
    let dataset = Dataset::generate(scenes, extent, seed, params)?;
    dataset.save(out)?;
    println!("wrote {} scenes to {}", scenes, out.display());
    Ok(())
}

fn pretrain(run: &RunArgs) -> Result<()> {
    let (config, dataset, seed) = prepare(run)?;
    let preset = config.preset;
    let spec = config.encoder_for(preset);
    let meta = |state: &train::TrainState| CheckpointMeta {
        kind: "pretrain".into(),
        spec: spec.clone(),
        seed,
        step: state.step,
        epoch: state.epoch,
        preset: Some(preset),
        config_hash: config.hash(),
        content_hash: state.weights.content_hash(),
    };
    let every = config.pretrain.checkpoint_every;
    let patches = train::train_patches(&config, &dataset)?;
    let state = train::pretrain_on(&config, preset, &patches, seed, &mut |state| {
        if every > 0 && state.epoch % every == 0 && state.epoch < config.pretrain.epochs {
            let path = run.out.join(format!("pretrain_epoch{:04}.cmct", state.epoch));
            train::save_checkpoint(&path, &state.weights, &meta(state))?;
        }
        Ok(())
    })?;
    train::save_checkpoint(&run.out.join("pretrain.cmct"), &state.weights, &meta(&state))?;
    train::write_history(&run.out.join("loss.csv"), &state.history)?;
    let losses = state.train_losses();
    println!(
        "pretrained {preset} for {} epochs: loss {:.4} -> {:.4}",
        state.epoch,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn finetune(run: &RunArgs, weights: Option<&Path>, fraction: Option<f64>) -> Result<()> {
    let (config, dataset, seed) = prepare(run)?;
    let fraction = fraction.unwrap_or(config.data_fraction);
    cmc_core::config::check_fraction(fraction)?;
    let pretrained = weights.map(train::load_checkpoint).transpose()?;
    if let Some((_, meta)) = &pretrained {
        if meta.kind != "pretrain" {
            return Err(CmcError::SpecMismatch(format!("--weights expects a pretrain checkpoint, got {}", meta.kind)));
        }
    }
    let arm = match &pretrained {
        Some((_, meta)) => Arm::Pretrained(meta.preset.unwrap_or(Preset::Sar)),
        None => Arm::Random,
    };
    let state = train::finetune(
        &config,
        &dataset,
        seed,
        FinetuneOptions {
            pretrained: pretrained.as_ref().map(|(w, _)| (w, Modality::Sar)),
            fraction: Some(fraction),
            epochs: None,
            track_val: true,
        },
    )?;
    let spec = config.encoder_for(Preset::Sar);
    train::save_checkpoint(
        &run.out.join("model.cmct"),
        &state.weights,
        &CheckpointMeta {
            kind: "segmentation".into(),
            spec,
            seed,
            step: state.step,
            epoch: state.epoch,
            preset: match arm {
                Arm::Random => None,
                Arm::Pretrained(p) => Some(p),
            },
            config_hash: config.hash(),
            content_hash: state.weights.content_hash(),
        },
    )?;
    train::write_history(&run.out.join("loss.csv"), &state.history)?;
    let metrics = train::evaluate(&config, &dataset, &state.weights, "val")?;
    let mut report = Report::new("fraction", &config);
    report.push(ReportPoint {
        axis_value: fraction.to_string(),
        preset: arm.to_string(),
        seed,
        comparable: !matches!(arm, Arm::Pretrained(p) if p.uses_gt()),
        epoch: state.epoch,
        weights_hash: state.weights.content_hash(),
        metrics,
    });
    report.write(&run.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn evaluate(run: &RunArgs, weights: &Path, split: &str) -> Result<()> {
    let (config, dataset, _) = prepare(run)?;
    let (model, meta) = train::load_checkpoint(weights)?;
    if meta.kind != "segmentation" {
        return Err(CmcError::SpecMismatch(format!("--weights expects a segmentation checkpoint, got {}", meta.kind)));
    }
    let metrics = train::evaluate(&config, &dataset, &model, split)?;
    let arm = meta.preset.map(Arm::Pretrained).unwrap_or(Arm::Random);
    let mut report = Report::new("split", &config);
    report.push(ReportPoint {
        axis_value: split.to_string(),
        preset: arm.to_string(),
        seed: meta.seed,
        comparable: true,
        epoch: meta.epoch,
        weights_hash: model.content_hash(),
        metrics,
    });
    report.write(&run.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn verify_all(args: &ConfigArgs, rounds: usize) -> Result<Outcome> {
    // a supplied config must be valid even though the checks do not use it
    let config = load_config(args)?;
    let checks = verify::run_all(config.seeds[0], rounds.max(1))?;
    println!("{:<34} {:>6} {:>12} {:>10}  result", "check", "cases", "max dev", "tolerance");
    for c in &checks {
        println!(
            "{:<34} {:>6} {:>12.3e} {:>10.1e}  {}",
            c.name,
            c.cases,
            c.max_deviation,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(Outcome::Done)
    } else {
        for c in failed {
            eprintln!("failed: {} ({}): deviation {:e} > {:e}", c.name, c.detail, c.max_deviation, c.tolerance);
        }
        Ok(Outcome::VerifyFailed)
    }
}
