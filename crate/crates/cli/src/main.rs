//! `udfa`: generate data, train, attack, evaluate and compare detectors.

mod npy;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use udfa::attack::{generate_adversarial, AttackConfig};
use udfa::data::{generate_dataset, Dataset};
use udfa::detcore::checkpoint::{load_detector, Checkpoint};
use udfa::detcore::{Detector, DetectorConfig, NormMode, Phase};
use udfa::eval::{evaluate, format_table, read_reports, write_reports, CorruptionKind, EvalConfig};
use udfa::experiment::{default_output_root, run_experiment, ExperimentConfig};
use udfa::train::{fit, FitOptions, TrainConfig};
use udfa::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "udfa", version, about = "Adversarial fine-tuning with decoupled feature alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train and test splits.
    Generate {
        /// Experiment config; only its `dataset` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (receives `train/` and `test/`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or fine-tune a detector.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frozen teacher for the alignment modes.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Starting weights. Defaults to the teacher, or a fresh detector.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Seed of a fresh detector.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Write PGD adversarial images as raw float32 arrays.
    Attack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Budget as a numerator over 255.
        #[arg(long, default_value_t = 8)]
        epsilon: u32,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Step size as a numerator over 255; defaults to epsilon / steps.
        #[arg(long)]
        step_size: Option<f32>,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
    },
    /// Clean, adversarial and corruption metrics of one checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// PGD step counts; pass `--adv-steps none` to skip the attack.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        adv_steps: Vec<String>,
        #[arg(long, default_value_t = 8)]
        epsilon: u32,
        /// Corruption kinds, or `all`.
        #[arg(long, value_delimiter = ',')]
        corruption: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        severities: Vec<u8>,
        #[arg(long, default_value = "model")]
        label: String,
        /// Report file (line-delimited JSON); appended to if it exists.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Table comparing report files.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Label of the row deltas are taken against.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Full experiment: data, teacher, baseline, student, evaluation, report.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
}

fn out_or_default(out: Option<PathBuf>, leaf: &str) -> PathBuf {
    out.unwrap_or_else(|| default_output_root().join(leaf))
}

fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn cmd_generate(config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_experiment(config.as_deref())?;
    let out = out_or_default(out, "data");
    let (train, test) = cfg.dataset.split_specs();
    for (spec, name) in [(train, "train"), (test, "test")] {
        let dir = generate_dataset(&spec, out.join(name))?;
        println!("{name}: {} images -> {}", spec.num_images, dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: PathBuf,
    data: PathBuf,
    teacher: Option<PathBuf>,
    init: Option<PathBuf>,
    init_seed: u64,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
    out: Option<PathBuf>,
    verbose: bool,
) -> Result<()> {
    let cfg = TrainConfig::load(&config)?;
    let train = Dataset::load(&data)?;
    let teacher = teacher.map(load_detector::<f32>).transpose()?;
    if cfg.mode.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("mode {} needs --teacher", cfg.mode)));
    }
    let dual = cfg.mode == udfa::train::Mode::UdfaAdvprop;
    let student = match (&init, &teacher) {
        (Some(p), _) => Detector::initialized_from(&load_detector::<f32>(p)?, dual)?,
        (None, Some(t)) => Detector::initialized_from(t, dual)?,
        (None, None) => Detector::new(
            DetectorConfig {
                num_classes: train.num_classes,
                dual_norm: dual,
                ..DetectorConfig::default()
            },
            init_seed,
        )?,
    };
    let mut opts = FitOptions::new(out_or_default(out, cfg.mode.name()));
    opts.resume = resume;
    opts.stop_after = stop_after;
    opts.verbose = verbose;
    let outcome = fit(&train, &cfg, student, teacher.as_ref(), &opts)?;
    println!("{} iterations; checkpoint {}; log {}", outcome.iterations, outcome.checkpoint.display(), outcome.log.display());
    Ok(())
}

fn cmd_attack(
    data: PathBuf,
    checkpoint: PathBuf,
    out: Option<PathBuf>,
    epsilon: u32,
    steps: usize,
    step_size: Option<f32>,
    batch_size: usize,
) -> Result<()> {
    let data = Dataset::load(&data)?;
    let det = load_detector::<f32>(&checkpoint)?;
    let cfg = AttackConfig {
        epsilon: epsilon as f32 / 255.0,
        steps,
        step_size: step_size.map(|s| s / 255.0),
        norm_mode: NormMode::Main,
    };
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let out = out_or_default(out, "adversarial");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut adv = data.images.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, _) = generate_adversarial(&det, &data.batch(chunk), &cfg, Phase::Eval)?;
        adv.slice_mut(ndarray::s![chunk[0]..chunk[0] + chunk.len(), .., .., ..]).assign(&x.pixels);
    }
    let shape = adv.shape().to_vec();
    let flat: Vec<f32> = adv.iter().copied().collect();
    npy::write_f32(&out.join("images.npy"), &shape, &flat)?;
    let meta = serde_json::json!({
        "layout": "NCHW",
        "ids": data.ids,
        "epsilon_255": epsilon,
        "steps": steps,
        "step_size": cfg.step(),
        "dataset_hash": data.content_hash,
        "model_fingerprint": det.params().fingerprint(),
    });
    let meta_path = out.join("attack.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| Error::io(&meta_path, e))?;
    println!("{} adversarial images -> {}", data.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: PathBuf,
    data: PathBuf,
    adv_steps: Vec<String>,
    epsilon: u32,
    corruption: Vec<String>,
    severities: Vec<u8>,
    label: String,
    out: Option<PathBuf>,
) -> Result<()> {
    let adv_steps = if adv_steps.iter().any(|s| s == "none") {
        Vec::new()
    } else {
        adv_steps
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Argument(format!("bad step count `{s}`"))))
            .collect::<Result<_>>()?
    };
    let corruptions = if corruption.iter().any(|c| c == "all") {
        CorruptionKind::ALL.to_vec()
    } else {
        corruption.iter().map(|c| c.parse()).collect::<Result<_>>()?
    };
    let cfg = EvalConfig {
        adv_steps,
        epsilon_255: epsilon as f32,
        corruptions,
        severities,
        ..EvalConfig::default()
    };
    let det = Checkpoint::<f32>::load(&checkpoint)?.detector()?;
    let data = Dataset::load(&data)?;
    let report = evaluate(&det, &data, &cfg, &label)?;
    let out = out_or_default(out, "reports.jsonl");
    let mut reports = if out.exists() { read_reports(&out)? } else { Vec::new() };
    reports.retain(|r| r.label != report.label);
    reports.push(report);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_reports(&out, &reports)?;
    print!("{}", format_table(&reports, None)?);
    Ok(())
}

fn cmd_report(inputs: Vec<PathBuf>, reference: Option<String>) -> Result<()> {
    let mut reports = Vec::new();
    for p in &inputs {
        reports.extend(read_reports(p)?);
    }
    print!("{}", format_table(&reports, reference.as_deref())?);
    Ok(())
}

fn cmd_run(config: Option<PathBuf>, out: Option<PathBuf>, verbose: bool) -> Result<()> {
    let mut cfg = load_experiment(config.as_deref())?;
    cfg.verbose |= verbose;
    let outcome = run_experiment(&cfg, out_or_default(out, "experiment"))?;
    print!("{}", outcome.table);
    println!("artifacts in {}", outcome.dir.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out } => cmd_generate(config, out),
        Command::Train {
            config,
            data,
            teacher,
            init,
            init_seed,
            resume,
            stop_after,
            out,
            verbose,
        } => cmd_train(config, data, teacher, init, init_seed, resume, stop_after, out, verbose),
        Command::Attack {
            data,
            checkpoint,
            out,
            epsilon,
            steps,
            step_size,
            batch_size,
        } => cmd_attack(data, checkpoint, out, epsilon, steps, step_size, batch_size),
        Command::Evaluate {
            checkpoint,
            data,
            adv_steps,
            epsilon,
            corruption,
            severities,
            label,
            out,
        } => cmd_evaluate(checkpoint, data, adv_steps, epsilon, corruption, severities, label, out),
        Command::Report { inputs, reference } => cmd_report(inputs, reference),
        Command::Run { config, out, verbose } => cmd_run(config, out, verbose),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
