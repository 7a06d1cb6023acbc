//! End-to-end protocol: data generation, clean pretraining of the teacher,
//! a standard fine-tuning baseline, the configured student run, and a
//! comparison report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate, Dataset, SyntheticSpec};
use crate::detcore::checkpoint::load_detector;
use crate::detcore::{Detector, DetectorConfig};
use crate::eval::{evaluate, format_table, write_reports, EvalConfig, MetricReport};
use crate::train::{fit, FitOptions, Mode, TrainConfig};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "UDFA_OUTPUT_ROOT";

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Generator settings; `num_images` and `first_index` are set per split.
    pub synthetic: SyntheticSpec,
    pub num_train: usize,
    pub num_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            synthetic: SyntheticSpec::default(),
            num_train: 800,
            num_test: 200,
        }
    }
}

impl DatasetConfig {
    /// Train images are indices `0..num_train`, test images follow.
    pub fn split_specs(&self) -> (SyntheticSpec, SyntheticSpec) {
        let train = SyntheticSpec {
            num_images: self.num_train,
            first_index: 0,
            ..self.synthetic.clone()
        };
        let test = SyntheticSpec {
            num_images: self.num_test,
            first_index: self.num_train,
            ..self.synthetic.clone()
        };
        (train, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    /// Seed of the teacher's initial weights.
    pub init_seed: u64,
    /// Clean pretraining of the teacher (mode STD).
    pub teacher: TrainConfig,
    /// Use this checkpoint as the teacher instead of training one.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Fine-tuning run under test; the STD baseline reuses its schedule.
    pub student: TrainConfig,
    pub eval: EvalConfig,
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            init_seed: 0,
            teacher: TrainConfig::for_mode(Mode::Std),
            teacher_checkpoint: None,
            student: TrainConfig::for_mode(Mode::Udfa),
            eval: EvalConfig::default(),
            verbose: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; the train sections get their mode's forced values.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.teacher = cfg.teacher.resolved();
        cfg.student = cfg.student.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.synthetic.validate()?;
        if self.dataset.num_train == 0 || self.dataset.num_test == 0 {
            return Err(Error::Config("both splits need images".into()));
        }
        if self.dataset.synthetic.num_classes != self.detector.num_classes {
            return Err(Error::Config("dataset and detector class counts differ".into()));
        }
        self.detector.validate()?;
        if self.teacher.mode != Mode::Std {
            return Err(Error::Config("the teacher is trained in STD mode".into()));
        }
        self.teacher.validate()?;
        self.student.validate()?;
        self.eval.validate()
    }

    /// The standard fine-tuning baseline: the student's schedule in STD mode.
    pub fn baseline(&self) -> TrainConfig {
        TrainConfig {
            mode: Mode::Std,
            ..self.student.clone()
        }
        .resolved()
    }
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub reports: Vec<MetricReport>,
    pub table: String,
}

fn load_or_write(spec: &SyntheticSpec, dir: &Path) -> Result<Dataset> {
    let data = generate(spec)?;
    match Dataset::load(dir) {
        Ok(existing) if existing.content_hash == data.content_hash => {}
        _ => {
            data.save(dir, Some(spec))?;
        }
    }
    Ok(data)
}

/// Runs every stage into `out_dir`. A failing stage is reported by name and
/// leaves the artifacts of earlier stages in place.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentOutcome> {
    let out = out_dir.as_ref().to_path_buf();
    cfg.validate()?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("experiment.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let (train_spec, test_spec) = cfg.dataset.split_specs();
    let (train, test) = (|| Ok((load_or_write(&train_spec, &out.join("data/train"))?, load_or_write(&test_spec, &out.join("data/test"))?)))()
        .map_err(|e| Error::stage("generate", e))?;

    let run = |name: &str, tc: &TrainConfig, student: Detector<f32>, teacher: Option<&Detector<f32>>| {
        let mut opts = FitOptions::new(out.join(name));
        opts.verbose = cfg.verbose;
        fit(&train, tc, student, teacher, &opts).map(|o| o.student).map_err(|e| Error::stage(name, e))
    };

    let teacher = match &cfg.teacher_checkpoint {
        Some(path) => load_detector::<f32>(path).map_err(|e| Error::stage("teacher", e))?,
        None => {
            let init = Detector::new(DetectorConfig { dual_norm: false, ..cfg.detector.clone() }, cfg.init_seed)?;
            run("teacher", &cfg.teacher, init, None)?
        }
    };
    let baseline_cfg = cfg.baseline();
    let baseline = run("std", &baseline_cfg, Detector::initialized_from(&teacher, false)?, None)?;
    let student = if cfg.student == baseline_cfg {
        baseline.clone()
    } else {
        let dual = cfg.student.mode == Mode::UdfaAdvprop;
        let teacher_ref = cfg.student.mode.needs_teacher().then_some(&teacher);
        run("student", &cfg.student, Detector::initialized_from(&teacher, dual)?, teacher_ref)?
    };

    let reports = (|| {
        Ok(vec![
            evaluate(&teacher, &test, &cfg.eval, "PRE")?,
            evaluate(&baseline, &test, &cfg.eval, "STD")?,
            evaluate(&student, &test, &cfg.eval, cfg.student.mode.name())?,
        ])
    })()
    .map_err(|e| Error::stage("evaluate", e))?;
    write_reports(out.join("reports.jsonl"), &reports).map_err(|e| Error::stage("report", e))?;
    let table = format_table(&reports, Some("PRE")).map_err(|e| Error::stage("report", e))?;
    let table_path = out.join("report.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::stage("report", Error::io(&table_path, e)))?;
    Ok(ExperimentOutcome { dir: out, reports, table })
}
