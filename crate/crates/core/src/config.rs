//! Run configuration: one flat JSON document per run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adjoint::{GradTarget, LossSpec};
use crate::data::MixtureConfig;
use crate::error::{Error, Result};
use crate::nnet::{CfgConfig, DenoiserConfig, TrainConfig};
use crate::odeint::{SolverConfig, SolverKind};
use crate::sampler::{SampleConfig, SampleMode};
use crate::schedule::{GridScheme, NoiseSchedule};
use crate::tasks::{
    AuditConfig, ClassifierConfig, FinetuneConfig, GuidanceConfig, InversionConfig, TaskSampling,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoints: CheckpointPaths,
    pub schedule: NoiseSchedule,
    pub data: MixtureConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    /// Solver used by `sample`.
    pub solver: SolverConfig,
    pub sample: SampleBlock,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
    pub task: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/adjd"),
            checkpoints: CheckpointPaths::default(),
            schedule: NoiseSchedule::default(),
            data: MixtureConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            solver: SolverConfig::default(),
            sample: SampleBlock::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

/// Pre-trained models; a missing path means the run trains its own.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    pub denoiser: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleBlock {
    pub mode: SampleMode,
    pub steps: usize,
    pub scheme: GridScheme,
    pub guidance: CfgConfig,
    pub count: usize,
    /// Class to condition on; `None` samples unconditionally.
    pub label: Option<usize>,
}

impl Default for SampleBlock {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            mode: s.mode,
            steps: s.steps,
            scheme: s.scheme,
            guidance: s.guidance,
            count: 512,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub solver: SolverKind,
    pub scheme: GridScheme,
    pub nfes: Vec<usize>,
    pub reference_nfe: usize,
    pub samples: usize,
    pub label: Option<usize>,
    pub guidance: CfgConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Ab4Ramp,
            scheme: GridScheme::Uniform,
            nfes: vec![10, 20, 50],
            reference_nfe: 1000,
            samples: 256,
            label: None,
            guidance: CfgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub solver: SolverKind,
    pub steps: usize,
    pub scheme: GridScheme,
    pub label: Option<usize>,
    pub guidance: CfgConfig,
    pub targets: Vec<GradTarget>,
    /// Number of random parameter coordinates probed.
    pub theta_coords: usize,
    pub h: f64,
    pub tolerance: f64,
    pub loss: LossSpec,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Rk4,
            steps: 200,
            scheme: GridScheme::Uniform,
            label: Some(3),
            guidance: CfgConfig::default(),
            targets: vec![GradTarget::Noise, GradTarget::Theta, GradTarget::Cond],
            theta_coords: 20,
            h: 1e-4,
            tolerance: 1e-3,
            loss: LossSpec::Linear { v: vec![0.6, -0.8] },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub sampling: TaskSampling,
    pub guide: GuideTask,
    pub audit: AuditTask,
    pub finetune: FinetuneTask,
    pub invert: InvertTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuideTask {
    pub runs: usize,
    pub optim: GuidanceConfig,
}

impl Default for GuideTask {
    fn default() -> Self {
        Self {
            runs: 10,
            optim: GuidanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditTask {
    /// Labels to audit; empty means every class.
    pub labels: Vec<usize>,
    pub seeds: usize,
    pub search: AuditConfig,
}

impl Default for AuditTask {
    fn default() -> Self {
        Self {
            labels: Vec::new(),
            seeds: 100,
            search: AuditConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneTask {
    pub per_label: usize,
    pub w_s: f64,
    pub w_c: f64,
    /// Mixture mode whose center is the style reference.
    pub style_mode: usize,
    pub optim: FinetuneConfig,
}

impl Default for FinetuneTask {
    fn default() -> Self {
        Self {
            per_label: 10,
            w_s: 1.0,
            w_c: 1.0,
            style_mode: 0,
            optim: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvertTask {
    pub runs: usize,
    pub optim: InversionConfig,
}

impl Default for InvertTask {
    fn default() -> Self {
        Self {
            runs: 10,
            optim: InversionConfig::default(),
        }
    }
}

impl GradcheckConfig {
    fn loss_dim(&self) -> usize {
        match &self.loss {
            LossSpec::Linear { v } => v.len(),
            LossSpec::Quadratic { target } => target.len(),
        }
    }
}

impl RunConfig {
    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            mode: self.sample.mode,
            solver: self.solver,
            steps: self.sample.steps,
            scheme: self.sample.scheme,
            guidance: self.sample.guidance,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| Error::Validation {
            path: path.into(),
            msg: strip_kind(&e),
        };
        let check = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation {
                    path: path.into(),
                    msg: msg.into(),
                })
            }
        };
        self.schedule.validate().map_err(|e| at("schedule", e))?;
        self.model.validate().map_err(|e| at("model", e))?;
        check(self.model.data_dim == 2, "model.data_dim", "the mixture data is two-dimensional")?;
        check(
            self.model.num_classes >= self.data.modes,
            "model.num_classes",
            "must cover every mixture mode",
        )?;
        check(self.data.modes > 0, "data.modes", "must be positive")?;
        check(self.data.std >= 0.0, "data.std", "must be non-negative")?;
        check(self.data.train_size > 0, "data.train_size", "must be positive")?;
        check(self.data.holdout_size > 0, "data.holdout_size", "must be positive")?;
        check(self.train.batch_size > 0, "train.batch_size", "must be positive")?;
        check(
            (0.0..1.0).contains(&self.train.cond_drop_prob),
            "train.cond_drop_prob",
            "must lie in [0, 1)",
        )?;
        check(self.train.optimizer.lr > 0.0, "train.optimizer.lr", "must be positive")?;
        check(self.classifier.batch_size > 0, "classifier.batch_size", "must be positive")?;
        check(self.solver.rtol > 0.0, "solver.rtol", "must be positive")?;
        check(self.solver.atol > 0.0, "solver.atol", "must be positive")?;
        check(self.sample.steps > 0, "sample.steps", "must be positive")?;
        check(self.sample.count > 0, "sample.count", "must be positive")?;
        if let Some(l) = self.sample.label {
            check(l < self.model.num_classes, "sample.label", "exceeds the class count")?;
        }
        check(self.bench.solver.is_fixed_step(), "bench.solver", "must be a fixed-step solver")?;
        check(!self.bench.nfes.is_empty(), "bench.nfes", "must not be empty")?;
        check(self.bench.samples > 0, "bench.samples", "must be positive")?;
        check(
            self.bench.nfes.iter().all(|&n| n < self.bench.reference_nfe),
            "bench.reference_nfe",
            "must exceed every benchmarked NFE",
        )?;
        check(self.gradcheck.solver.is_fixed_step(), "gradcheck.solver", "must be a fixed-step solver")?;
        check(self.gradcheck.steps > 0, "gradcheck.steps", "must be positive")?;
        check(!self.gradcheck.targets.is_empty(), "gradcheck.targets", "must not be empty")?;
        check(
            self.gradcheck.loss_dim() == self.model.data_dim,
            "gradcheck.loss",
            "dimension differs from model.data_dim",
        )?;
        if let Some(l) = self.gradcheck.label {
            check(l < self.model.num_classes, "gradcheck.label", "exceeds the class count")?;
        }
        if let Some(l) = self.bench.label {
            check(l < self.model.num_classes, "bench.label", "exceeds the class count")?;
        }
        check(self.gradcheck.h > 0.0, "gradcheck.h", "must be positive")?;
        check(self.gradcheck.tolerance > 0.0, "gradcheck.tolerance", "must be positive")?;
        check(
            self.task.sampling.solver.kind.is_fixed_step(),
            "task.sampling.solver.kind",
            "tasks need a fixed-step solver",
        )?;
        check(self.task.sampling.steps > 0, "task.sampling.steps", "must be positive")?;
        let tau = self.task.audit.search.tau;
        check(tau.is_finite() && tau >= 0.0, "task.audit.search.tau", "must be finite and non-negative")?;
        check(
            self.task.audit.labels.iter().all(|&l| l < self.model.num_classes),
            "task.audit.labels",
            "label exceeds the class count",
        )?;
        check(
            self.task.finetune.style_mode < self.data.modes,
            "task.finetune.style_mode",
            "exceeds the mode count",
        )?;
        check(self.task.finetune.optim.batch_size > 0, "task.finetune.optim.batch_size", "must be positive")?;
        self.task
            .invert
            .optim
            .composition
            .hash_dim(self.model.cond_dim)
            .map_err(|e| at("task.invert.optim.composition", e))?;
        Ok(())
    }
}

fn strip_kind(e: &Error) -> String {
    let s = e.to_string();
    match s.split_once(": ") {
        Some((_, rest)) => rest.to_string(),
        None => s,
    }
}

/// Byte offset of a 1-based `(line, column)` position.
fn byte_offset(src: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in src.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(src.len());
        }
        offset += l.len() + 1;
    }
    src.len()
}

/// Parse and validate a run configuration; missing keys take their defaults.
pub fn parse_config(bytes: &[u8]) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let cfg: RunConfig = match serde_path_to_error::deserialize(&mut de) {
        Ok(c) => c,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            return Err(match inner.classify() {
                serde_json::error::Category::Data => Error::Validation {
                    path,
                    msg: data_message(&inner),
                },
                _ => Error::Parse {
                    offset: byte_offset(bytes, inner.line(), inner.column()),
                    msg: data_message(&inner),
                },
            });
        }
    };
    de.end().map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        msg: data_message(&e),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// The error text without serde_json's trailing position.
fn data_message(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}
