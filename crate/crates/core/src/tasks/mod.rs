//! Toy-scale optimization tasks driven by adjoint gradients: guided noise
//! optimization, bounded adversarial noise search, style finetuning and
//! conditioning-embedding inversion, plus the classifier they share.
//!
//! Every task samples in the `reparam` clock and obtains gradients only from
//! [`adjoint_backward`](crate::adjoint::adjoint_backward).

mod audit;
mod classifier;
mod finetune;
mod guidance;
mod invert;

pub use audit::{audit_batch, audit_search, AuditConfig, AuditOutcome, AuditReport};
pub use classifier::{train_classifier, ClassifierConfig, ClassifierReport, ToyClassifier};
pub use finetune::{
    finetune_weights, gram, gram_vjp, make_triplets, style_content_loss, FinetuneConfig,
    FinetuneEpoch, FinetuneReport, StyleLoss, StyleObjective, Triplet,
};
pub use guidance::{optimize_noise, GuidanceConfig, GuidanceEpoch, GuidanceReport};
pub use invert::{invert_embedding, Composition, InversionConfig, InversionReport, InversionStep};

use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_backward, AdjointConfig, Gradients, Want};
use crate::error::{Error, Result};
use crate::nnet::{CfgConfig, Condition, Denoiser, Guided};
use crate::odeint::{SolveStats, SolverConfig, SolverKind};
use crate::sampler::solve_reparam;
use crate::schedule::{GridScheme, NoiseSchedule};

/// Forward and backward discretisation shared by the tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSampling {
    pub solver: SolverConfig,
    pub steps: usize,
    pub scheme: GridScheme,
    pub guidance: CfgConfig,
}

impl Default for TaskSampling {
    fn default() -> Self {
        Self {
            solver: SolverConfig::new(SolverKind::Euler),
            steps: 31,
            scheme: GridScheme::Uniform,
            guidance: CfgConfig::default(),
        }
    }
}

/// A model, schedule and grid ready for repeated forward/backward solves.
#[derive(Debug, Clone)]
pub struct Generator<'a> {
    pub model: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub sampling: TaskSampling,
    grid: Vec<f64>,
}

/// Result of one forward solve.
#[derive(Debug, Clone)]
pub struct Generated {
    pub x0: Vec<f64>,
    /// Terminal `reparam` state, the starting point of the backward solve.
    pub y: Vec<f64>,
    pub stats: SolveStats,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a Denoiser, sched: &'a NoiseSchedule, sampling: TaskSampling) -> Result<Self> {
        if !sampling.solver.kind.is_fixed_step() {
            return Err(Error::argument("tasks need a fixed-step solver"));
        }
        let grid = sched.time_grid(sampling.steps, sampling.scheme)?.points;
        Ok(Self {
            model,
            sched,
            sampling,
            grid,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn guided(&self, condition: &Condition) -> Result<Guided<'a>> {
        Guided::new(self.model, condition, self.sampling.guidance)
    }

    pub fn generate(&self, eps: &Guided<'_>, x_t: &[f64]) -> Result<Generated> {
        let (y, stats) = solve_reparam(eps, self.sched, x_t, &self.grid, &self.sampling.solver)?;
        let a = self.sched.alpha(self.grid[self.grid.len() - 1]);
        Ok(Generated {
            x0: y.iter().map(|v| a * v).collect(),
            y,
            stats,
        })
    }

    pub fn backward(&self, eps: &Guided<'_>, fwd: &Generated, dl_dx0: &[f64], want: Want) -> Result<(Gradients, SolveStats)> {
        let cfg = AdjointConfig {
            want,
            ..AdjointConfig::default()
        };
        let out = adjoint_backward(eps, self.sched, &self.grid, &self.sampling.solver, &fwd.y, dl_dx0, &cfg)?;
        Ok((out.grads, out.stats))
    }
}

fn check_dims(model: &Denoiser, classifier: &ToyClassifier) -> Result<()> {
    if model.data_dim() != classifier.input_dim() {
        return Err(Error::argument(format!(
            "classifier expects dim {}, model generates dim {}",
            classifier.input_dim(),
            model.data_dim()
        )));
    }
    Ok(())
}
