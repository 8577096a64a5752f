use serde::{Deserialize, Serialize};

use super::Generator;
use crate::adjoint::Want;
use crate::error::{Error, Result};
use crate::nnet::{AdamConfig, AdamW, Denoiser, Guided};
use crate::odeint::SolveStats;

/// How the optimized embedding `#` combines with the base condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Composition {
    /// `c = c_base + #`.
    Sum,
    /// `c = [c_base[..base_dim], #]`.
    Concat { base_dim: usize },
}

impl Composition {
    pub fn hash_dim(self, cond_dim: usize) -> Result<usize> {
        match self {
            Composition::Sum => Ok(cond_dim),
            Composition::Concat { base_dim } if base_dim < cond_dim => Ok(cond_dim - base_dim),
            Composition::Concat { base_dim } => Err(Error::argument(format!(
                "concat base_dim {base_dim} leaves no room in a {cond_dim}-dim condition"
            ))),
        }
    }

    pub fn compose(self, base: &[f64], hash: &[f64]) -> Vec<f64> {
        match self {
            Composition::Sum => base.iter().zip(hash).map(|(a, b)| a + b).collect(),
            Composition::Concat { base_dim } => base[..base_dim].iter().chain(hash).copied().collect(),
        }
    }

    /// `dL/d#` from `dL/dc`.
    fn pull_back(self, d_c: &[f64]) -> Vec<f64> {
        match self {
            Composition::Sum => d_c.to_vec(),
            Composition::Concat { base_dim } => d_c[base_dim..].to_vec(),
        }
    }

    /// The null-condition initialization of `#`.
    pub fn null_init(self, model: &Denoiser) -> Vec<f64> {
        let null = model.cond_table().row(model.null_row());
        match self {
            Composition::Sum => null.to_vec(),
            Composition::Concat { base_dim } => null[base_dim..].to_vec(),
        }
    }

    /// The `#` that reproduces `target` exactly, when one exists.
    pub fn oracle(self, base: &[f64], target: &[f64]) -> Vec<f64> {
        match self {
            Composition::Sum => target.iter().zip(base).map(|(t, b)| t - b).collect(),
            Composition::Concat { base_dim } => target[base_dim..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub composition: Composition,
    pub steps: usize,
    pub optimizer: AdamConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            composition: Composition::Sum,
            steps: 200,
            optimizer: AdamConfig::with_lr(5e-2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionStep {
    pub step: usize,
    pub mse: f64,
    pub best_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub hash: Vec<f64>,
    pub best_hash: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub best_mse: f64,
    pub history: Vec<InversionStep>,
    pub stats: SolveStats,
}

impl InversionReport {
    /// `1 - best / initial`.
    pub fn reduction(&self) -> f64 {
        if self.initial_mse == 0.0 {
            return 0.0;
        }
        1.0 - self.best_mse / self.initial_mse
    }
}

fn mse_grad(x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mse = x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let grad = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    (mse, grad)
}

/// Fit `#` so that `Phi(x_T, compose(c_base, #))` reproduces `target`.
pub fn invert_embedding(
    gen: &Generator<'_>,
    base: &[f64],
    init: &[f64],
    x_t: &[f64],
    target: &[f64],
    cfg: &InversionConfig,
) -> Result<InversionReport> {
    let cond_dim = gen.model.cond_dim();
    let hash_dim = cfg.composition.hash_dim(cond_dim)?;
    if base.len() != cond_dim {
        return Err(Error::argument(format!(
            "base condition has dim {}, model expects {cond_dim}",
            base.len()
        )));
    }
    if init.len() != hash_dim {
        return Err(Error::argument(format!(
            "embedding has dim {}, composition expects {hash_dim}",
            init.len()
        )));
    }
    if target.len() != gen.model.data_dim() {
        return Err(Error::argument("target does not match the data dimension"));
    }
    let want = Want {
        theta: false,
        cond: true,
        time: false,
    };
    let mut hash = init.to_vec();
    let mut opt = AdamW::new(cfg.optimizer, hash_dim);
    let mut stats = SolveStats::default();
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut initial_mse = 0.0;
    let mut final_mse = 0.0;
    for step in 0..=cfg.steps {
        let c = cfg.composition.compose(base, &hash);
        let eps = Guided::from_vector(gen.model, c, gen.sampling.guidance);
        let fwd = gen.generate(&eps, x_t)?;
        stats.merge(&fwd.stats);
        let (mse, d_x0) = mse_grad(&fwd.x0, target);
        if step == 0 {
            initial_mse = mse;
        }
        final_mse = mse;
        if best.as_ref().is_none_or(|b| mse < b.0) {
            best = Some((mse, hash.clone()));
        }
        history.push(InversionStep {
            step,
            mse,
            best_mse: best.as_ref().map_or(mse, |b| b.0),
        });
        if step == cfg.steps {
            break;
        }
        let (grads, bstats) = gen.backward(&eps, &fwd, &d_x0, want)?;
        stats.merge(&bstats);
        let d_hash = cfg.composition.pull_back(&grads.cond.expect("cond requested"));
        opt.step(&mut hash, &d_hash);
    }
    let (best_mse, best_hash) = best.expect("at least one forward solve");
    Ok(InversionReport {
        hash,
        best_hash,
        initial_mse,
        final_mse,
        best_mse,
        history,
        stats,
    })
}
