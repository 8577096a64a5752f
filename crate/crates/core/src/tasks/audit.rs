use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_dims, Generator, ToyClassifier};
use crate::adjoint::Want;
use crate::error::{Error, Result};
use crate::metrics::{success_ratio, SuccessTable};
use crate::nnet::Condition;
use crate::odeint::SolveStats;
use crate::rng::Rng;
use crate::sampler::initial_noise;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Radius of the `inf`-norm ball around the base noise.
    pub tau: f64,
    pub steps: usize,
    /// Ascent step; `None` means `0.05 * tau`.
    pub step_size: Option<f64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            steps: 30,
            step_size: None,
        }
    }
}

impl AuditConfig {
    pub fn eta(&self) -> f64 {
        self.step_size.unwrap_or(0.05 * self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub label: usize,
    pub seed: u64,
    /// The unperturbed sample was classified as `label`, so a search ran.
    pub attempted: bool,
    pub success: bool,
    pub delta: Vec<f64>,
    pub iterations: usize,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// `l2` distance between the perturbed and unperturbed samples.
    pub sample_shift: f64,
    pub final_prediction: usize,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub outcomes: Vec<AuditOutcome>,
    /// Success ratio per label over attempted searches.
    pub table: SuccessTable,
}

/// `1 - cos(f, c)` and its gradient in `f`.
fn cosine_distance(f: &[f64], c: &[f64]) -> (f64, Vec<f64>) {
    let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nf == 0.0 || nc == 0.0 {
        return (1.0, vec![0.0; f.len()]);
    }
    let cos = f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (nf * nc);
    let grad = f
        .iter()
        .zip(c)
        .map(|(fi, ci)| -(ci / (nf * nc) - cos * fi / (nf * nf)))
        .collect();
    (1.0 - cos, grad)
}

/// Projected ascent on `delta` maximizing the feature cosine distance between
/// `Phi(x_T + delta)` and the label's concept vector. Stops at the first
/// iterate whose classification differs from `label`.
#[allow(clippy::too_many_arguments)]
pub fn audit_search(
    gen: &Generator<'_>,
    classifier: &ToyClassifier,
    label: usize,
    concept: &[f64],
    x_t: &[f64],
    seed: u64,
    cfg: &AuditConfig,
) -> Result<AuditOutcome> {
    check_dims(gen.model, classifier)?;
    if !cfg.tau.is_finite() || cfg.tau < 0.0 {
        return Err(Error::argument("tau must be finite and non-negative"));
    }
    if concept.len() != classifier.feature_dim() {
        return Err(Error::argument("concept vector does not match the feature dimension"));
    }
    let eps = gen.guided(&Condition::Label(label))?;
    let base = gen.generate(&eps, x_t)?;
    let mut stats = base.stats;
    let (initial_distance, _) = cosine_distance(&classifier.features(&base.x0), concept);
    let mut delta = vec![0.0; x_t.len()];
    let mut outcome = AuditOutcome {
        label,
        seed,
        attempted: classifier.predict(&base.x0) == label,
        success: false,
        delta: delta.clone(),
        iterations: 0,
        initial_distance,
        final_distance: initial_distance,
        sample_shift: 0.0,
        final_prediction: classifier.predict(&base.x0),
        stats,
    };
    if !outcome.attempted || cfg.tau == 0.0 {
        return Ok(outcome);
    }
    let eta = cfg.eta();
    let mut fwd = base.clone();
    for it in 0..cfg.steps {
        let feats = classifier.features(&fwd.x0);
        let (_, d_f) = cosine_distance(&feats, concept);
        let dl_dx0 = classifier.features_vjp(&fwd.x0, &d_f);
        // ascent on the distance is descent on its negative
        let neg: Vec<f64> = dl_dx0.iter().map(|g| -g).collect();
        let (grads, bstats) = gen.backward(&eps, &fwd, &neg, Want::noise_only())?;
        stats.merge(&bstats);
        let g: Vec<f64> = grads.x_t.iter().map(|v| -v).collect();
        let g_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if g_max == 0.0 {
            break;
        }
        for (d, gi) in delta.iter_mut().zip(&g) {
            *d = (*d + eta * gi / g_max).clamp(-cfg.tau, cfg.tau);
        }
        let bound = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if bound > cfg.tau {
            return Err(Error::Validation {
                path: "audit.delta".into(),
                msg: format!("|delta|_inf = {bound} exceeds tau = {}", cfg.tau),
            });
        }
        let x: Vec<f64> = x_t.iter().zip(&delta).map(|(a, b)| a + b).collect();
        fwd = gen.generate(&eps, &x)?;
        stats.merge(&fwd.stats);
        outcome.iterations = it + 1;
        outcome.final_prediction = classifier.predict(&fwd.x0);
        if outcome.final_prediction != label {
            outcome.success = true;
            break;
        }
    }
    outcome.final_distance = cosine_distance(&classifier.features(&fwd.x0), concept).0;
    outcome.sample_shift = fwd
        .x0
        .iter()
        .zip(&base.x0)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    outcome.delta = delta;
    outcome.stats = stats;
    Ok(outcome)
}

/// One search per `(label, seed)`, each from its own seeded base noise.
/// `concepts[label]` is the label's concept vector.
pub fn audit_batch(
    gen: &Generator<'_>,
    classifier: &ToyClassifier,
    concepts: &[Vec<f64>],
    labels: &[usize],
    seeds: &[u64],
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    let jobs: Vec<(usize, u64)> = labels
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let outcomes: Vec<AuditOutcome> = jobs
        .par_iter()
        .map(|&(label, seed)| {
            let concept = concepts
                .get(label)
                .ok_or_else(|| Error::argument(format!("no concept vector for label {label}")))?;
            let mut rng = Rng::labeled(seed, &format!("audit/noise/{label}"));
            let x_t = initial_noise(gen.sched, gen.model.data_dim(), &mut rng);
            audit_search(gen, classifier, label, concept, &x_t, seed, cfg)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let attempted: Vec<&AuditOutcome> = outcomes.iter().filter(|o| o.attempted).collect();
    let flags: Vec<bool> = attempted.iter().map(|o| o.success).collect();
    let groups: Vec<usize> = attempted.iter().map(|o| o.label).collect();
    let table = if flags.is_empty() {
        SuccessTable {
            groups: Default::default(),
            overall: 0.0,
        }
    } else {
        success_ratio(&flags, &groups)?
    };
    Ok(AuditReport { outcomes, table })
}
