use serde::{Deserialize, Serialize};

use super::{check_dims, Generator, ToyClassifier};
use crate::adjoint::Want;
use crate::error::Result;
use crate::nnet::{AdamConfig, AdamW, Condition};
use crate::odeint::SolveStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub epochs: usize,
    pub optimizer: AdamConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            optimizer: AdamConfig::with_lr(1e-2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEpoch {
    pub epoch: usize,
    /// `log p(label | x_0)` of the sample generated at the start of the epoch.
    pub log_prob: f64,
    pub best_log_prob: f64,
    pub grad_norm: f64,
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub label: usize,
    pub x_t: Vec<f64>,
    pub best_x_t: Vec<f64>,
    pub x0_before: Vec<f64>,
    pub x0_after: Vec<f64>,
    pub initial_log_prob: f64,
    pub final_log_prob: f64,
    pub best_log_prob: f64,
    pub history: Vec<GuidanceEpoch>,
    pub stats: SolveStats,
}

impl GuidanceReport {
    pub fn improvement(&self) -> f64 {
        self.best_log_prob - self.initial_log_prob
    }
}

/// Maximize `log p(label | Phi(x_T))` over the starting noise with Adam.
pub fn optimize_noise(
    gen: &Generator<'_>,
    classifier: &ToyClassifier,
    condition: &Condition,
    label: usize,
    x_t: &[f64],
    cfg: &GuidanceConfig,
) -> Result<GuidanceReport> {
    check_dims(gen.model, classifier)?;
    let eps = gen.guided(condition)?;
    let mut x = x_t.to_vec();
    let mut opt = AdamW::new(cfg.optimizer, x.len());
    let mut stats = SolveStats::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut first: Option<(f64, Vec<f64>)> = None;
    for epoch in 0..=cfg.epochs {
        let fwd = gen.generate(&eps, &x)?;
        stats.merge(&fwd.stats);
        let (lp, grad_lp) = classifier.log_prob_grad(&fwd.x0, label)?;
        if first.is_none() {
            first = Some((lp, fwd.x0.clone()));
        }
        if best.as_ref().is_none_or(|b| lp > b.0) {
            best = Some((lp, x.clone(), fwd.x0.clone()));
        }
        if epoch == cfg.epochs {
            break;
        }
        let dl_dx0: Vec<f64> = grad_lp.iter().map(|g| -g).collect();
        let (grads, bstats) = gen.backward(&eps, &fwd, &dl_dx0, Want::noise_only())?;
        stats.merge(&bstats);
        history.push(GuidanceEpoch {
            epoch,
            log_prob: lp,
            best_log_prob: best.as_ref().map_or(lp, |b| b.0),
            grad_norm: grads.x_t.iter().map(|g| g * g).sum::<f64>().sqrt(),
            nfe: fwd.stats.nfe + bstats.nfe,
        });
        opt.step(&mut x, &grads.x_t);
    }
    let (initial_log_prob, x0_before) = first.expect("at least one forward solve");
    let (best_log_prob, best_x_t, _) = best.expect("at least one forward solve");
    let final_fwd = gen.generate(&eps, &x)?;
    let final_log_prob = classifier.log_probs(&final_fwd.x0)[label];
    Ok(GuidanceReport {
        label,
        x_t: x,
        best_x_t,
        x0_before,
        x0_after: final_fwd.x0,
        initial_log_prob,
        final_log_prob,
        best_log_prob,
        history,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{adjoint_backward, AdjointConfig};
    use crate::nnet::{Denoiser, DenoiserConfig};
    use crate::rng::Rng;
    use crate::schedule::NoiseSchedule;
    use crate::tasks::TaskSampling;

    fn fixture() -> (Denoiser, ToyClassifier, NoiseSchedule) {
        let cfg = DenoiserConfig {
            hidden: vec![16, 16],
            ..DenoiserConfig::default()
        };
        let model = Denoiser::new(cfg, &mut Rng::new(2)).unwrap();
        let clf = ToyClassifier::new(2, 8, &[16, 16], &mut Rng::new(3)).unwrap();
        (model, clf, NoiseSchedule::default())
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (model, clf, sched) = fixture();
        let gen = Generator::new(&model, &sched, TaskSampling::default()).unwrap();
        let cfg = GuidanceConfig {
            epochs: 0,
            ..GuidanceConfig::default()
        };
        let x_t = [0.4, -0.9];
        let r = optimize_noise(&gen, &clf, &Condition::Null, 2, &x_t, &cfg).unwrap();
        assert_eq!(r.x_t, x_t);
        assert!(r.history.is_empty());
        assert_eq!(r.initial_log_prob, r.final_log_prob);
    }

    #[test]
    fn step_uses_the_adjoint_gradient() {
        let (model, clf, sched) = fixture();
        let gen = Generator::new(&model, &sched, TaskSampling::default()).unwrap();
        let cfg = GuidanceConfig {
            epochs: 1,
            ..GuidanceConfig::default()
        };
        let x_t = [0.4, -0.9];
        let label = 5;
        let r = optimize_noise(&gen, &clf, &Condition::Label(1), label, &x_t, &cfg).unwrap();

        let eps = gen.guided(&Condition::Label(1)).unwrap();
        let fwd = gen.generate(&eps, &x_t).unwrap();
        let (_, g) = clf.log_prob_grad(&fwd.x0, label).unwrap();
        let seed: Vec<f64> = g.iter().map(|v| -v).collect();
        let direct = adjoint_backward(
            &eps,
            &sched,
            gen.grid(),
            &gen.sampling.solver,
            &fwd.y,
            &seed,
            &AdjointConfig {
                want: Want::noise_only(),
                ..AdjointConfig::default()
            },
        )
        .unwrap();
        let mut expect = x_t.to_vec();
        AdamW::new(cfg.optimizer, 2).step(&mut expect, &direct.grads.x_t);
        assert_eq!(r.x_t, expect);
        let norm = direct.grads.x_t.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(r.history[0].grad_norm, norm);
    }

    #[test]
    fn best_so_far_is_monotone() {
        let (model, clf, sched) = fixture();
        let gen = Generator::new(&model, &sched, TaskSampling::default()).unwrap();
        let cfg = GuidanceConfig {
            epochs: 6,
            optimizer: AdamConfig::with_lr(0.1),
        };
        let r = optimize_noise(&gen, &clf, &Condition::Null, 0, &[1.0, 0.2], &cfg).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].best_log_prob >= w[0].best_log_prob);
        }
        assert!(r.best_log_prob >= r.initial_log_prob);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (model, _, sched) = fixture();
        let clf = ToyClassifier::new(3, 8, &[4], &mut Rng::new(0)).unwrap();
        let gen = Generator::new(&model, &sched, TaskSampling::default()).unwrap();
        assert!(optimize_noise(&gen, &clf, &Condition::Null, 0, &[0.0, 0.0], &GuidanceConfig::default()).is_err());
    }
}
