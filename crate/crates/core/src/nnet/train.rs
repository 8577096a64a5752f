//! Denoising score matching: minimise `E |eps(alpha_t x0 + sigma_t n, t, c) - n|^2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, GradSink};
use super::optim::{AdamConfig, AdamW};
use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

/// Items per parallel work unit; fixed so reductions are order-stable.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Probability of replacing the label with the null row.
    pub cond_drop_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            optimizer: AdamConfig::default(),
            cond_drop_prob: 0.1,
        }
    }
}

/// One noised training example.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Vec<f64>,
    /// `None` selects the null row.
    pub label: Option<usize>,
    pub t: f64,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub theta: Vec<f64>,
    /// Gradient for the flattened conditioning table.
    pub table: Vec<f64>,
}

impl BatchGrad {
    fn zeros(model: &Denoiser) -> Self {
        Self {
            loss: 0.0,
            theta: vec![0.0; model.num_params()],
            table: vec![0.0; model.cond_table().len()],
        }
    }

    fn add(&mut self, other: &BatchGrad) {
        self.loss += other.loss;
        crate::tensor::axpy(1.0, &other.theta, &mut self.theta);
        crate::tensor::axpy(1.0, &other.table, &mut self.table);
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Mean squared noise-prediction error over `items` and its gradient.
pub fn batch_loss_grad(
    model: &Denoiser,
    sched: &NoiseSchedule,
    items: &[TrainItem],
) -> Result<BatchGrad> {
    if items.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let d = model.data_dim();
    let norm = 1.0 / (items.len() * d) as f64;
    let rows: Vec<Vec<f64>> = (0..=model.num_classes())
        .map(|r| model.cond_table().row(r).to_vec())
        .collect();
    let partials: Vec<BatchGrad> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = BatchGrad::zeros(model);
            let cd = model.cond_dim();
            for it in chunk {
                let row = it.label.unwrap_or(model.null_row());
                let (alpha, sigma) = sched.alpha_sigma_unchecked(it.t);
                let xt: Vec<f64> = it
                    .x0
                    .iter()
                    .zip(&it.noise)
                    .map(|(x, n)| alpha * x + sigma * n)
                    .collect();
                let (pred, tape) = model.eval_tape(&xt, it.t, &rows[row]);
                let resid: Vec<f64> = pred.iter().zip(&it.noise).map(|(p, n)| p - n).collect();
                acc.loss += resid.iter().map(|r| r * r).sum::<f64>() * norm;
                let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r * norm).collect();
                let mut gx = vec![0.0; d];
                model.backward(
                    &tape,
                    it.t,
                    &cot,
                    1.0,
                    GradSink {
                        x: &mut gx,
                        theta: Some(&mut acc.theta),
                        c: Some(&mut acc.table[row * cd..(row + 1) * cd]),
                        t: None,
                    },
                );
            }
            acc
        })
        .collect();
    let mut total = BatchGrad::zeros(model);
    for p in &partials {
        total.add(p);
    }
    Ok(total)
}

fn draw_items(
    data: &LabeledData,
    sched: &NoiseSchedule,
    n: usize,
    drop_prob: f64,
    rng: &mut Rng,
) -> Vec<TrainItem> {
    (0..n)
        .map(|_| {
            let i = rng.below(data.len());
            let dropped = rng.uniform() < drop_prob;
            TrainItem {
                x0: data.points[i].clone(),
                label: (!dropped).then_some(data.labels[i]),
                t: rng.uniform_in(sched.t_start, sched.t_end),
                noise: rng.normal_vec(data.dim, 1.0),
            }
        })
        .collect()
}

/// Train `model` in place; the loss of every step is returned.
pub fn train_score_matching(
    model: &mut Denoiser,
    data: &LabeledData,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    if data.dim != model.data_dim() {
        return Err(Error::argument(format!(
            "data dim {} does not match model dim {}",
            data.dim,
            model.data_dim()
        )));
    }
    if data.labels.iter().any(|&l| l >= model.num_classes()) {
        return Err(Error::argument("dataset label exceeds model class count"));
    }
    if !(0.0..1.0).contains(&cfg.cond_drop_prob) {
        return Err(Error::argument("cond_drop_prob must lie in [0, 1)"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::argument("batch_size must be positive"));
    }
    let mut rng = Rng::labeled(seed, "train/score-matching");
    let n_theta = model.num_params();
    let mut params = model.params();
    params.extend_from_slice(model.cond_table().data());
    let mut opt = AdamW::new(cfg.optimizer, params.len());
    let mut report = TrainReport::default();
    let mut grad = Vec::with_capacity(params.len());
    for step in 0..cfg.steps {
        let items = draw_items(data, sched, cfg.batch_size, cfg.cond_drop_prob, &mut rng);
        let g = batch_loss_grad(model, sched, &items)?;
        if !g.loss.is_finite() {
            return Err(Error::Training { step, loss: g.loss });
        }
        report.losses.push(g.loss);
        grad.clear();
        grad.extend_from_slice(&g.theta);
        grad.extend_from_slice(&g.table);
        opt.step(&mut params, &grad);
        model.set_params(&params[..n_theta])?;
        model.cond_table_mut().data_mut().copy_from_slice(&params[n_theta..]);
    }
    Ok(report)
}

/// Score-matching loss on `n` fixed draws from `data` (labels kept).
pub fn score_matching_loss(
    model: &Denoiser,
    data: &LabeledData,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::labeled(seed, "eval/score-matching");
    let items = draw_items(data, sched, n, 0.0, &mut rng);
    Ok(batch_loss_grad(model, sched, &items)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::DenoiserConfig;

    fn tiny() -> Denoiser {
        let cfg = DenoiserConfig {
            hidden: vec![16],
            time_freqs: 4,
            cond_dim: 2,
            num_classes: 2,
            ..DenoiserConfig::default()
        };
        Denoiser::new(cfg, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut m = tiny();
        let before = m.clone();
        let data = LabeledData::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let rep = train_score_matching(&mut m, &data, &NoiseSchedule::default(), &cfg, 1).unwrap();
        assert!(rep.losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn single_point_full_batch_descent_is_monotone() {
        let mut m = tiny();
        let sched = NoiseSchedule::default();
        let item = TrainItem {
            x0: vec![0.7, -0.7],
            label: Some(1),
            t: 0.4,
            noise: vec![0.3, 1.1],
        };
        let items = vec![item; 4];
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let g = batch_loss_grad(&m, &sched, &items).unwrap();
            assert!(g.loss < prev, "loss went up: {} -> {}", prev, g.loss);
            prev = g.loss;
            let p: Vec<f64> = m.params().iter().zip(&g.theta).map(|(p, g)| p - 1e-3 * g).collect();
            m.set_params(&p).unwrap();
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny();
        let sched = NoiseSchedule::default();
        let items = vec![
            TrainItem { x0: vec![0.2, 0.9], label: Some(0), t: 0.3, noise: vec![-0.5, 0.4] },
            TrainItem { x0: vec![-1.0, 0.1], label: None, t: 0.8, noise: vec![1.5, 0.2] },
        ];
        let g = batch_loss_grad(&m, &sched, &items).unwrap();
        let p = m.params();
        let h = 1e-6;
        for i in [0, 5, 17, p.len() - 1] {
            let loss_at = |s: f64| {
                let mut q = p.clone();
                q[i] += s;
                let mut mm = m.clone();
                mm.set_params(&q).unwrap();
                batch_loss_grad(&mm, &sched, &items).unwrap().loss
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            assert!((fd - g.theta[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g.theta[i]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut m = tiny();
        let sched = NoiseSchedule::default();
        let data = LabeledData::new(vec![vec![1.0, 0.0]], vec![5]).unwrap();
        assert!(train_score_matching(&mut m, &data, &sched, &TrainConfig::default(), 0).is_err());
        let data = LabeledData::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        let cfg = TrainConfig { cond_drop_prob: 1.0, ..TrainConfig::default() };
        assert!(train_score_matching(&mut m, &data, &sched, &cfg, 0).is_err());
    }
}
