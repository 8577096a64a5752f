use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::nnet::{AdamConfig, AdamW, Activation, Mlp};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 2000,
            batch_size: 128,
            optimizer: AdamConfig::with_lr(3e-3),
        }
    }
}

/// An MLP `x -> logits`; its last hidden activations are the feature map `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl ToyClassifier {
    pub fn new(input_dim: usize, num_classes: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::argument("classifier needs at least one hidden layer"));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(num_classes);
        Ok(Self {
            mlp: Mlp::new(&widths, Activation::Silu, rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.layers().len() < 2 {
            return Err(Error::argument("classifier needs at least one hidden layer"));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.layers()[self.mlp.layers().len() - 1].fan_in()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.mlp.forward(x)
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(x))
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.log_probs(x).into_iter().map(f64::exp).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let (_, tape) = self.mlp.forward_tape(x);
        tape.penultimate().to_vec()
    }

    /// `cot^T d logits / dx`.
    pub fn logits_vjp(&self, x: &[f64], cot: &[f64]) -> Vec<f64> {
        let (_, tape) = self.mlp.forward_tape(x);
        let mut gx = vec![0.0; x.len()];
        self.mlp.vjp(&tape, cot, Some(&mut gx), None);
        gx
    }

    /// `cot^T dF / dx`.
    pub fn features_vjp(&self, x: &[f64], cot: &[f64]) -> Vec<f64> {
        let (_, tape) = self.mlp.forward_tape(x);
        let mut gx = vec![0.0; x.len()];
        self.mlp.vjp_penultimate(&tape, cot, Some(&mut gx), None);
        gx
    }

    /// `log p(label | x)` and its gradient in `x`.
    pub fn log_prob_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        if label >= self.num_classes() {
            return Err(Error::argument(format!(
                "label {label} out of range for {} classes",
                self.num_classes()
            )));
        }
        let (z, tape) = self.mlp.forward_tape(x);
        let lp = log_softmax(&z);
        // d log p_k / d z = e_k - softmax(z)
        let cot: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(j, l)| f64::from(j == label) - l.exp())
            .collect();
        let mut gx = vec![0.0; x.len()];
        self.mlp.vjp(&tape, &cot, Some(&mut gx), None);
        Ok((lp[label], gx))
    }

    pub fn accuracy(&self, data: &LabeledData) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits: usize = data
            .points
            .par_iter()
            .zip(&data.labels)
            .map(|(p, &l)| usize::from(self.predict(p) == l))
            .sum();
        hits as f64 / data.len() as f64
    }
}

const CHUNK: usize = 32;

/// Mean cross-entropy and its parameter gradient over `batch` indices.
fn batch_ce_grad(clf: &ToyClassifier, data: &LabeledData, batch: &[usize]) -> (f64, Vec<f64>) {
    let n = clf.mlp.num_params();
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n];
            let mut loss = 0.0;
            for &i in chunk {
                let (z, tape) = clf.mlp.forward_tape(&data.points[i]);
                let lp = log_softmax(&z);
                let y = data.labels[i];
                loss -= lp[y];
                let cot: Vec<f64> = lp
                    .iter()
                    .enumerate()
                    .map(|(j, l)| l.exp() - f64::from(j == y))
                    .collect();
                clf.mlp.vjp(&tape, &cot, None, Some(&mut g));
            }
            (loss, g)
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        crate::tensor::axpy(scale, &g, &mut grad);
    }
    (loss * scale, grad)
}

/// Cross-entropy training with minibatches drawn with replacement.
pub fn train_classifier(data: &LabeledData, cfg: &ClassifierConfig, seed: u64) -> Result<(ToyClassifier, ClassifierReport)> {
    if data.is_empty() {
        return Err(Error::argument("empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::argument("batch_size must be positive"));
    }
    let mut clf = ToyClassifier::new(
        data.dim,
        data.num_classes(),
        &cfg.hidden,
        &mut Rng::labeled(seed, "classifier/init"),
    )?;
    let mut rng = Rng::labeled(seed, "classifier/batches");
    let mut opt = AdamW::new(cfg.optimizer, clf.mlp.num_params());
    let mut params = clf.mlp.flatten();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let (loss, grad) = batch_ce_grad(&clf, data, &batch);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        losses.push(loss);
        opt.step(&mut params, &grad);
        clf.mlp.unflatten(&params)?;
    }
    let train_accuracy = clf.accuracy(data);
    Ok((clf, ClassifierReport { losses, train_accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MixtureConfig;

    fn random_clf(seed: u64) -> ToyClassifier {
        ToyClassifier::new(2, 5, &[16, 12], &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn softmax_is_normalized() {
        let clf = random_clf(0);
        for x in [[0.0, 0.0], [3.0, -2.0], [40.0, 40.0]] {
            let s: f64 = clf.probs(&x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(clf.feature_dim(), 12);
        assert_eq!(clf.features(&[0.1, 0.2]).len(), 12);
    }

    #[test]
    fn vjps_match_finite_differences() {
        let clf = random_clf(1);
        let x = [0.3, -0.7];
        let cot = [0.5, -1.0, 0.2, 0.9, -0.3];
        let fcot: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let g = clf.logits_vjp(&x, &cot);
        let gf = clf.features_vjp(&x, &fcot);
        let (_, glp) = clf.log_prob_grad(&x, 3).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
            let fd = (dot(&cot, &clf.logits(&xp)) - dot(&cot, &clf.logits(&xm))) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", g[i]);
            let fd = (dot(&fcot, &clf.features(&xp)) - dot(&fcot, &clf.features(&xm))) / (2.0 * h);
            assert!((gf[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
            let fd = (clf.log_probs(&xp)[3] - clf.log_probs(&xm)[3]) / (2.0 * h);
            assert!((glp[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
        assert!(clf.log_prob_grad(&x, 5).is_err());
    }

    #[test]
    fn single_class_is_trivially_accurate() {
        let pts = vec![vec![0.0, 1.0], vec![0.5, -0.2], vec![-1.0, 0.3]];
        let data = LabeledData::new(pts, vec![0, 0, 0]).unwrap();
        let cfg = ClassifierConfig {
            steps: 5,
            ..ClassifierConfig::default()
        };
        let (clf, report) = train_classifier(&data, &cfg, 0).unwrap();
        assert_eq!(clf.num_classes(), 1);
        assert_eq!(report.train_accuracy, 1.0);
        assert_eq!(clf.accuracy(&data), 1.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = LabeledData {
            dim: 2,
            points: vec![],
            labels: vec![],
        };
        assert!(train_classifier(&data, &ClassifierConfig::default(), 0).is_err());
    }

    #[test]
    fn mixture_holdout_accuracy() {
        let (train, holdout) = MixtureConfig::default().split(0).unwrap();
        let (clf, report) = train_classifier(&train, &ClassifierConfig::default(), 0).unwrap();
        let n = report.losses.len();
        assert!(report.losses[n - 1] < 0.5 * report.losses[0]);
        let acc = clf.accuracy(&holdout);
        assert!(acc >= 0.9, "holdout accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (train, _) = MixtureConfig {
            train_size: 256,
            ..MixtureConfig::default()
        }
        .split(3)
        .unwrap();
        let cfg = ClassifierConfig {
            steps: 20,
            ..ClassifierConfig::default()
        };
        let (a, _) = train_classifier(&train, &cfg, 9).unwrap();
        let (b, _) = train_classifier(&train, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }
}
