use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_dims, Generator, TaskSampling, ToyClassifier};
use crate::adjoint::Want;
use crate::error::{Error, Result};
use crate::nnet::{AdamConfig, AdamW, Condition, Denoiser, Guided};
use crate::odeint::SolveStats;
use crate::rng::Rng;
use crate::sampler::initial_noise;
use crate::schedule::NoiseSchedule;

/// `G = f f^T / dim(f)`, row-major.
pub fn gram(f: &[f64]) -> Vec<f64> {
    let m = f.len() as f64;
    f.iter().flat_map(|a| f.iter().map(move |b| a * b / m)).collect()
}

/// `dL/df` given `dL/dG` for [`gram`].
pub fn gram_vjp(f: &[f64], d_g: &[f64]) -> Vec<f64> {
    let m = f.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| (d_g[i * m + j] + d_g[j * m + i]) * f[j])
                .sum::<f64>()
                / m as f64
        })
        .collect()
}

/// A content anchor: the sample the pre-finetune model generated from
/// `(x_t, cond)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub x_t: Vec<f64>,
    pub cond: Vec<f64>,
    pub label: Option<usize>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleObjective {
    pub g_style: Vec<f64>,
    pub triplets: Vec<Triplet>,
    pub w_s: f64,
    pub w_c: f64,
}

impl StyleObjective {
    /// Style target taken from a single reference point.
    pub fn from_reference(classifier: &ToyClassifier, reference: &[f64], triplets: Vec<Triplet>) -> Self {
        Self {
            g_style: gram(&classifier.features(reference)),
            triplets,
            w_s: 1.0,
            w_c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleLoss {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    /// `dL/dx` for each generated sample.
    pub grads: Vec<Vec<f64>>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// `(1/N) sum_i [w_s mse(G_style, G(F(gen_i))) + w_c mse(F(orig_i), F(gen_i))]`.
pub fn style_content_loss(
    classifier: &ToyClassifier,
    style: &StyleObjective,
    generated: &[Vec<f64>],
    originals: &[Vec<f64>],
) -> Result<StyleLoss> {
    if generated.is_empty() || generated.len() != originals.len() {
        return Err(Error::argument("generated batch must be non-empty and aligned with originals"));
    }
    let m = classifier.feature_dim();
    if style.g_style.len() != m * m {
        return Err(Error::argument(format!(
            "style Gram matrix has {} entries, expected {}",
            style.g_style.len(),
            m * m
        )));
    }
    let n = generated.len() as f64;
    let parts: Vec<(f64, f64, Vec<f64>)> = generated
        .par_iter()
        .zip(originals)
        .map(|(x, x_orig)| {
            let f = classifier.features(x);
            let f_orig = classifier.features(x_orig);
            let g = gram(&f);
            let ls = mse(&style.g_style, &g);
            let lc = mse(&f_orig, &f);
            let d_g: Vec<f64> = g
                .iter()
                .zip(&style.g_style)
                .map(|(gi, si)| style.w_s * 2.0 * (gi - si) / (m * m) as f64 / n)
                .collect();
            let mut d_f = gram_vjp(&f, &d_g);
            for ((d, fi), oi) in d_f.iter_mut().zip(&f).zip(&f_orig) {
                *d += style.w_c * 2.0 * (fi - oi) / m as f64 / n;
            }
            (ls, lc, classifier.features_vjp(x, &d_f))
        })
        .collect();
    let mut out = StyleLoss {
        total: 0.0,
        style: 0.0,
        content: 0.0,
        grads: Vec::with_capacity(parts.len()),
    };
    for (ls, lc, g) in parts {
        out.style += ls / n;
        out.content += lc / n;
        out.grads.push(g);
    }
    out.total = style.w_s * out.style + style.w_c * out.content;
    Ok(out)
}

/// `per_label` anchors for each label, generated by `model` from seeded noise.
pub fn make_triplets(
    model: &Denoiser,
    sched: &NoiseSchedule,
    sampling: TaskSampling,
    labels: &[usize],
    per_label: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let gen = Generator::new(model, sched, sampling)?;
    let jobs: Vec<(usize, usize)> = labels
        .iter()
        .flat_map(|&l| (0..per_label).map(move |i| (l, i)))
        .collect();
    jobs.par_iter()
        .map(|&(label, i)| {
            let mut rng = Rng::labeled(seed, &format!("finetune/triplet/{label}/{i}"));
            let x_t = initial_noise(sched, model.data_dim(), &mut rng);
            let eps = gen.guided(&Condition::Label(label))?;
            let x0 = gen.generate(&eps, &x_t)?.x0;
            Ok(Triplet {
                x_t,
                cond: eps.cond().to_vec(),
                label: Some(label),
                x0,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of trailing MLP layers that are updated.
    pub trainable_layers: usize,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 1,
            trainable_layers: 2,
            optimizer: AdamConfig::with_lr(1e-4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub total: f64,
    pub style: f64,
    pub content: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Full-set losses before the first epoch and after every epoch.
    pub curve: Vec<FinetuneEpoch>,
    /// Flat parameter range `[start, end)` that was trainable.
    pub trainable: (usize, usize),
    pub updates: usize,
    pub stats: SolveStats,
}

impl FinetuneReport {
    pub fn initial_loss(&self) -> f64 {
        self.curve[0].total
    }

    pub fn final_loss(&self) -> f64 {
        self.curve[self.curve.len() - 1].total
    }
}

/// Minimize the style/content objective over the last
/// `cfg.trainable_layers` MLP layers of `model` in place.
pub fn finetune_weights(
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    sampling: TaskSampling,
    classifier: &ToyClassifier,
    style: &StyleObjective,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    check_dims(model, classifier)?;
    if style.triplets.is_empty() {
        return Err(Error::argument("empty triplet set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::argument("batch_size must be positive"));
    }
    for t in &style.triplets {
        if t.cond.len() != model.cond_dim() || t.x_t.len() != model.data_dim() || t.x0.len() != model.data_dim() {
            return Err(Error::argument("triplet does not match the model dimensions"));
        }
    }
    let offsets = model.mlp().layer_offsets();
    let n_layers = offsets.len();
    let k = cfg.trainable_layers.min(n_layers);
    let total = model.num_params();
    let start = if k == 0 { total } else { offsets[n_layers - k] };
    let mut params = model.params();
    let mut opt = AdamW::new(cfg.optimizer, total - start);
    let mut stats = SolveStats::default();
    let all: Vec<usize> = (0..style.triplets.len()).collect();
    let mut curve = vec![full_loss(model, sched, sampling, classifier, style, 0, &mut stats)?];
    let mut rng = Rng::labeled(seed, "finetune/order");
    let mut updates = 0;
    for epoch in 0..cfg.epochs {
        let mut order = all.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for batch in order.chunks(cfg.batch_size) {
            let grad = batch_theta_grad(model, sched, sampling, classifier, style, batch, &mut stats)?;
            if start < total {
                opt.step(&mut params[start..], &grad[start..]);
            }
            model.set_params(&params)?;
            updates += 1;
        }
        curve.push(full_loss(model, sched, sampling, classifier, style, epoch + 1, &mut stats)?);
    }
    Ok(FinetuneReport {
        curve,
        trainable: (start, total),
        updates,
        stats,
    })
}

fn generate_batch(
    model: &Denoiser,
    gen: &Generator<'_>,
    style: &StyleObjective,
    batch: &[usize],
) -> Result<Vec<super::Generated>> {
    batch
        .par_iter()
        .map(|&i| {
            let t = &style.triplets[i];
            let eps = Guided::from_vector(model, t.cond.clone(), gen.sampling.guidance);
            gen.generate(&eps, &t.x_t)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn full_loss(
    model: &Denoiser,
    sched: &NoiseSchedule,
    sampling: TaskSampling,
    classifier: &ToyClassifier,
    style: &StyleObjective,
    epoch: usize,
    stats: &mut SolveStats,
) -> Result<FinetuneEpoch> {
    let gen = Generator::new(model, sched, sampling)?;
    let all: Vec<usize> = (0..style.triplets.len()).collect();
    let fwd = generate_batch(model, &gen, style, &all)?;
    for f in &fwd {
        stats.merge(&f.stats);
    }
    let xs: Vec<Vec<f64>> = fwd.into_iter().map(|f| f.x0).collect();
    let originals: Vec<Vec<f64>> = style.triplets.iter().map(|t| t.x0.clone()).collect();
    let l = style_content_loss(classifier, style, &xs, &originals)?;
    Ok(FinetuneEpoch {
        epoch,
        total: l.total,
        style: l.style,
        content: l.content,
    })
}

/// Summed `dL/dtheta` over `batch`, accumulated in batch order.
fn batch_theta_grad(
    model: &Denoiser,
    sched: &NoiseSchedule,
    sampling: TaskSampling,
    classifier: &ToyClassifier,
    style: &StyleObjective,
    batch: &[usize],
    stats: &mut SolveStats,
) -> Result<Vec<f64>> {
    let gen = Generator::new(model, sched, sampling)?;
    let fwd = generate_batch(model, &gen, style, batch)?;
    let xs: Vec<Vec<f64>> = fwd.iter().map(|f| f.x0.clone()).collect();
    let originals: Vec<Vec<f64>> = batch.iter().map(|&i| style.triplets[i].x0.clone()).collect();
    let loss = style_content_loss(classifier, style, &xs, &originals)?;
    let want = Want {
        theta: true,
        cond: false,
        time: false,
    };
    let results: Vec<Result<(Vec<f64>, SolveStats)>> = batch
        .par_iter()
        .zip(&fwd)
        .zip(&loss.grads)
        .map(|((&i, f), g)| {
            let eps = Guided::from_vector(model, style.triplets[i].cond.clone(), gen.sampling.guidance);
            let (grads, s) = gen.backward(&eps, f, g, want)?;
            Ok((grads.theta.expect("theta requested"), s))
        })
        .collect();
    let mut total = vec![0.0; model.num_params()];
    for (f, r) in fwd.iter().zip(results) {
        let (g, s) = r?;
        stats.merge(&f.stats);
        stats.merge(&s);
        crate::tensor::axpy(1.0, &g, &mut total);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::DenoiserConfig;

    fn fixture() -> (Denoiser, ToyClassifier, NoiseSchedule) {
        let cfg = DenoiserConfig {
            hidden: vec![16, 16, 16],
            ..DenoiserConfig::default()
        };
        let model = Denoiser::new(cfg, &mut Rng::new(7)).unwrap();
        let clf = ToyClassifier::new(2, 8, &[16, 16], &mut Rng::new(8)).unwrap();
        (model, clf, NoiseSchedule::default())
    }

    fn sampling() -> TaskSampling {
        TaskSampling {
            steps: 6,
            ..TaskSampling::default()
        }
    }

    #[test]
    fn gram_gradient_matches_finite_differences() {
        let f = [0.7, -0.3, 1.1, 0.2];
        let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 0.2).collect();
        let loss = |f: &[f64]| mse(&target, &gram(f));
        let d_g: Vec<f64> = gram(&f).iter().zip(&target).map(|(g, t)| 2.0 * (g - t) / 16.0).collect();
        let grad = gram_vjp(&f, &d_g);
        let h = 1e-6;
        for i in 0..4 {
            let mut fp = f;
            let mut fm = f;
            fp[i] += h;
            fm[i] -= h;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-6, "{} vs {fd}", grad[i]);
        }
        let g = gram(&f);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g[i * 4 + j], g[j * 4 + i]);
            }
        }
    }

    #[test]
    fn loss_limits_and_gradient() {
        let (_, clf, _) = fixture();
        let xs = vec![vec![0.3, -0.2], vec![1.0, 0.4]];
        let originals = xs.clone();
        let mut style = StyleObjective::from_reference(&clf, &[0.9, 0.1], vec![]);
        // identical features: no content loss
        let l = style_content_loss(&clf, &style, &xs, &originals).unwrap();
        assert_eq!(l.content, 0.0);
        assert!(l.style > 0.0);
        style.w_s = 0.0;
        let shifted = vec![vec![0.5, -0.2], vec![1.0, 0.0]];
        let l = style_content_loss(&clf, &style, &shifted, &originals).unwrap();
        assert_eq!(l.total, l.content);
        // gradient against finite differences on the full objective
        style.w_s = 0.7;
        let l = style_content_loss(&clf, &style, &shifted, &originals).unwrap();
        let h = 1e-6;
        for s in 0..2 {
            for i in 0..2 {
                let mut p = shifted.clone();
                let mut m = shifted.clone();
                p[s][i] += h;
                m[s][i] -= h;
                let fd = (style_content_loss(&clf, &style, &p, &originals).unwrap().total
                    - style_content_loss(&clf, &style, &m, &originals).unwrap().total)
                    / (2.0 * h);
                assert!((l.grads[s][i] - fd).abs() <= 1e-6 * fd.abs().max(1e-4), "{} vs {fd}", l.grads[s][i]);
            }
        }
        assert!(style_content_loss(&clf, &style, &[], &[]).is_err());
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let (mut model, clf, sched) = fixture();
        let before = model.clone();
        let triplets = make_triplets(&model, &sched, sampling(), &[0, 1], 2, 0).unwrap();
        let style = StyleObjective::from_reference(&clf, &[1.0, 0.0], triplets);
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let r = finetune_weights(&mut model, &sched, sampling(), &clf, &style, &cfg, 0).unwrap();
        assert_eq!(model, before);
        assert_eq!(r.curve.len(), 1);
        assert_eq!(r.updates, 0);
    }

    #[test]
    fn frozen_layers_are_bitwise_unchanged() {
        let (mut model, clf, sched) = fixture();
        let before = model.params();
        let triplets = make_triplets(&model, &sched, sampling(), &[0, 3, 5], 1, 1).unwrap();
        let style = StyleObjective::from_reference(&clf, &[0.0, -1.0], triplets);
        let cfg = FinetuneConfig {
            epochs: 2,
            optimizer: AdamConfig::with_lr(1e-2),
            ..FinetuneConfig::default()
        };
        let r = finetune_weights(&mut model, &sched, sampling(), &clf, &style, &cfg, 0).unwrap();
        let after = model.params();
        let (start, end) = r.trainable;
        assert_eq!(end, after.len());
        let offsets = model.mlp().layer_offsets();
        assert_eq!(start, offsets[offsets.len() - 2]);
        assert_eq!(before[..start], after[..start]);
        assert!(before[start..] != after[start..]);
        assert_eq!(r.updates, 6);
        assert!(r.final_loss() < r.initial_loss());
    }

    #[test]
    fn pure_content_objective_keeps_features() {
        let (mut model, clf, sched) = fixture();
        let triplets = make_triplets(&model, &sched, sampling(), &[2], 3, 2).unwrap();
        let mut style = StyleObjective::from_reference(&clf, &[0.0, 1.0], triplets);
        style.w_s = 0.0;
        let r = finetune_weights(&mut model, &sched, sampling(), &clf, &style, &FinetuneConfig::default(), 0).unwrap();
        assert_eq!(r.initial_loss(), 0.0);
        assert!(r.final_loss() <= r.initial_loss());
    }

    #[test]
    fn empty_triplets_are_rejected() {
        let (mut model, clf, sched) = fixture();
        let style = StyleObjective::from_reference(&clf, &[0.0, 1.0], vec![]);
        let r = finetune_weights(&mut model, &sched, sampling(), &clf, &style, &FinetuneConfig::default(), 0);
        assert!(r.is_err());
    }
}
