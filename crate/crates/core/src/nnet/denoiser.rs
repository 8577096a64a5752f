//! The noise-prediction network `eps(x, t, c)` and its classifier-free
//! guidance wrapper.
//!
//! The network input is `[x, sin(2 pi f_k t)..., cos(2 pi f_k t)..., c]`. The
//! conditioning vector `c` is either a row of the embedding table (class rows
//! `0..K`, null row `K`) or a free vector supplied by the caller.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::mlp::{Activation, Dense, Mlp, Tape};
use crate::error::{ensure_finite, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of Fourier time frequencies.
    pub time_freqs: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    pub cond_dim: usize,
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            time_freqs: 16,
            freq_min: 0.25,
            freq_max: 16.0,
            cond_dim: 8,
            num_classes: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.num_classes == 0 {
            return Err(Error::argument("data_dim and num_classes must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::argument("hidden widths must be positive"));
        }
        if self.time_freqs > 0 && !(self.freq_min > 0.0 && self.freq_max >= self.freq_min) {
            return Err(Error::argument("need 0 < freq_min <= freq_max"));
        }
        Ok(())
    }

    fn frequencies(&self) -> Vec<f64> {
        let n = self.time_freqs;
        if n == 1 {
            return vec![self.freq_min];
        }
        let ratio = (self.freq_max / self.freq_min).ln();
        (0..n)
            .map(|k| self.freq_min * (ratio * k as f64 / (n - 1) as f64).exp())
            .collect()
    }
}

/// What the sampler conditions on.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Null,
    Label(usize),
    Embedding(Vec<f64>),
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgConfig {
    /// Guidance scale `s`; `1` is purely conditional.
    pub scale: f64,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

/// Output of [`Denoiser::eps_vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpsGrads {
    pub x: Vec<f64>,
    /// Flattened in [`Mlp`] parameter order.
    pub theta: Vec<f64>,
    pub c: Vec<f64>,
    pub t: f64,
}

impl EpsGrads {
    pub fn zeros(model: &Denoiser) -> Self {
        Self {
            x: vec![0.0; model.data_dim()],
            theta: vec![0.0; model.num_params()],
            c: vec![0.0; model.cond_dim()],
            t: 0.0,
        }
    }
}

/// Accumulation targets for a reverse pass; `None` skips that block.
pub struct GradSink<'a> {
    pub x: &'a mut [f64],
    pub theta: Option<&'a mut [f64]>,
    pub c: Option<&'a mut [f64]>,
    pub t: Option<&'a mut f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    time_freqs: Vec<f64>,
    cond_table: Tensor,
    mlp: Mlp,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.data_dim + 2 * config.time_freqs + config.cond_dim];
        widths.extend(&config.hidden);
        widths.push(config.data_dim);
        let mut mlp = Mlp::new(&widths, config.activation, rng)?;
        // small output layer so the untrained net starts near eps = 0
        if let Some(last) = mlp.layers_mut().last_mut() {
            last.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
        }
        let rows = config.num_classes + 1;
        let cond_table = Tensor::new(
            vec![rows, config.cond_dim],
            rng.normal_vec(rows * config.cond_dim, 1.0),
        )?;
        Ok(Self {
            time_freqs: config.frequencies(),
            config,
            cond_table,
            mlp,
        })
    }

    /// Rebuild from stored parts (checkpoint loading).
    pub fn from_parts(
        config: DenoiserConfig,
        time_freqs: Vec<f64>,
        cond_table: Tensor,
        mlp: Mlp,
    ) -> Result<Self> {
        config.validate()?;
        let in_dim = config.data_dim + 2 * time_freqs.len() + config.cond_dim;
        if time_freqs.len() != config.time_freqs
            || mlp.input_dim() != in_dim
            || mlp.output_dim() != config.data_dim
            || cond_table.shape() != [config.num_classes + 1, config.cond_dim]
        {
            return Err(Error::argument("denoiser parts do not fit together"));
        }
        Ok(Self {
            config,
            time_freqs,
            cond_table,
            mlp,
        })
    }

    /// A network with no hidden layer and zero weights, so `eps == bias` everywhere.
    pub fn constant(bias: &[f64], time_freqs: usize, cond_dim: usize, num_classes: usize) -> Self {
        let config = DenoiserConfig {
            data_dim: bias.len(),
            hidden: vec![],
            time_freqs,
            cond_dim,
            num_classes,
            ..DenoiserConfig::default()
        };
        let in_dim = bias.len() + 2 * time_freqs + cond_dim;
        let layer = Dense {
            weight: Tensor::zeros(vec![bias.len(), in_dim]),
            bias: Tensor::vector(bias.to_vec()),
        };
        let rows = num_classes + 1;
        Self {
            time_freqs: config.frequencies(),
            cond_table: Tensor::new(
                vec![rows, cond_dim],
                (0..rows * cond_dim).map(|i| (i as f64 * 0.37).sin()).collect(),
            )
            .expect("shape"),
            mlp: Mlp::from_layers(vec![layer], config.activation).expect("single layer"),
            config,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn null_row(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn time_freqs(&self) -> &[f64] {
        &self.time_freqs
    }

    pub fn cond_table(&self) -> &Tensor {
        &self.cond_table
    }

    pub fn cond_table_mut(&mut self) -> &mut Tensor {
        &mut self.cond_table
    }

    pub fn params(&self) -> Vec<f64> {
        self.mlp.flatten()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.mlp.unflatten(flat)
    }

    /// Table row for a label (`None` is the null row), or a free vector passed through.
    pub fn embed(&self, condition: &Condition) -> Result<Vec<f64>> {
        match condition {
            Condition::Null => Ok(self.cond_table.row(self.null_row()).to_vec()),
            Condition::Label(k) if *k < self.num_classes() => Ok(self.cond_table.row(*k).to_vec()),
            Condition::Label(k) => Err(Error::argument(format!(
                "label {k} out of range for {} classes",
                self.num_classes()
            ))),
            Condition::Embedding(v) => {
                if v.len() != self.cond_dim() {
                    return Err(Error::argument(format!(
                        "embedding has dim {}, model expects {}",
                        v.len(),
                        self.cond_dim()
                    )));
                }
                Ok(v.clone())
            }
        }
    }

    pub fn embed_label(&self, label: Option<usize>) -> Result<Vec<f64>> {
        self.embed(&label.map_or(Condition::Null, Condition::Label))
    }

    fn check(&self, x: &[f64], t: f64, c: &[f64]) -> Result<()> {
        if x.len() != self.data_dim() || c.len() != self.cond_dim() {
            return Err(Error::argument(format!(
                "expected x[{}] and c[{}], got x[{}] and c[{}]",
                self.data_dim(),
                self.cond_dim(),
                x.len(),
                c.len()
            )));
        }
        ensure_finite("x", x)?;
        ensure_finite("c", c)?;
        if !t.is_finite() {
            return Err(Error::Data(format!("t = {t} is not finite")));
        }
        Ok(())
    }

    fn input(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.mlp.input_dim());
        v.extend_from_slice(x);
        v.extend(self.time_freqs.iter().map(|f| (TAU * f * t).sin()));
        v.extend(self.time_freqs.iter().map(|f| (TAU * f * t).cos()));
        v.extend_from_slice(c);
        v
    }

    pub fn eps_forward(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>> {
        self.check(x, t, c)?;
        Ok(self.eval(x, t, c))
    }

    pub(crate) fn eval(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        self.mlp.forward(&self.input(x, t, c))
    }

    pub(crate) fn eval_tape(&self, x: &[f64], t: f64, c: &[f64]) -> (Vec<f64>, Tape) {
        self.mlp.forward_tape(&self.input(x, t, c))
    }

    /// Exact `a^T d eps / d(x, theta, c, t)`.
    pub fn eps_vjp(&self, x: &[f64], t: f64, c: &[f64], a: &[f64]) -> Result<EpsGrads> {
        self.check(x, t, c)?;
        if a.len() != self.data_dim() {
            return Err(Error::argument(format!(
                "cotangent has dim {}, expected {}",
                a.len(),
                self.data_dim()
            )));
        }
        ensure_finite("cotangent", a)?;
        let mut g = EpsGrads::zeros(self);
        let (_, tape) = self.eval_tape(x, t, c);
        self.backward(
            &tape,
            t,
            a,
            1.0,
            GradSink {
                x: &mut g.x,
                theta: Some(&mut g.theta),
                c: Some(&mut g.c),
                t: Some(&mut g.t),
            },
        );
        Ok(g)
    }

    /// Accumulate `scale * a^T d eps` into `sink`, given a tape from the forward pass.
    pub(crate) fn backward(&self, tape: &Tape, t: f64, a: &[f64], scale: f64, sink: GradSink<'_>) {
        let scaled: Vec<f64>;
        let cot = if scale == 1.0 {
            a
        } else {
            scaled = a.iter().map(|v| v * scale).collect();
            &scaled
        };
        let d = self.data_dim();
        let nf = self.time_freqs.len();
        let mut g_in = vec![0.0; self.mlp.input_dim()];
        self.mlp.vjp(tape, cot, Some(&mut g_in), sink.theta);
        crate::tensor::axpy(1.0, &g_in[..d], sink.x);
        if let Some(gc) = sink.c {
            crate::tensor::axpy(1.0, &g_in[d + 2 * nf..], gc);
        }
        if let Some(gt) = sink.t {
            let (g_sin, g_cos) = g_in[d..d + 2 * nf].split_at(nf);
            let mut acc = 0.0;
            for (k, f) in self.time_freqs.iter().enumerate() {
                let w = TAU * f;
                acc += g_sin[k] * w * (w * t).cos() - g_cos[k] * w * (w * t).sin();
            }
            *gt += acc;
        }
    }

    /// Guided prediction `s eps(x,t,c) + (1-s) eps(x,t,null)`.
    pub fn cfg_eval(&self, x: &[f64], t: f64, c: &[f64], cfg: &CfgConfig) -> Result<Vec<f64>> {
        self.check(x, t, c)?;
        let guided = Guided::from_vector(self, c.to_vec(), *cfg);
        Ok(guided.eval(x, t))
    }

    /// Reverse pass of [`cfg_eval`](Self::cfg_eval): weights `s` and `1 - s`
    /// on the two branches, parameter gradients summed.
    pub fn cfg_vjp(
        &self,
        x: &[f64],
        t: f64,
        c: &[f64],
        cfg: &CfgConfig,
        a: &[f64],
    ) -> Result<EpsGrads> {
        self.check(x, t, c)?;
        let guided = Guided::from_vector(self, c.to_vec(), *cfg);
        let mut g = EpsGrads::zeros(self);
        guided.eval_vjp(
            x,
            t,
            a,
            GradSink {
                x: &mut g.x,
                theta: Some(&mut g.theta),
                c: Some(&mut g.c),
                t: Some(&mut g.t),
            },
        );
        Ok(g)
    }
}

/// A denoiser bound to a conditioning vector and guidance scale; what the
/// ODE right-hand sides call.
#[derive(Debug, Clone)]
pub struct Guided<'a> {
    model: &'a Denoiser,
    cond: Vec<f64>,
    /// Present when the unconditional branch must be evaluated too.
    null: Option<Vec<f64>>,
    scale: f64,
}

impl<'a> Guided<'a> {
    pub fn new(model: &'a Denoiser, condition: &Condition, cfg: CfgConfig) -> Result<Self> {
        if !cfg.scale.is_finite() {
            return Err(Error::argument("guidance scale must be finite"));
        }
        let cond = model.embed(condition)?;
        if condition.is_null() {
            return Ok(Self {
                model,
                cond,
                null: None,
                scale: 1.0,
            });
        }
        Ok(Self::from_vector(model, cond, cfg))
    }

    /// Guide with an explicit conditioning vector instead of a table row.
    pub fn with_vector(model: &'a Denoiser, cond: Vec<f64>, cfg: CfgConfig) -> Result<Self> {
        if cond.len() != model.cond_dim() {
            return Err(Error::argument(format!(
                "condition has dim {}, model expects {}",
                cond.len(),
                model.cond_dim()
            )));
        }
        crate::error::ensure_finite("condition", &cond)?;
        Ok(Self::from_vector(model, cond, cfg))
    }

    pub(crate) fn from_vector(model: &'a Denoiser, cond: Vec<f64>, cfg: CfgConfig) -> Self {
        let null = (cfg.scale != 1.0).then(|| model.cond_table.row(model.null_row()).to_vec());
        Self {
            model,
            cond,
            null,
            scale: cfg.scale,
        }
    }

    pub fn model(&self) -> &Denoiser {
        self.model
    }

    pub fn cond(&self) -> &[f64] {
        &self.cond
    }

    /// Network evaluations per call of [`eval`](Self::eval).
    pub fn network_calls(&self) -> usize {
        if self.null.is_some() {
            2
        } else {
            1
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = self.model.eval(x, t, &self.cond);
        if let Some(null) = &self.null {
            let un = self.model.eval(x, t, null);
            let s = self.scale;
            for (o, u) in out.iter_mut().zip(un) {
                *o = s * *o + (1.0 - s) * u;
            }
        }
        out
    }

    /// Evaluate and accumulate `a^T d eps~` in one pass per branch.
    pub fn eval_vjp(&self, x: &[f64], t: f64, a: &[f64], sink: GradSink<'_>) -> Vec<f64> {
        let GradSink {
            x: gx,
            mut theta,
            c,
            t: mut gt,
        } = sink;
        let (mut out, tape) = self.model.eval_tape(x, t, &self.cond);
        self.model.backward(
            &tape,
            t,
            a,
            self.scale,
            GradSink {
                x: &mut *gx,
                theta: theta.as_deref_mut(),
                c,
                t: gt.as_deref_mut(),
            },
        );
        if let Some(null) = &self.null {
            let s = self.scale;
            let (un, tape_u) = self.model.eval_tape(x, t, null);
            for (o, u) in out.iter_mut().zip(un) {
                *o = s * *o + (1.0 - s) * u;
            }
            self.model.backward(
                &tape_u,
                t,
                a,
                1.0 - s,
                GradSink {
                    x: gx,
                    theta,
                    c: None,
                    t: gt,
                },
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn small_model(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            hidden: vec![16, 16],
            time_freqs: 4,
            cond_dim: 3,
            num_classes: 4,
            ..DenoiserConfig::default()
        };
        let mut m = Denoiser::new(cfg, &mut Rng::new(seed)).unwrap();
        // undo the output damping so gradients are O(1)
        let last = m.mlp_mut().layers_mut().last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|w| *w *= 10.0);
        m
    }

    #[test]
    fn constant_model_returns_bias() {
        let m = Denoiser::constant(&[0.3, -1.2], 4, 3, 2);
        let c = m.embed_label(Some(1)).unwrap();
        assert_eq!(m.eps_forward(&[5.0, -7.0], 0.4, &c).unwrap(), vec![0.3, -1.2]);
        assert_eq!(m.eps_forward(&[0.0, 1.0], 0.9, &c).unwrap(), vec![0.3, -1.2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = small_model(1);
        let c = m.embed_label(Some(2)).unwrap();
        let a = m.eps_forward(&[0.1, 0.2], 0.3, &c).unwrap();
        let b = m.eps_forward(&[0.1, 0.2], 0.3, &c).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn forward_matches_hand_computed_two_layer_net() {
        // input = [x0, x1, sin(2 pi t), cos(2 pi t), c0]; one tanh hidden layer of width 2
        let cfg = DenoiserConfig {
            data_dim: 2,
            hidden: vec![2],
            activation: Activation::Tanh,
            time_freqs: 1,
            freq_min: 1.0,
            freq_max: 1.0,
            cond_dim: 1,
            num_classes: 1,
        };
        let w1 = Tensor::new(vec![2, 5], vec![0.5, -0.25, 0.1, 0.2, 1.0, 0.3, 0.8, -0.4, 0.0, -0.5]).unwrap();
        let b1 = Tensor::vector(vec![0.1, -0.2]);
        let w2 = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.5, 0.5]).unwrap();
        let b2 = Tensor::vector(vec![0.05, 0.0]);
        let mlp = Mlp::from_layers(
            vec![Dense { weight: w1, bias: b1 }, Dense { weight: w2, bias: b2 }],
            Activation::Tanh,
        )
        .unwrap();
        let table = Tensor::new(vec![2, 1], vec![0.7, 0.0]).unwrap();
        let m = Denoiser::from_parts(cfg, vec![1.0], table, mlp).unwrap();
        let (x, t) = ([0.4, -0.6], 0.125);
        let (s, c) = ((TAU * t).sin(), (TAU * t).cos());
        let inp = [0.4, -0.6, s, c, 0.7];
        let h0 = (0.1 + 0.5 * inp[0] - 0.25 * inp[1] + 0.1 * inp[2] + 0.2 * inp[3] + 1.0 * inp[4]).tanh();
        let h1 = (-0.2 + 0.3 * inp[0] + 0.8 * inp[1] - 0.4 * inp[2] + 0.0 * inp[3] - 0.5 * inp[4]).tanh();
        let expect = [0.05 + h0 + 2.0 * h1, -1.5 * h0 + 0.5 * h1];
        let got = m.eps_forward(&x, t, &m.embed_label(Some(0)).unwrap()).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-14 && (got[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn vjp_zero_cotangent() {
        let m = small_model(2);
        let c = m.embed_label(Some(0)).unwrap();
        let g = m.eps_vjp(&[0.3, 0.1], 0.5, &c, &[0.0, 0.0]).unwrap();
        assert!(g.x.iter().chain(&g.theta).chain(&g.c).all(|&v| v == 0.0));
        assert_eq!(g.t, 0.0);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let m = small_model(3);
        let c = m.embed_label(Some(1)).unwrap();
        let (x, t, a) = ([0.3, -0.8], 0.41, [0.7, -1.1]);
        let g = m.eps_vjp(&x, t, &c, &a).unwrap();
        let h = 1e-5;
        let obj = |x: &[f64], t: f64, c: &[f64]| dot(&a, &m.eps_forward(x, t, c).unwrap());
        let rel = |an: f64, fd: f64| (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        for i in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += h;
            xm[i] -= h;
            let fd = (obj(&xp, t, &c) - obj(&xm, t, &c)) / (2.0 * h);
            assert!(rel(g.x[i], fd) < 1e-6, "x[{i}] {} vs {fd}", g.x[i]);
        }
        for i in 0..c.len() {
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp[i] += h;
            cm[i] -= h;
            let fd = (obj(&x, t, &cp) - obj(&x, t, &cm)) / (2.0 * h);
            assert!(rel(g.c[i], fd) < 1e-6, "c[{i}] {} vs {fd}", g.c[i]);
        }
        let fd = (obj(&x, t + h, &c) - obj(&x, t - h, &c)) / (2.0 * h);
        assert!(rel(g.t, fd) < 1e-6, "t {} vs {fd}", g.t);
    }

    #[test]
    fn directional_derivatives_in_x_and_theta() {
        let m = small_model(4);
        let c = m.embed_label(Some(3)).unwrap();
        let (x, t, a) = ([-0.2, 0.5], 0.7, [1.3, 0.4]);
        let g = m.eps_vjp(&x, t, &c, &a).unwrap();
        let mut rng = Rng::new(10);
        let h = 1e-5;
        let theta = m.params();
        for _ in 0..20 {
            let u = rng.normal_vec(2, 1.0);
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            let fd = (dot(&a, &m.eps_forward(&xp, t, &c).unwrap()) - dot(&a, &m.eps_forward(&xm, t, &c).unwrap())) / (2.0 * h);
            let an = dot(&g.x, &u);
            assert!((an - fd).abs() <= 1e-5 * an.abs().max(1e-3), "{an} vs {fd}");

            let v = rng.normal_vec(theta.len(), 1.0);
            let mut mp = m.clone();
            mp.set_params(&theta.iter().zip(&v).map(|(a, b)| a + h * b).collect::<Vec<_>>()).unwrap();
            let mut mm = m.clone();
            mm.set_params(&theta.iter().zip(&v).map(|(a, b)| a - h * b).collect::<Vec<_>>()).unwrap();
            let fd = (dot(&a, &mp.eps_forward(&x, t, &c).unwrap()) - dot(&a, &mm.eps_forward(&x, t, &c).unwrap())) / (2.0 * h);
            let an = dot(&g.theta, &v);
            assert!((an - fd).abs() <= 1e-5 * an.abs().max(1e-3), "{an} vs {fd}");
        }
    }

    #[test]
    fn cfg_limits_and_affinity() {
        let m = small_model(5);
        let c = m.embed_label(Some(2)).unwrap();
        let null = m.embed_label(None).unwrap();
        let (x, t) = ([0.6, 0.1], 0.2);
        let cond = m.eps_forward(&x, t, &c).unwrap();
        let uncond = m.eps_forward(&x, t, &null).unwrap();
        assert_eq!(m.cfg_eval(&x, t, &c, &CfgConfig { scale: 1.0 }).unwrap(), cond);
        let s0 = m.cfg_eval(&x, t, &c, &CfgConfig { scale: 0.0 }).unwrap();
        for (a, b) in s0.iter().zip(&uncond) {
            assert!((a - b).abs() < 1e-15);
        }
        let s3 = m.cfg_eval(&x, t, &c, &CfgConfig { scale: 3.0 }).unwrap();
        for i in 0..2 {
            assert!((s3[i] - (3.0 * cond[i] - 2.0 * uncond[i])).abs() < 1e-14);
        }

        let a = [0.9, -0.3];
        let s = 2.5;
        let g = m.cfg_vjp(&x, t, &c, &CfgConfig { scale: s }, &a).unwrap();
        let gc = m.eps_vjp(&x, t, &c, &a).unwrap();
        let gu = m.eps_vjp(&x, t, &null, &a).unwrap();
        for (i, v) in g.theta.iter().enumerate() {
            let e = s * gc.theta[i] + (1.0 - s) * gu.theta[i];
            assert!((v - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
        for i in 0..2 {
            let e = s * gc.x[i] + (1.0 - s) * gu.x[i];
            assert!((g.x[i] - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
        for i in 0..c.len() {
            assert!((g.c[i] - s * gc.c[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn embedding_lookup() {
        let m = small_model(6);
        assert_eq!(m.embed(&Condition::Null).unwrap(), m.cond_table().row(4));
        assert_eq!(m.embed(&Condition::Label(3)).unwrap(), m.cond_table().row(3));
        let v = vec![1.0, 2.0, 3.0];
        assert_eq!(m.embed(&Condition::Embedding(v.clone())).unwrap(), v);
        assert!(m.embed(&Condition::Label(4)).is_err());
        assert!(m.embed(&Condition::Embedding(vec![1.0])).is_err());
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let m = small_model(7);
        let c = m.embed_label(None).unwrap();
        assert!(matches!(m.eps_forward(&[1.0], 0.1, &c), Err(Error::Argument(_))));
        assert!(matches!(m.eps_forward(&[f64::NAN, 0.0], 0.1, &c), Err(Error::Data(_))));
        assert!(m.eps_vjp(&[0.0, 0.0], 0.1, &c, &[1.0]).is_err());
    }
}
