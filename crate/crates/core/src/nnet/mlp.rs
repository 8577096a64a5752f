//! Fully connected network with a hand-written reverse pass.
//!
//! Parameters flatten layer by layer: the weight matrix (row-major,
//! `[out, in]`) followed by the bias. The activation is applied after every
//! layer except the last.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Activation::Tanh => 0.0,
            Activation::Silu => 1.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Silu),
            _ => Err(Error::Format(format!("unknown activation code {code}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        let n_in = self.fan_in();
        out.clear();
        out.extend(
            self.weight
                .data()
                .chunks_exact(n_in)
                .zip(self.bias.data())
                .map(|(row, b)| b + crate::tensor::dot(row, input)),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Values saved by [`Mlp::forward_tape`] for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    /// Input of the final layer, i.e. the last hidden activations.
    pub fn penultimate(&self) -> &[f64] {
        self.inputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// `widths = [input, hidden..., output]`; LeCun-normal weights, zero biases.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::argument(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let std = (1.0 / n_in as f64).sqrt();
                Dense {
                    weight: Tensor::new(vec![n_out, n_in], rng.normal_vec(n_in * n_out, std))
                        .expect("shape matches"),
                    bias: Tensor::zeros(vec![n_out]),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::argument("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.fan_out()] {
                return Err(Error::argument(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::argument(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.fan_in(),
                    layers[i - 1].fan_out()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Offset of each layer's block inside the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.weight.len() + l.bias.len();
                o
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::argument(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|z| *z = self.activation.apply(*z));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_tape(&self, input: &[f64]) -> (Vec<f64>, Tape) {
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut cur = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            l.apply(&cur, &mut z);
            tape.inputs.push(cur);
            if i < last {
                let a = z.iter().map(|&v| self.activation.apply(v)).collect();
                tape.pre.push(z);
                cur = a;
            } else {
                cur = z;
            }
        }
        (cur, tape)
    }

    /// Reverse pass from a cotangent on the network output. Gradients are
    /// accumulated (added) into `grad_input` and `grad_params`.
    pub fn vjp(
        &self,
        tape: &Tape,
        cotangent: &[f64],
        grad_input: Option<&mut [f64]>,
        grad_params: Option<&mut [f64]>,
    ) {
        self.backward(tape, cotangent.to_vec(), self.layers.len() - 1, grad_input, grad_params);
    }

    /// Reverse pass from a cotangent on the penultimate activations.
    pub fn vjp_penultimate(
        &self,
        tape: &Tape,
        cotangent: &[f64],
        grad_input: Option<&mut [f64]>,
        grad_params: Option<&mut [f64]>,
    ) {
        let n = self.layers.len();
        if n < 2 {
            // no hidden layer: the "features" are the input itself
            if let Some(gi) = grad_input {
                crate::tensor::axpy(1.0, cotangent, gi);
            }
            return;
        }
        self.backward(tape, cotangent.to_vec(), n - 2, grad_input, grad_params);
    }

    fn backward(
        &self,
        tape: &Tape,
        mut g: Vec<f64>,
        from_layer: usize,
        grad_input: Option<&mut [f64]>,
        mut grad_params: Option<&mut [f64]>,
    ) {
        let offsets = self.layer_offsets();
        let last = self.layers.len() - 1;
        let mut g_in = Vec::new();
        for l in (0..=from_layer).rev() {
            let layer = &self.layers[l];
            if l < last {
                for (gi, &z) in g.iter_mut().zip(&tape.pre[l]) {
                    *gi *= self.activation.derivative(z);
                }
            }
            let input = &tape.inputs[l];
            let n_in = layer.fan_in();
            if let Some(gp) = grad_params.as_deref_mut() {
                let off = offsets[l];
                let nw = layer.weight.len();
                let (gw, rest) = gp[off..].split_at_mut(nw);
                for (row, &go) in gw.chunks_exact_mut(n_in).zip(&g) {
                    if go != 0.0 {
                        crate::tensor::axpy(go, input, row);
                    }
                }
                for (gb, &go) in rest[..g.len()].iter_mut().zip(&g) {
                    *gb += go;
                }
            }
            if l == 0 && grad_input.is_none() {
                break;
            }
            g_in.clear();
            g_in.resize(n_in, 0.0);
            for (row, &go) in layer.weight.data().chunks_exact(n_in).zip(&g) {
                if go != 0.0 {
                    crate::tensor::axpy(go, row, &mut g_in);
                }
            }
            std::mem::swap(&mut g, &mut g_in);
        }
        if let Some(gi) = grad_input {
            crate::tensor::axpy(1.0, &g, gi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_calculus() {
        // eps = W x: grad_x = W^T a, grad_W = a (x) x
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mlp = Mlp::from_layers(
            vec![Dense {
                weight: w,
                bias: Tensor::zeros(vec![2]),
            }],
            Activation::Silu,
        )
        .unwrap();
        let x = [0.5, -1.0];
        let a = [2.0, -1.0];
        let (y, tape) = mlp.forward_tape(&x);
        assert_eq!(y, vec![0.5 - 2.0, 1.5 - 4.0]);
        let mut gx = vec![0.0; 2];
        let mut gp = vec![0.0; mlp.num_params()];
        mlp.vjp(&tape, &a, Some(&mut gx), Some(&mut gp));
        assert_eq!(gx, vec![1.0 * 2.0 - 3.0, 2.0 * 2.0 - 4.0]);
        assert_eq!(&gp[..4], &[1.0, -2.0, -0.5, 1.0]);
        assert_eq!(&gp[4..], &[2.0, -1.0]);
    }

    #[test]
    fn flatten_roundtrip_is_bitwise() {
        let mut rng = Rng::new(5);
        let mlp = Mlp::new(&[3, 7, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let flat = mlp.flatten();
        let mut other = Mlp::new(&[3, 7, 4, 2], Activation::Tanh, &mut rng).unwrap();
        other.unflatten(&flat).unwrap();
        assert_eq!(other, mlp);
        assert!(other.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn penultimate_vjp_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let mlp = Mlp::new(&[3, 5, 4, 2], Activation::Silu, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9];
        let cot = [0.4, -1.0, 0.25, 0.7];
        let (_, tape) = mlp.forward_tape(&x);
        let mut gx = vec![0.0; 3];
        mlp.vjp_penultimate(&tape, &cot, Some(&mut gx), None);
        let h = 1e-6;
        for i in 0..3 {
            let f = |s: f64| {
                let mut xp = x;
                xp[i] += s;
                let (_, t) = mlp.forward_tape(&xp);
                crate::tensor::dot(t.penultimate(), &cot)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-8, "{fd} vs {}", gx[i]);
        }
    }
}
