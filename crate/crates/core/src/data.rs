//! Labeled toy datasets.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::argument("dataset is empty"));
        }
        if points.len() != labels.len() {
            return Err(Error::argument("points and labels differ in length"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::argument("points have mixed dimensions"));
        }
        Ok(Self {
            dim,
            points,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Per-class mean of `f(point)`; classes with no points get `None`.
    pub fn class_means<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> Vec<Option<Vec<f64>>> {
        let k = self.num_classes();
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; k];
        for (p, &l) in self.points.iter().zip(&self.labels) {
            let v = f(p);
            match &mut sums[l] {
                Some((s, n)) => {
                    crate::tensor::axpy(1.0, &v, s);
                    *n += 1;
                }
                slot => *slot = Some((v, 1)),
            }
        }
        sums.into_iter()
            .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
            .collect()
    }
}

/// Isotropic Gaussian modes evenly spaced on a circle in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
    pub train_size: usize,
    pub holdout_size: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 1.0,
            std: 0.1,
            train_size: 8192,
            holdout_size: 1024,
        }
    }
}

impl MixtureConfig {
    pub fn center(&self, k: usize) -> [f64; 2] {
        let a = TAU * k as f64 / self.modes as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<LabeledData> {
        if self.modes == 0 || n == 0 {
            return Err(Error::argument("mixture needs at least one mode and one point"));
        }
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.below(self.modes);
            let c = self.center(k);
            points.push(vec![c[0] + self.std * rng.normal(), c[1] + self.std * rng.normal()]);
            labels.push(k);
        }
        LabeledData::new(points, labels)
    }

    /// `(train, holdout)` drawn from independent labeled streams of `seed`.
    pub fn split(&self, seed: u64) -> Result<(LabeledData, LabeledData)> {
        let train = self.sample(self.train_size, &mut Rng::labeled(seed, "data/train"))?;
        let holdout = self.sample(self.holdout_size, &mut Rng::labeled(seed, "data/holdout"))?;
        Ok((train, holdout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_reproducible() {
        let cfg = MixtureConfig::default();
        let a = cfg.sample(100, &mut Rng::new(1)).unwrap();
        let b = cfg.sample(100, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| l < 8));
        for (p, &l) in a.points.iter().zip(&a.labels) {
            let c = cfg.center(l);
            assert!(((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() < 0.6);
        }
    }

    #[test]
    fn empty_is_rejected() {
        assert!(LabeledData::new(vec![], vec![]).is_err());
    }
}
