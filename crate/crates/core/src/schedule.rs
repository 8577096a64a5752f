//! Variance-preserving noise schedules and the exponential-integrator clock.
//!
//! With `x_t | x_0 ~ N(alpha_t x_0, sigma_t^2 I)` and `alpha^2 + sigma^2 = 1`,
//! the probability-flow drift is `f(t) = d log alpha / dt` and the diffusion
//! coefficient is `g^2(t) = d sigma^2/dt - 2 f(t) sigma^2`. The integrating
//! factor `exp(-int_0^t f) = 1 / alpha_t` turns the flow into
//! `dy/drho = eps(alpha y, t)` on the clock `rho = gamma(t) = sigma_t / alpha_t`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Offset of the cosine schedule.
const COSINE_S: f64 = 0.008;
/// Largest end time accepted for the cosine schedule; alpha vanishes at t = 1.
pub const COSINE_T_MAX: f64 = 0.9946;
/// Overshoot tolerated by [`NoiseSchedule::gamma_inv`] before it reports a domain error.
const RHO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Accepted in configs for compatibility, rejected at validation.
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_end: f64,
    pub t_start: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(0.1, 20.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridScheme {
    Uniform,
    #[serde(rename = "logsnr")]
    LogSnr,
    Quadratic,
}

/// Decreasing time nodes `t_0 = t_end > ... > t_N = t_start`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub points: Vec<f64>,
    pub scheme: GridScheme,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }
}

impl NoiseSchedule {
    pub fn linear(beta_min: f64, beta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            beta_min,
            beta_max,
            t_end: 1.0,
            t_start: 1e-3,
        }
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            beta_min: 0.1,
            beta_max: 20.0,
            t_end: COSINE_T_MAX,
            t_start: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::argument(msg));
        match self.kind {
            ScheduleKind::Discrete => {
                return Err(Error::Unsupported(
                    "discrete schedules need an external beta table; use linear or cosine".into(),
                ))
            }
            ScheduleKind::Linear => {
                if !(self.beta_min >= 0.0 && self.beta_max >= self.beta_min && self.beta_max > 0.0)
                {
                    return bad(format!(
                        "linear schedule needs 0 <= beta_min <= beta_max, beta_max > 0 (got {}, {})",
                        self.beta_min, self.beta_max
                    ));
                }
            }
            ScheduleKind::Cosine => {
                if self.t_end > COSINE_T_MAX {
                    return bad(format!(
                        "cosine schedule needs t_end <= {COSINE_T_MAX} (got {})",
                        self.t_end
                    ));
                }
            }
        }
        if !(self.t_start > 0.0 && self.t_start < self.t_end && self.t_end.is_finite()) {
            return bad(format!(
                "need 0 < t_start < t_end (got {}, {})",
                self.t_start, self.t_end
            ));
        }
        Ok(())
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_end).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.t_end,
            });
        }
        Ok(())
    }

    /// `log alpha_t`, unchecked.
    pub fn log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => {
                -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
            }
            _ => {
                let phase = |u: f64| FRAC_PI_2 * (u + COSINE_S) / (1.0 + COSINE_S);
                phase(t).cos().ln() - phase(0.0).cos().ln()
            }
        }
    }

    /// `f(t) = d log alpha / dt`, unchecked.
    pub fn drift(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => -0.5 * (self.beta_min + t * (self.beta_max - self.beta_min)),
            _ => {
                let k = FRAC_PI_2 / (1.0 + COSINE_S);
                -k * (k * (t + COSINE_S)).tan()
            }
        }
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_t(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    pub(crate) fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        let la = self.log_alpha(t);
        // 1 - alpha^2 = -expm1(2 log alpha), accurate near t = 0
        (la.exp(), (-(2.0 * la).exp_m1()).max(0.0).sqrt())
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    /// `(f(t), g^2(t))` from the analytic derivative of `log alpha`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let f = self.drift(t);
        let (alpha, sigma) = self.alpha_sigma_unchecked(t);
        // d sigma^2/dt = -d alpha^2/dt = -2 f alpha^2
        let dsigma2 = -2.0 * f * alpha * alpha;
        let g2 = dsigma2 - 2.0 * f * sigma * sigma;
        Ok((f, g2.max(0.0)))
    }

    /// `rho = gamma(t) = sigma_t / alpha_t` (alpha_0 = 1, sigma_0 = 0).
    pub fn gamma(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.gamma_unchecked(t))
    }

    pub(crate) fn gamma_unchecked(&self, t: f64) -> f64 {
        // sigma/alpha = sqrt(alpha^-2 - 1)
        (-2.0 * self.log_alpha(t)).exp_m1().max(0.0).sqrt()
    }

    /// `d gamma / dt = g^2 / (2 sigma alpha) = -f / (sigma alpha)`.
    pub fn dgamma_dt(&self, t: f64) -> f64 {
        let (alpha, sigma) = self.alpha_sigma_unchecked(t);
        -self.drift(t) / (sigma * alpha)
    }

    fn check_rho(&self, rho: f64) -> Result<f64> {
        let hi = self.gamma_unchecked(self.t_end);
        if !(rho >= -RHO_TOLERANCE && rho <= hi * (1.0 + RHO_TOLERANCE) + RHO_TOLERANCE) {
            return Err(Error::Domain {
                what: "rho",
                value: rho,
                lo: 0.0,
                hi,
            });
        }
        Ok(rho.clamp(0.0, hi))
    }

    /// Inverse of [`gamma`](Self::gamma). Closed form for the linear kind,
    /// bisection otherwise.
    pub fn gamma_inv(&self, rho: f64) -> Result<f64> {
        let rho = self.check_rho(rho)?;
        Ok(match self.kind {
            ScheduleKind::Linear => self.gamma_inv_linear(rho),
            _ => self.bisect(rho),
        })
    }

    /// Bisection inverse, available for every kind.
    pub fn gamma_inv_bisect(&self, rho: f64) -> Result<f64> {
        let rho = self.check_rho(rho)?;
        Ok(self.bisect(rho))
    }

    fn gamma_inv_linear(&self, rho: f64) -> f64 {
        // log alpha = -0.5 log(1 + rho^2); solve a t^2 + b t + log alpha = 0
        let log_alpha = -0.5 * (rho * rho).ln_1p();
        let a = 0.25 * (self.beta_max - self.beta_min);
        let b = 0.5 * self.beta_min;
        let disc = (b * b - 4.0 * a * log_alpha).max(0.0);
        // rationalised root; stays finite when a = 0
        let t = -2.0 * log_alpha / (b + disc.sqrt());
        t.clamp(0.0, self.t_end)
    }

    fn bisect(&self, rho: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, self.t_end);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.gamma_unchecked(mid) < rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (glo, ghi) = (self.gamma_unchecked(lo), self.gamma_unchecked(hi));
        if (rho - glo).abs() <= (ghi - rho).abs() {
            lo
        } else {
            hi
        }
    }

    /// `log(alpha_t / sigma_t)`.
    pub fn log_snr(&self, t: f64) -> f64 {
        -self.gamma_unchecked(t).ln()
    }

    pub fn time_grid(&self, n_steps: usize, scheme: GridScheme) -> Result<TimeGrid> {
        if n_steps == 0 {
            return Err(Error::argument("time grid needs at least one step"));
        }
        let (t0, t1) = (self.t_end, self.t_start);
        let n = n_steps as f64;
        let mut points: Vec<f64> = match scheme {
            GridScheme::Uniform => (0..=n_steps)
                .map(|i| t0 + (t1 - t0) * i as f64 / n)
                .collect(),
            GridScheme::Quadratic => {
                let (s0, s1) = (t0.sqrt(), t1.sqrt());
                (0..=n_steps)
                    .map(|i| {
                        let s = s0 + (s1 - s0) * i as f64 / n;
                        s * s
                    })
                    .collect()
            }
            GridScheme::LogSnr => {
                let (l0, l1) = (self.log_snr(t0), self.log_snr(t1));
                (0..=n_steps)
                    .map(|i| {
                        let lambda = l0 + (l1 - l0) * i as f64 / n;
                        self.bisect_or_closed((-lambda).exp())
                    })
                    .collect()
            }
        };
        points[0] = t0;
        points[n_steps] = t1;
        Ok(TimeGrid { points, scheme })
    }

    fn bisect_or_closed(&self, rho: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => self.gamma_inv_linear(rho),
            _ => self.bisect(rho),
        }
    }
}
