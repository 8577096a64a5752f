//! Gradients of a loss on the generated sample by the adjoint method.
//!
//! Sampling solves `dy/drho = F(y, rho) = eps~(alpha y, gamma^-1(rho), c)`
//! from `rho_0 = gamma(t_end)` down to `rho_N = gamma(t_start)` and returns
//! `x_0 = alpha_N y_N`. For a loss `L(x_0)` the adjoint `a(rho) = dL/dy(rho)`
//! starts at `a(rho_N) = alpha_N dL/dx_0` and is integrated back to `rho_0`
//! together with `y` itself:
//!
//! ```text
//! dy/drho       = F
//! da/drho       = -a^T dF/dy     = -alpha a^T d eps/dx
//! da_theta/drho = -a^T dF/dtheta,   a_theta(rho_N) = 0
//! da_c/drho     = -a^T dF/dc,       a_c(rho_N) = 0
//! da_rho/drho   = -a^T dF/drho,     a_rho(rho_N) = -a^T F
//! ```
//!
//! Since `y_0 = x_T / alpha_T`, `dL/dx_T = a(rho_0) / alpha_T`. The state
//! carries a fixed number of vectors whatever the step count. `a_rho(rho_0)`
//! is the sensitivity to the start clock `rho_0` with `y(rho_0)` held fixed.
//!
//! [`naive_backprop`] differentiates the recorded discrete solver steps
//! instead; its memory grows with the number of steps.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::nnet::{CfgConfig, Condition, Denoiser, GradSink, Guided};
use crate::odeint::{
    ab_weights, integrate, record_trajectory, OdeSystem, SolveStats, SolverConfig, SolverKind,
    Tableau,
};
use crate::sampler::{check_time_grid, rho_grid, ReparamField};
use crate::schedule::NoiseSchedule;
use crate::tensor::{axpy, dot};

static NAIVE_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`naive_backprop`] calls made by this process.
pub fn naive_backprop_calls() -> usize {
    NAIVE_CALLS.load(Ordering::Relaxed)
}

/// Which gradient blocks to integrate. `dL/dx_T` is always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Want {
    pub theta: bool,
    pub cond: bool,
    pub time: bool,
}

impl Default for Want {
    fn default() -> Self {
        Self {
            theta: true,
            cond: true,
            time: false,
        }
    }
}

impl Want {
    pub fn noise_only() -> Self {
        Self {
            theta: false,
            cond: false,
            time: false,
        }
    }

    pub fn all() -> Self {
        Self {
            theta: true,
            cond: true,
            time: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjointConfig {
    pub want: Want,
    /// Re-solve forward from the recovered start state and warn on drift.
    pub recompute_check: bool,
}


/// Endpoint drift above which the recompute check warns.
pub const RECOMPUTE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradients {
    pub x_t: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub cond: Option<Vec<f64>>,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdjointOutput {
    pub grads: Gradients,
    pub stats: SolveStats,
    /// `y(rho_0)` recovered by the backward solve (continuous adjoint only).
    pub y_start: Option<Vec<f64>>,
    /// Max-abs endpoint drift of the recompute check, with its solve stats.
    pub recompute: Option<(f64, SolveStats)>,
}

/// The stacked `[y, a, a_theta, a_c, a_rho]` field.
struct Augmented<'a, 'm> {
    eps: &'a Guided<'m>,
    sched: &'a NoiseSchedule,
    d: usize,
    p: usize,
    k: usize,
    time: bool,
}

impl Augmented<'_, '_> {
    fn len(&self) -> usize {
        2 * self.d + self.p + self.k + usize::from(self.time)
    }
}

impl OdeSystem for Augmented<'_, '_> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn rhs(&self, rho: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        let t = self.sched.gamma_inv(rho)?;
        let alpha = self.sched.alpha(t);
        let d = self.d;
        let (y, a) = (&z[..d], &z[d..2 * d]);
        let x: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        out.fill(0.0);
        let (oy, rest) = out.split_at_mut(d);
        let (oa, rest) = rest.split_at_mut(d);
        let (oth, rest) = rest.split_at_mut(self.p);
        let (oc, orho) = rest.split_at_mut(self.k);
        let mut gt = 0.0;
        let eps = self.eps.eval_vjp(
            &x,
            t,
            a,
            GradSink {
                x: &mut *oa,
                theta: (self.p > 0).then_some(&mut *oth),
                c: (self.k > 0).then_some(&mut *oc),
                t: self.time.then_some(&mut gt),
            },
        );
        oy.copy_from_slice(&eps);
        if self.time {
            // dF/drho = dt/drho (alpha f eps_x y + eps_t)
            let dt_drho = 1.0 / self.sched.dgamma_dt(t);
            let f = self.sched.drift(t);
            orho[0] = -dt_drho * (alpha * f * dot(oa, y) + gt);
        }
        oa.iter_mut().for_each(|v| *v *= -alpha);
        oth.iter_mut().for_each(|v| *v = -*v);
        oc.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    }

    fn cost(&self) -> usize {
        self.eps.network_calls()
    }
}

fn as_backprop(e: Error) -> Error {
    match e {
        Error::Solver { clock, msg } => Error::Backprop { clock, msg },
        Error::Context { context, source } => as_backprop(*source).context(context),
        e => e,
    }
}

fn check_seed(eps: &Guided<'_>, v: &[f64], what: &str) -> Result<()> {
    let d = eps.model().data_dim();
    if v.len() != d {
        return Err(Error::argument(format!("{what} has dim {}, model expects {d}", v.len())));
    }
    ensure_finite(what, v)
}

/// Integrate the augmented adjoint from `final_y = y(rho_N)` back to `rho_0`.
/// `grid` is the forward time grid (`t_end` first).
pub fn adjoint_backward(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    grid: &[f64],
    solver: &SolverConfig,
    final_y: &[f64],
    dl_dx0: &[f64],
    cfg: &AdjointConfig,
) -> Result<AdjointOutput> {
    check_time_grid(sched, grid)?;
    check_seed(eps, final_y, "final state")?;
    check_seed(eps, dl_dx0, "loss gradient")?;
    let d = eps.model().data_dim();
    let aug = Augmented {
        eps,
        sched,
        d,
        p: if cfg.want.theta { eps.model().num_params() } else { 0 },
        k: if cfg.want.cond { eps.model().cond_dim() } else { 0 },
        time: cfg.want.time,
    };
    let mut rhos = rho_grid(sched, grid)?;
    let alpha_end = sched.alpha(grid[grid.len() - 1]);
    let mut z0 = vec![0.0; aug.len()];
    z0[..d].copy_from_slice(final_y);
    for (zi, g) in z0[d..2 * d].iter_mut().zip(dl_dx0) {
        *zi = alpha_end * g;
    }
    let mut extra = SolveStats::default();
    if cfg.want.time {
        let field = ReparamField { eps, sched };
        let mut f_end = vec![0.0; d];
        field.rhs(rhos[rhos.len() - 1], final_y, &mut f_end)?;
        extra.nfe += field.cost();
        let last = z0.len() - 1;
        z0[last] = -dot(&z0[d..2 * d], &f_end);
    }
    rhos.reverse();
    let (z, mut stats) = integrate(&aug, &z0, &rhos, solver).map_err(|e| as_backprop(e).context("adjoint"))?;
    stats.nfe += extra.nfe;
    let alpha_t = sched.alpha(grid[0]);
    let mut off = 2 * d;
    let theta = cfg.want.theta.then(|| {
        let v = z[off..off + aug.p].to_vec();
        off += aug.p;
        v
    });
    let cond = cfg.want.cond.then(|| {
        let v = z[off..off + aug.k].to_vec();
        off += aug.k;
        v
    });
    let rho = cfg.want.time.then(|| z[off]);
    let y_start = z[..d].to_vec();
    let recompute = if cfg.recompute_check {
        rhos.reverse();
        let (y_end, s) = integrate(&ReparamField { eps, sched }, &y_start, &rhos, solver)?;
        let drift = y_end.iter().zip(final_y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > RECOMPUTE_TOLERANCE {
            log::warn!("adjoint recompute check: endpoint drifted by {drift:.3e}");
        }
        Some((drift, s))
    } else {
        None
    };
    Ok(AdjointOutput {
        grads: Gradients {
            x_t: z[d..2 * d].iter().map(|v| v / alpha_t).collect(),
            theta,
            cond,
            rho,
        },
        stats,
        y_start: Some(y_start),
        recompute,
    })
}

/// [`adjoint_backward`] over independent samples, returned in input order.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_backward_batch(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    grid: &[f64],
    solver: &SolverConfig,
    final_ys: &[Vec<f64>],
    dl_dx0s: &[Vec<f64>],
    cfg: &AdjointConfig,
) -> Result<Vec<AdjointOutput>> {
    if final_ys.len() != dl_dx0s.len() {
        return Err(Error::argument("final states and loss gradients differ in count"));
    }
    final_ys
        .par_iter()
        .zip(dl_dx0s)
        .map(|(y, g)| adjoint_backward(eps, sched, grid, solver, y, g, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Reverse pass through one network evaluation of the `reparam` field.
struct FieldVjp<'a, 'm> {
    eps: &'a Guided<'m>,
    sched: &'a NoiseSchedule,
    theta: Option<Vec<f64>>,
    cond: Option<Vec<f64>>,
    nfe: usize,
}

impl FieldVjp<'_, '_> {
    fn eval(&mut self, rho: f64, y: &[f64]) -> Result<Vec<f64>> {
        let t = self.sched.gamma_inv(rho)?;
        let alpha = self.sched.alpha(t);
        let x: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        self.nfe += self.eps.network_calls();
        Ok(self.eps.eval(&x, t))
    }

    /// Adds `cot^T dF/dy` to `y_bar` and the parameter blocks.
    fn vjp(&mut self, rho: f64, y: &[f64], cot: &[f64], y_bar: &mut [f64]) -> Result<()> {
        let t = self.sched.gamma_inv(rho)?;
        let alpha = self.sched.alpha(t);
        let x: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        let mut gx = vec![0.0; y.len()];
        self.eps.eval_vjp(
            &x,
            t,
            cot,
            GradSink {
                x: &mut gx,
                theta: self.theta.as_deref_mut(),
                c: self.cond.as_deref_mut(),
                t: None,
            },
        );
        self.nfe += self.eps.network_calls();
        axpy(alpha, &gx, y_bar);
        if let Some(i) = y_bar.iter().position(|v| !v.is_finite()) {
            return Err(Error::Backprop {
                clock: rho,
                msg: format!("adjoint component {i} is not finite"),
            });
        }
        Ok(())
    }
}

/// Discrete reverse-mode differentiation through every recorded solver step.
#[allow(clippy::too_many_arguments)]
pub fn naive_backprop(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    grid: &[f64],
    solver: &SolverConfig,
    x_t: &[f64],
    dl_dx0: &[f64],
    want: Want,
) -> Result<AdjointOutput> {
    NAIVE_CALLS.fetch_add(1, Ordering::Relaxed);
    if !solver.kind.is_fixed_step() {
        return Err(Error::Unsupported(
            "naive backprop needs a fixed-step solver".into(),
        ));
    }
    check_time_grid(sched, grid)?;
    check_seed(eps, x_t, "x_T")?;
    check_seed(eps, dl_dx0, "loss gradient")?;
    let rhos = rho_grid(sched, grid)?;
    let alpha_t = sched.alpha(grid[0]);
    let alpha_end = sched.alpha(grid[grid.len() - 1]);
    let y0: Vec<f64> = x_t.iter().map(|v| v / alpha_t).collect();
    let (traj, mut stats) = record_trajectory(&ReparamField { eps, sched }, &y0, &rhos, solver)?;
    let mut vjp = FieldVjp {
        eps,
        sched,
        theta: want.theta.then(|| vec![0.0; eps.model().num_params()]),
        cond: want.cond.then(|| vec![0.0; eps.model().cond_dim()]),
        nfe: 0,
    };
    let mut y_bar: Vec<f64> = dl_dx0.iter().map(|g| alpha_end * g).collect();
    let n_steps = rhos.len() - 1;
    match solver.kind {
        SolverKind::Ab4 | SolverKind::Ab4Ramp => {
            let ramp = solver.kind == SolverKind::Ab4Ramp;
            let rk4 = Tableau::for_kind(SolverKind::Rk4);
            let mut f_bar = vec![vec![0.0; y_bar.len()]; n_steps];
            for n in (0..n_steps).rev() {
                let y_n = &traj[n].1;
                let mut next = y_bar.clone();
                if ramp || n >= 3 {
                    let k = (n + 1).min(4);
                    let nodes: Vec<f64> = (0..k).map(|j| rhos[n - j]).collect();
                    let w = ab_weights(&nodes, rhos[n], rhos[n + 1]);
                    for (j, wj) in w.iter().take(k).enumerate() {
                        axpy(*wj, &y_bar, &mut f_bar[n - j]);
                    }
                } else {
                    let k_bar = rk_step_reverse(&rk4, &mut vjp, rhos[n], rhos[n + 1], y_n, &y_bar, &mut next)?;
                    axpy(1.0, &k_bar, &mut f_bar[n]);
                }
                let cot = std::mem::take(&mut f_bar[n]);
                vjp.vjp(rhos[n], y_n, &cot, &mut next)?;
                y_bar = next;
            }
        }
        kind => {
            let tableau = Tableau::for_kind(kind);
            for n in (0..n_steps).rev() {
                let mut next = y_bar.clone();
                let k0_bar = rk_step_reverse(&tableau, &mut vjp, rhos[n], rhos[n + 1], &traj[n].1, &y_bar, &mut next)?;
                vjp.vjp(rhos[n], &traj[n].1, &k0_bar, &mut next)?;
                y_bar = next;
            }
        }
    }
    stats.nfe += vjp.nfe;
    Ok(AdjointOutput {
        grads: Gradients {
            x_t: y_bar.iter().map(|v| v / alpha_t).collect(),
            theta: vjp.theta,
            cond: vjp.cond,
            rho: None,
        },
        stats,
        y_start: None,
        recompute: None,
    })
}

/// Reverse of one explicit RK step for stages `1..s`; accumulates into
/// `y_bar_n` and returns the cotangent of the first stage `k_0`.
fn rk_step_reverse(
    tab: &Tableau,
    vjp: &mut FieldVjp<'_, '_>,
    rho: f64,
    rho_next: f64,
    y_n: &[f64],
    y_bar_next: &[f64],
    y_bar_n: &mut [f64],
) -> Result<Vec<f64>> {
    let h = rho_next - rho;
    let s = tab.b.len();
    let d = y_n.len();
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut yi = vec![0.0; d];
        tab.stage_input(i, h, y_n, &ks, &mut yi);
        if i + 1 < s {
            ks.push(vjp.eval(rho + tab.c[i] * h, &yi)?);
        }
        inputs.push(yi);
    }
    let mut k_bar: Vec<Vec<f64>> = tab.b.iter().map(|bi| y_bar_next.iter().map(|v| h * bi * v).collect()).collect();
    for i in (1..s).rev() {
        let mut stage_bar = vec![0.0; d];
        vjp.vjp(rho + tab.c[i] * h, &inputs[i], &k_bar[i], &mut stage_bar)?;
        axpy(1.0, &stage_bar, y_bar_n);
        for (j, &aij) in tab.a[i].iter().enumerate() {
            if aij != 0.0 {
                axpy(h * aij, &stage_bar, &mut k_bar[j]);
            }
        }
    }
    Ok(k_bar.swap_remove(0))
}

/// Differentiable losses on the generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// `<v, x_0>`.
    Linear { v: Vec<f64> },
    /// `0.5 |x_0 - target|^2`.
    Quadratic { target: Vec<f64> },
}

impl LossSpec {
    pub fn value(&self, x0: &[f64]) -> f64 {
        match self {
            LossSpec::Linear { v } => dot(v, x0),
            LossSpec::Quadratic { target } => {
                0.5 * x0.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            }
        }
    }

    pub fn grad(&self, x0: &[f64]) -> Vec<f64> {
        match self {
            LossSpec::Linear { v } => v.clone(),
            LossSpec::Quadratic { target } => x0.iter().zip(target).map(|(a, b)| a - b).collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            LossSpec::Linear { v } => v.len(),
            LossSpec::Quadratic { target } => target.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Noise,
    Theta,
    Cond,
    Time,
}

impl GradTarget {
    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Noise => "noise",
            GradTarget::Theta => "theta",
            GradTarget::Cond => "cond",
            GradTarget::Time => "time",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub target: GradTarget,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Largest number of finite-difference probes gradcheck will run.
pub const MAX_PROBES: usize = 10_000;

/// Denominator floor of the relative error, for gradients that are
/// essentially zero.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// One gradcheck problem: everything needed to run the sampling pipeline.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    pub model: &'a Denoiser,
    pub condition: Condition,
    pub guidance: CfgConfig,
    pub sched: NoiseSchedule,
    pub grid: Vec<f64>,
    pub solver: SolverConfig,
}

impl<'a> Pipeline<'a> {
    fn guided_with(&self, model: &'a Denoiser, cond: Vec<f64>) -> Guided<'a> {
        let cfg = if self.condition.is_null() { CfgConfig::default() } else { self.guidance };
        Guided::from_vector(model, cond, cfg)
    }

    fn loss_at(&self, model: &Denoiser, cond: Vec<f64>, x_t: &[f64], loss: &LossSpec) -> Result<f64> {
        let cfg = if self.condition.is_null() { CfgConfig::default() } else { self.guidance };
        let g = Guided::from_vector(model, cond, cfg);
        let (x0, _) = crate::sampler::sample_reparam(&g, &self.sched, x_t, &self.grid, &self.solver)?;
        Ok(loss.value(&x0))
    }

    fn loss_from_rho0(&self, cond: Vec<f64>, y0: &[f64], rho0: f64, loss: &LossSpec) -> Result<f64> {
        let g = self.guided_with(self.model, cond);
        let mut rhos = rho_grid(&self.sched, &self.grid)?;
        rhos[0] = rho0;
        let (y, _) = integrate(&ReparamField { eps: &g, sched: &self.sched }, y0, &rhos, &self.solver)?;
        let a = self.sched.alpha(self.grid[self.grid.len() - 1]);
        Ok(loss.value(&y.iter().map(|v| a * v).collect::<Vec<_>>()))
    }
}

/// Compare adjoint gradients with central differences of the full sampling
/// pipeline. `theta_coords` selects parameter coordinates; noise and
/// conditioning coordinates are all checked.
pub fn gradcheck(
    pipe: &Pipeline<'_>,
    x_t: &[f64],
    loss: &LossSpec,
    targets: &[GradTarget],
    theta_coords: &[usize],
    h: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let model = pipe.model;
    if loss.dim() != model.data_dim() {
        return Err(Error::argument("loss dimension does not match the model"));
    }
    if h.is_nan() || h <= 0.0 {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    if let Some(&i) = theta_coords.iter().find(|&&i| i >= model.num_params()) {
        return Err(Error::argument(format!("parameter coordinate {i} out of range")));
    }
    let probes: usize = targets
        .iter()
        .map(|t| match t {
            GradTarget::Noise => model.data_dim(),
            GradTarget::Theta => theta_coords.len(),
            GradTarget::Cond => model.cond_dim(),
            GradTarget::Time => 1,
        })
        .sum();
    if probes > MAX_PROBES {
        return Err(Error::argument(format!("{probes} probes exceed the limit of {MAX_PROBES}")));
    }
    let cond = model.embed(&pipe.condition)?;
    let guided = pipe.guided_with(model, cond.clone());
    let (y_end, _) = crate::sampler::solve_reparam(&guided, &pipe.sched, x_t, &pipe.grid, &pipe.solver)?;
    let alpha_end = pipe.sched.alpha(pipe.grid[pipe.grid.len() - 1]);
    let x0: Vec<f64> = y_end.iter().map(|v| alpha_end * v).collect();
    let cfg = AdjointConfig {
        want: Want {
            theta: targets.contains(&GradTarget::Theta),
            cond: targets.contains(&GradTarget::Cond),
            time: targets.contains(&GradTarget::Time),
        },
        recompute_check: false,
    };
    let out = adjoint_backward(&guided, &pipe.sched, &pipe.grid, &pipe.solver, &y_end, &loss.grad(&x0), &cfg)?;
    let mut rows = Vec::new();
    for &target in targets {
        let probes: Vec<(usize, f64, f64)> = match target {
            GradTarget::Noise => (0..model.data_dim())
                .into_par_iter()
                .map(|i| {
                    let at = |s: f64| {
                        let mut x = x_t.to_vec();
                        x[i] += s;
                        pipe.loss_at(model, cond.clone(), &x, loss)
                    };
                    Ok((i, out.grads.x_t[i], (at(h)? - at(-h)?) / (2.0 * h)))
                })
                .collect::<Result<_>>()?,
            GradTarget::Theta => {
                let theta = out.grads.theta.as_ref().expect("requested");
                let base = model.params();
                theta_coords
                    .par_iter()
                    .map(|&i| {
                        let at = |s: f64| {
                            let mut p = base.clone();
                            p[i] += s;
                            let mut m = model.clone();
                            m.set_params(&p)?;
                            pipe.loss_at(&m, cond.clone(), x_t, loss)
                        };
                        Ok((i, theta[i], (at(h)? - at(-h)?) / (2.0 * h)))
                    })
                    .collect::<Result<_>>()?
            }
            GradTarget::Cond => {
                let gc = out.grads.cond.as_ref().expect("requested");
                (0..model.cond_dim())
                    .into_par_iter()
                    .map(|i| {
                        let at = |s: f64| {
                            let mut c = cond.clone();
                            c[i] += s;
                            pipe.loss_at(model, c, x_t, loss)
                        };
                        Ok((i, gc[i], (at(h)? - at(-h)?) / (2.0 * h)))
                    })
                    .collect::<Result<_>>()?
            }
            GradTarget::Time => {
                let rho0 = pipe.sched.gamma(pipe.grid[0])?;
                let y0: Vec<f64> = x_t.iter().map(|v| v / pipe.sched.alpha(pipe.grid[0])).collect();
                // stay inside the schedule's clock range
                let up = pipe.loss_from_rho0(cond.clone(), &y0, rho0, loss)?;
                let down = pipe.loss_from_rho0(cond.clone(), &y0, rho0 - h, loss)?;
                let down2 = pipe.loss_from_rho0(cond.clone(), &y0, rho0 - 2.0 * h, loss)?;
                // second-order one-sided difference
                let numeric = (3.0 * up - 4.0 * down + down2) / (2.0 * h);
                vec![(0, out.grads.rho.expect("requested"), numeric)]
            }
        };
        rows.extend(probes.into_iter().map(|(coordinate, analytic, numeric)| GradcheckRow {
            target,
            coordinate,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        }));
    }
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_err <= tolerance && rows.iter().all(|r| r.rel_err.is_finite()),
        rows,
        max_rel_err,
        tolerance,
    })
}

pub fn write_gradcheck_csv<W: Write>(report: &GradcheckReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = crate::sampler::csv_err;
    w.write_record(["target", "coordinate", "analytic", "numeric", "rel_err"]).map_err(err)?;
    for r in &report.rows {
        w.write_record([
            r.target.name().to_string(),
            r.coordinate.to_string(),
            r.analytic.to_string(),
            r.numeric.to_string(),
            r.rel_err.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::DenoiserConfig;
    use crate::rng::Rng;
    use crate::sampler::solve_reparam;
    use crate::schedule::GridScheme;

    fn small_model(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            hidden: vec![16, 16],
            time_freqs: 4,
            freq_max: 2.0,
            cond_dim: 3,
            num_classes: 3,
            ..DenoiserConfig::default()
        };
        Denoiser::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn grid(n: usize) -> Vec<f64> {
        NoiseSchedule::default().time_grid(n, GridScheme::Uniform).unwrap().points
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let m = small_model(1);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(1), CfgConfig { scale: 1.5 }).unwrap();
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let gr = grid(20);
        let (y, _) = solve_reparam(&g, &sched, &[0.3, -0.1], &gr, &rk4).unwrap();
        let cfg = AdjointConfig { want: Want::all(), recompute_check: false };
        let out = adjoint_backward(&g, &sched, &gr, &rk4, &y, &[0.0, 0.0], &cfg).unwrap();
        assert!(out.grads.x_t.iter().all(|v| *v == 0.0));
        assert!(out.grads.theta.unwrap().iter().all(|v| *v == 0.0));
        assert!(out.grads.cond.unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(out.grads.rho, Some(0.0));
        let naive = naive_backprop(&g, &sched, &gr, &rk4, &[0.3, -0.1], &[0.0, 0.0], Want::default()).unwrap();
        assert!(naive.grads.x_t.iter().all(|v| *v == 0.0));
        assert!(naive.grads.theta.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_denoiser_gradient_is_alpha_ratio() {
        let m = Denoiser::constant(&[0.0, 0.0], 2, 2, 2);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(0), CfgConfig::default()).unwrap();
        let gr = grid(5);
        let euler = SolverConfig::new(SolverKind::Euler);
        let v = [0.7, -2.0];
        let (y, _) = solve_reparam(&g, &sched, &[1.0, 1.0], &gr, &euler).unwrap();
        let out = adjoint_backward(&g, &sched, &gr, &euler, &y, &v, &AdjointConfig::default()).unwrap();
        let ratio = sched.alpha(sched.t_start) / sched.alpha(sched.t_end);
        for (a, b) in out.grads.x_t.iter().zip(v) {
            assert!((a - ratio * b).abs() <= 1e-12 * (ratio * b).abs());
        }
    }

    #[test]
    fn constant_denoiser_gradients_match_closed_form() {
        let b = [0.4, -0.9];
        let m = Denoiser::constant(&b, 2, 2, 2);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(0), CfgConfig::default()).unwrap();
        let (t0, t1) = (sched.t_end, sched.t_start);
        let dgamma = sched.gamma(t1).unwrap() - sched.gamma(t0).unwrap();
        let ratio = sched.alpha(t1) / sched.alpha(t0);
        let v = [1.3, 0.2];
        let x_t = [0.5, 0.5];
        for (kind, n) in [(SolverKind::Euler, 1), (SolverKind::Rk4, 1), (SolverKind::Rk4, 30), (SolverKind::Ab4, 8)] {
            let gr = grid(n);
            let solver = SolverConfig::new(kind);
            let (y, _) = solve_reparam(&g, &sched, &x_t, &gr, &solver).unwrap();
            let out = adjoint_backward(&g, &sched, &gr, &solver, &y, &v, &AdjointConfig::default()).unwrap();
            for (a, vi) in out.grads.x_t.iter().zip(v) {
                assert!((a - ratio * vi).abs() < 1e-8);
            }
            // the bias is the last block of the single layer
            let theta = out.grads.theta.unwrap();
            let bias_grad = &theta[theta.len() - 2..];
            for (gb, vi) in bias_grad.iter().zip(v) {
                let expect = sched.alpha(t1) * dgamma * vi;
                assert!((gb - expect).abs() < 1e-8, "{kind:?}: {gb} vs {expect}");
            }
            // zero weights: no dependence on the conditioning
            assert!(out.grads.cond.unwrap().iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn adjoint_agrees_with_naive_and_finite_differences() {
        let m = small_model(4);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(2), CfgConfig { scale: 2.0 }).unwrap();
        let gr = grid(100);
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let x_t = [0.4, -0.8];
        let (y, _) = solve_reparam(&g, &sched, &x_t, &gr, &rk4).unwrap();
        let v = [1.0, -0.5];
        let adj = adjoint_backward(&g, &sched, &gr, &rk4, &y, &v, &AdjointConfig::default()).unwrap();
        let naive = naive_backprop(&g, &sched, &gr, &rk4, &x_t, &v, Want::default()).unwrap();
        for (a, b) in adj.grads.x_t.iter().zip(&naive.grads.x_t) {
            assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
        }
        let (ta, tb) = (adj.grads.theta.unwrap(), naive.grads.theta.unwrap());
        let scale = tb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in ta.iter().zip(&tb) {
            assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b}");
        }
        assert_eq!(naive.stats.max_retained_states, 101);
    }

    #[test]
    fn naive_backprop_is_the_exact_discrete_gradient() {
        let m = small_model(5);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(0), CfgConfig::default()).unwrap();
        let x_t = [0.2, 0.9];
        let v = [0.3, 1.0];
        let h = 1e-5;
        for kind in [SolverKind::Euler, SolverKind::Heun, SolverKind::Rk4, SolverKind::Ab4, SolverKind::Ab4Ramp] {
            // coarse grids make the discrete and continuous gradients differ
            let gr = grid(6);
            let solver = SolverConfig::new(kind);
            let naive = naive_backprop(&g, &sched, &gr, &solver, &x_t, &v, Want::default()).unwrap();
            let loss = |x: &[f64]| {
                let (x0, _) = crate::sampler::sample_reparam(&g, &sched, x, &gr, &solver).unwrap();
                dot(&v, &x0)
            };
            for i in 0..2 {
                let mut xp = x_t.to_vec();
                let mut xm = x_t.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!(rel_err(naive.grads.x_t[i], fd) < 1e-6, "{kind:?}: {} vs {fd}", naive.grads.x_t[i]);
            }
        }
        let adaptive = SolverConfig::new(SolverKind::AdaptiveRk45);
        assert!(matches!(
            naive_backprop(&g, &sched, &grid(6), &adaptive, &x_t, &v, Want::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn retained_states_do_not_grow_with_steps() {
        let m = small_model(6);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Null, CfgConfig::default()).unwrap();
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let mut peaks = Vec::new();
        for n in [10, 50, 200] {
            let gr = grid(n);
            let (y, _) = solve_reparam(&g, &sched, &[0.1, 0.1], &gr, &rk4).unwrap();
            let out = adjoint_backward(&g, &sched, &gr, &rk4, &y, &[1.0, 0.0], &AdjointConfig::default()).unwrap();
            peaks.push(out.stats.max_retained_states);
            assert_eq!(out.stats.nfe, 4 * n);
        }
        assert!(peaks.windows(2).all(|w| w[0] == w[1]), "{peaks:?}");
        assert!(peaks[0] <= 10);
    }

    #[test]
    fn gradients_are_linear_in_the_seed() {
        let m = small_model(7);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(1), CfgConfig::default()).unwrap();
        let gr = grid(40);
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let (y, _) = solve_reparam(&g, &sched, &[0.6, 0.1], &gr, &rk4).unwrap();
        let cfg = AdjointConfig::default();
        let mut rng = Rng::new(11);
        for _ in 0..5 {
            let (u, v) = (rng.normal_vec(2, 1.0), rng.normal_vec(2, 1.0));
            let (p, q) = (rng.normal(), rng.normal());
            let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| p * a + q * b).collect();
            let gu = adjoint_backward(&g, &sched, &gr, &rk4, &y, &u, &cfg).unwrap().grads;
            let gv = adjoint_backward(&g, &sched, &gr, &rk4, &y, &v, &cfg).unwrap().grads;
            let gm = adjoint_backward(&g, &sched, &gr, &rk4, &y, &mix, &cfg).unwrap().grads;
            for i in 0..2 {
                let lin = p * gu.x_t[i] + q * gv.x_t[i];
                assert!((gm.x_t[i] - lin).abs() < 1e-10 * lin.abs().max(1.0));
            }
            let (tu, tv, tm) = (gu.theta.unwrap(), gv.theta.unwrap(), gm.theta.unwrap());
            for i in 0..tm.len() {
                let lin = p * tu[i] + q * tv[i];
                assert!((tm[i] - lin).abs() < 1e-10 * lin.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradcheck_passes_on_a_random_model() {
        let m = small_model(8);
        let pipe = Pipeline {
            model: &m,
            condition: Condition::Label(1),
            guidance: CfgConfig { scale: 1.5 },
            sched: NoiseSchedule::default(),
            // the a_rho row needs a finer grid than the others to reach 1e-3
            grid: grid(240),
            solver: SolverConfig::new(SolverKind::Rk4),
        };
        let loss = LossSpec::Quadratic { target: vec![0.5, -0.5] };
        let coords: Vec<usize> = (0..m.num_params()).step_by(37).collect();
        let report = gradcheck(
            &pipe,
            &[0.3, 0.7],
            &loss,
            &[GradTarget::Noise, GradTarget::Theta, GradTarget::Cond, GradTarget::Time],
            &coords,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:#?}");
        let mut buf = Vec::new();
        write_gradcheck_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("target,coordinate,analytic,numeric,rel_err\nnoise,0,"));
        assert_eq!(text.lines().count(), 1 + report.rows.len());
    }

    #[test]
    fn recompute_check_recovers_the_start() {
        let m = small_model(9);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(0), CfgConfig::default()).unwrap();
        let gr = grid(100);
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let x_t = [0.3, -0.3];
        let (y, _) = solve_reparam(&g, &sched, &x_t, &gr, &rk4).unwrap();
        let cfg = AdjointConfig { want: Want::noise_only(), recompute_check: true };
        let out = adjoint_backward(&g, &sched, &gr, &rk4, &y, &[1.0, 1.0], &cfg).unwrap();
        let (drift, _) = out.recompute.unwrap();
        assert!(drift < RECOMPUTE_TOLERANCE, "{drift}");
        let alpha_t = sched.alpha(sched.t_end);
        for (a, b) in out.y_start.unwrap().iter().zip(x_t) {
            assert!((a * alpha_t - b).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = small_model(10);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Null, CfgConfig::default()).unwrap();
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let cfg = AdjointConfig::default();
        assert!(adjoint_backward(&g, &sched, &grid(4), &rk4, &[0.0], &[1.0, 0.0], &cfg).is_err());
        assert!(adjoint_backward(&g, &sched, &[0.1, 0.5], &rk4, &[0.0, 0.0], &[1.0, 0.0], &cfg).is_err());
        assert!(adjoint_backward(&g, &sched, &grid(4), &rk4, &[0.0, 0.0], &[f64::NAN, 0.0], &cfg).is_err());
    }

    #[test]
    fn start_clock_sensitivity_matches_identity() {
        // with y(rho_0) fixed, dL/drho_0 = -a(rho_0)^T F(y_0, rho_0)
        let m = small_model(12);
        let sched = NoiseSchedule::default();
        let g = Guided::new(&m, &Condition::Label(0), CfgConfig::default()).unwrap();
        let gr = grid(400);
        let rk4 = SolverConfig::new(SolverKind::Rk4);
        let x_t = [0.1, 0.5];
        let (y, _) = solve_reparam(&g, &sched, &x_t, &gr, &rk4).unwrap();
        let cfg = AdjointConfig { want: Want::all(), recompute_check: false };
        let out = adjoint_backward(&g, &sched, &gr, &rk4, &y, &[0.4, -1.0], &cfg).unwrap();
        let alpha_t = sched.alpha(sched.t_end);
        let a0: Vec<f64> = out.grads.x_t.iter().map(|v| v * alpha_t).collect();
        let y0: Vec<f64> = x_t.iter().map(|v| v / alpha_t).collect();
        let mut f = vec![0.0; 2];
        ReparamField { eps: &g, sched: &sched }.rhs(sched.gamma(sched.t_end).unwrap(), &y0, &mut f).unwrap();
        let expect = -dot(&a0, &f);
        assert!(rel_err(out.grads.rho.unwrap(), expect) < 1e-5, "{:?} vs {expect}", out.grads.rho);
    }
}
