//! Sample generation by solving the probability-flow ODE from `t_end` to `t_start`.
//!
//! Two clocks are available:
//!
//! * `original`: `dx/dt = f(t) x + g^2(t) / (2 sigma_t) * eps~(x, t)`.
//! * `reparam`: with `y = x / alpha_t` and `rho = gamma(t)`,
//!   `dy/drho = eps~(alpha_t y, t)` where `t = gamma^-1(rho)`. The linear part
//!   is integrated exactly, so only the network term is discretised.
//!
//! Both start from `x_T` and return `x` at `t_start`; in the `reparam` clock
//! `y_0 = x_T / alpha_T` and `x = alpha_{t_start} y_N`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{CfgConfig, Guided};
use crate::odeint::{
    integrate, record_trajectory, OdeSystem, SolveStats, SolverConfig, SolverKind, Trajectory,
};
use crate::rng::Rng;
use crate::schedule::{GridScheme, NoiseSchedule, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Original,
    Reparam,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Original => "original",
            SampleMode::Reparam => "reparam",
        }
    }
}

/// How to discretise a sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub mode: SampleMode,
    pub solver: SolverConfig,
    pub steps: usize,
    pub scheme: GridScheme,
    pub guidance: CfgConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            mode: SampleMode::Reparam,
            solver: SolverConfig::new(SolverKind::Rk4),
            steps: 50,
            scheme: GridScheme::Uniform,
            guidance: CfgConfig::default(),
        }
    }
}

impl SampleConfig {
    pub fn grid(&self, sched: &NoiseSchedule) -> Result<TimeGrid> {
        sched.time_grid(self.steps, self.scheme)
    }
}

/// The `original`-clock field.
pub struct OriginalField<'a, 'm> {
    pub eps: &'a Guided<'m>,
    pub sched: &'a NoiseSchedule,
}

impl OdeSystem for OriginalField<'_, '_> {
    fn dim(&self) -> usize {
        self.eps.model().data_dim()
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (f, g2) = self.sched.drift_diffusion(t)?;
        let (_, sigma) = self.sched.alpha_sigma_unchecked(t);
        let e = self.eps.eval(x, t);
        let k = g2 / (2.0 * sigma);
        for ((o, xi), ei) in out.iter_mut().zip(x).zip(e) {
            *o = f * xi + k * ei;
        }
        Ok(())
    }

    fn cost(&self) -> usize {
        self.eps.network_calls()
    }
}

/// The `reparam`-clock field `dy/drho = eps~(alpha y, gamma^-1(rho))`.
pub struct ReparamField<'a, 'm> {
    pub eps: &'a Guided<'m>,
    pub sched: &'a NoiseSchedule,
}

impl OdeSystem for ReparamField<'_, '_> {
    fn dim(&self) -> usize {
        self.eps.model().data_dim()
    }

    fn rhs(&self, rho: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        let t = self.sched.gamma_inv(rho)?;
        let alpha = self.sched.alpha(t);
        let x: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        out.copy_from_slice(&self.eps.eval(&x, t));
        Ok(())
    }

    fn cost(&self) -> usize {
        self.eps.network_calls()
    }
}

/// Checks that `grid` runs from high to low times inside the schedule.
pub(crate) fn check_time_grid(sched: &NoiseSchedule, grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::argument("sampling grid needs at least one step"));
    }
    if !grid.windows(2).all(|w| w[1] < w[0]) {
        return Err(Error::argument("sampling grid must decrease from t_end towards t_start"));
    }
    if grid[grid.len() - 1] < 0.0 || grid[0] > sched.t_end {
        return Err(Error::argument(format!(
            "sampling grid [{}, {}] leaves [0, {}]",
            grid[grid.len() - 1],
            grid[0],
            sched.t_end
        )));
    }
    Ok(())
}

/// `rho_i = gamma(t_i)` for every node.
pub fn rho_grid(sched: &NoiseSchedule, grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter().map(|&t| sched.gamma(t)).collect()
}

fn check_start(eps: &Guided<'_>, x_t: &[f64]) -> Result<()> {
    if x_t.len() != eps.model().data_dim() {
        return Err(Error::argument(format!(
            "x_T has dim {}, model expects {}",
            x_t.len(),
            eps.model().data_dim()
        )));
    }
    crate::error::ensure_finite("x_T", x_t)
}

pub fn sample_original(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    x_t: &[f64],
    grid: &[f64],
    solver: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    check_start(eps, x_t)?;
    check_time_grid(sched, grid)?;
    let field = OriginalField { eps, sched };
    integrate(&field, x_t, grid, solver).map_err(|e| e.context("forward-original"))
}

pub fn sample_reparam(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    x_t: &[f64],
    grid: &[f64],
    solver: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    let (y, stats) = solve_reparam(eps, sched, x_t, grid, solver)?;
    let alpha_end = sched.alpha(grid[grid.len() - 1]);
    Ok((y.into_iter().map(|v| alpha_end * v).collect(), stats))
}

/// Forward solve in the `reparam` clock; returns the terminal `y`.
pub fn solve_reparam(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    x_t: &[f64],
    grid: &[f64],
    solver: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    check_start(eps, x_t)?;
    check_time_grid(sched, grid)?;
    let rhos = rho_grid(sched, grid)?;
    let alpha_t = sched.alpha(grid[0]);
    let y0: Vec<f64> = x_t.iter().map(|v| v / alpha_t).collect();
    let field = ReparamField { eps, sched };
    integrate(&field, &y0, &rhos, solver).map_err(|e| e.context("forward-reparam"))
}

pub fn sample(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    x_t: &[f64],
    grid: &[f64],
    solver: &SolverConfig,
    mode: SampleMode,
) -> Result<(Vec<f64>, SolveStats)> {
    match mode {
        SampleMode::Original => sample_original(eps, sched, x_t, grid, solver),
        SampleMode::Reparam => sample_reparam(eps, sched, x_t, grid, solver),
    }
}

/// States `(t_i, x_{t_i})` at every grid node, in the data coordinates.
pub fn trajectory(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    x_t: &[f64],
    grid: &[f64],
    solver: &SolverConfig,
    mode: SampleMode,
) -> Result<(Trajectory, SolveStats)> {
    check_start(eps, x_t)?;
    check_time_grid(sched, grid)?;
    match mode {
        SampleMode::Original => {
            let field = OriginalField { eps, sched };
            record_trajectory(&field, x_t, grid, solver).map_err(|e| e.context("forward-original"))
        }
        SampleMode::Reparam => {
            let rhos = rho_grid(sched, grid)?;
            let alpha_t = sched.alpha(grid[0]);
            let y0: Vec<f64> = x_t.iter().map(|v| v / alpha_t).collect();
            let field = ReparamField { eps, sched };
            let (traj, stats) = record_trajectory(&field, &y0, &rhos, solver)
                .map_err(|e| e.context("forward-reparam"))?;
            let mapped = traj
                .into_iter()
                .zip(grid)
                .map(|((_, y), &t)| {
                    let a = sched.alpha(t);
                    (t, y.into_iter().map(|v| a * v).collect())
                })
                .collect();
            Ok((mapped, stats))
        }
    }
}

/// `x_T ~ N(0, sigma_T^2 I)`.
pub fn initial_noise(sched: &NoiseSchedule, dim: usize, rng: &mut Rng) -> Vec<f64> {
    let (_, sigma) = sched.alpha_sigma_unchecked(sched.t_end);
    rng.normal_vec(dim, sigma)
}

/// Independent chains over a shared model; stats are merged in chain order.
pub fn sample_batch(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    noises: &[Vec<f64>],
    grid: &[f64],
    solver: &SolverConfig,
    mode: SampleMode,
) -> Result<(Vec<Vec<f64>>, SolveStats)> {
    let results: Vec<Result<(Vec<f64>, SolveStats)>> = noises
        .par_iter()
        .map(|x| sample(eps, sched, x, grid, solver, mode))
        .collect();
    let mut stats = SolveStats::default();
    let mut out = Vec::with_capacity(noises.len());
    for r in results {
        let (x, s) = r?;
        stats.merge(&s);
        out.push(x);
    }
    Ok((out, stats))
}

/// One row of the solver-error table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub mode: SampleMode,
    /// Network evaluations actually spent per sample.
    pub nfe: usize,
    pub steps: usize,
    pub mean_l2: f64,
    pub std_l2: f64,
}

/// Largest step count whose per-sample cost stays within `nfe`.
pub fn steps_for_nfe(kind: SolverKind, nfe: usize, calls_per_eval: usize) -> Option<usize> {
    let min_steps = if kind == SolverKind::Ab4 { 4 } else { 1 };
    let cost = |n: usize| kind.calls_for_steps(n) * calls_per_eval;
    if !kind.is_fixed_step() || cost(min_steps) > nfe {
        return None;
    }
    let mut n = min_steps;
    while cost(n + 1) <= nfe {
        n += 1;
    }
    Some(n)
}

/// Reference endpoints: `reparam` mode, rk4, with `ref_nfe` evaluations per sample.
pub fn reference_samples(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    noises: &[Vec<f64>],
    scheme: GridScheme,
    ref_nfe: usize,
) -> Result<Vec<Vec<f64>>> {
    let steps = steps_for_nfe(SolverKind::Rk4, ref_nfe, eps.network_calls())
        .ok_or_else(|| Error::argument("reference NFE too small for rk4"))?;
    let grid = sched.time_grid(steps, scheme)?;
    let solver = SolverConfig::new(SolverKind::Rk4);
    Ok(sample_batch(eps, sched, noises, &grid.points, &solver, SampleMode::Reparam)?.0)
}

/// Mean and standard deviation of the l2 distance from each sample to its reference.
pub fn l2_stats(samples: &[Vec<f64>], reference: &[Vec<f64>]) -> (f64, f64) {
    let d: Vec<f64> = samples
        .iter()
        .zip(reference)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .collect();
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Endpoint error of each `(mode, nfe)` pair against [`reference_samples`].
#[allow(clippy::too_many_arguments)]
pub fn solver_error_vs_reference(
    eps: &Guided<'_>,
    sched: &NoiseSchedule,
    noises: &[Vec<f64>],
    reference: &[Vec<f64>],
    kind: SolverKind,
    scheme: GridScheme,
    nfes: &[usize],
    modes: &[SampleMode],
) -> Result<Vec<ErrorRow>> {
    if noises.len() != reference.len() || noises.is_empty() {
        return Err(Error::argument("noise and reference sets must be nonempty and aligned"));
    }
    let mut rows = Vec::new();
    for &mode in modes {
        for &nfe in nfes {
            let steps = steps_for_nfe(kind, nfe, eps.network_calls()).ok_or_else(|| {
                Error::argument(format!("no {kind:?} grid fits within NFE {nfe}"))
            })?;
            let grid = sched.time_grid(steps, scheme)?;
            let (xs, stats) = sample_batch(eps, sched, noises, &grid.points, &SolverConfig::new(kind), mode)?;
            let (mean_l2, std_l2) = l2_stats(&xs, reference);
            rows.push(ErrorRow {
                mode,
                nfe: stats.nfe / noises.len(),
                steps,
                mean_l2,
                std_l2,
            });
        }
    }
    Ok(rows)
}

pub fn write_error_csv<W: Write>(rows: &[ErrorRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "nfe", "mean_l2", "std_l2"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.mode.name().to_string(),
            r.nfe.to_string(),
            r.mean_l2.to_string(),
            r.std_l2.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Samples as CSV with columns `x0..x{d-1}, label, seed`; a missing label is written empty.
pub fn write_samples_csv<W: Write>(
    samples: &[Vec<f64>],
    labels: &[Option<usize>],
    seeds: &[u64],
    out: W,
) -> Result<()> {
    if samples.len() != labels.len() || samples.len() != seeds.len() {
        return Err(Error::argument("samples, labels and seeds differ in length"));
    }
    let d = samples.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    header.push("seed".into());
    w.write_record(&header).map_err(csv_err)?;
    for ((x, l), s) in samples.iter().zip(labels).zip(seeds) {
        let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
        rec.push(l.map_or(String::new(), |l| l.to_string()));
        rec.push(s.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
