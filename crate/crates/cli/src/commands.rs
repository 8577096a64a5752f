use rayon::prelude::*;

use adjd_core::adjoint::{
    adjoint_backward, gradcheck, naive_backprop, write_gradcheck_csv, AdjointConfig, Pipeline, Want,
};
use adjd_core::checkpoint::{save_denoiser, save_embedding};
use adjd_core::config::RunConfig;
use adjd_core::metrics::{sliced_wasserstein, MemorySweep, MetricsTable, DEFAULT_PROJECTIONS};
use adjd_core::nnet::{score_matching_loss, Condition, Guided};
use adjd_core::odeint::{SolveStats, SolverConfig};
use adjd_core::rng::derive_seed;
use adjd_core::sampler::{
    initial_noise, reference_samples, sample_batch, solve_reparam, solver_error_vs_reference,
    write_error_csv, SampleMode,
};
use adjd_core::tasks::{
    audit_batch, finetune_weights, invert_embedding, make_triplets, optimize_noise, Generator,
    StyleObjective,
};
use adjd_core::{Error, Result};

use crate::run::Run;
use crate::Command;

/// Step counts of the retained-state sweep in the gradcheck report.
const MEMORY_SWEEP: [usize; 4] = [10, 50, 200, 1000];

/// Holdout points used to score a trained denoiser.
const HOLDOUT_LOSS_POINTS: usize = 4096;

pub fn dispatch(command: Command, cfg: RunConfig) -> Result<()> {
    let mut run = Run::create(cfg)?;
    match command {
        Command::TrainDenoiser => train_denoiser(&mut run)?,
        Command::TrainClassifier => train_classifier(&mut run)?,
        Command::Sample => sample(&mut run)?,
        Command::BenchSolvers => bench_solvers(&mut run)?,
        Command::Gradcheck => return gradcheck_cmd(run),
        Command::Guide => guide(&mut run)?,
        Command::Audit => audit(&mut run)?,
        Command::FinetuneStyle => finetune_style(&mut run)?,
        Command::InvertEmbed => invert_embed(&mut run)?,
    }
    run.finish(command.name())
}

fn condition(label: Option<usize>) -> Condition {
    label.map_or(Condition::Null, Condition::Label)
}

fn noises(run: &Run, label: &str, n: usize) -> Vec<Vec<f64>> {
    let mut rng = run.rng(label);
    let d = run.cfg.model.data_dim;
    (0..n).map(|_| initial_noise(&run.cfg.schedule, d, &mut rng)).collect()
}

fn loss_table(losses: &[f64]) -> MetricsTable {
    let mut t = MetricsTable::new(&["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        t.push(vec![i as f64, *l]);
    }
    t
}

fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn train_denoiser(run: &mut Run) -> Result<()> {
    let (model, report) = run.train_denoiser()?;
    run.write_metrics(&loss_table(&report.losses))?;
    let cfg = run.cfg.clone();
    let holdout = run.data()?.1.clone();
    let holdout_loss = score_matching_loss(&model, &holdout, &cfg.schedule, HOLDOUT_LOSS_POINTS, cfg.seed)?;
    let eps = Guided::new(&model, &Condition::Null, cfg.sample.guidance)?;
    let grid = cfg.sample_config().grid(&cfg.schedule)?;
    let xs = noises(run, "train/eval-noise", cfg.sample.count);
    let (samples, stats) = sample_batch(&eps, &cfg.schedule, &xs, &grid.points, &cfg.solver, cfg.sample.mode)?;
    let sw = sliced_wasserstein(&samples, &holdout.points, DEFAULT_PROJECTIONS, cfg.seed)?;
    run.write_samples("samples/samples.csv", &samples, &vec![None; samples.len()])?;
    run.phase("sample", &[stats]);
    run.result("final_loss", tail_mean(&report.losses, 100));
    run.result("holdout_loss", holdout_loss);
    run.result("sliced_wasserstein", sw);
    Ok(())
}

fn train_classifier(run: &mut Run) -> Result<()> {
    let (clf, report) = run.train_classifier()?;
    run.write_metrics(&loss_table(&report.losses))?;
    let holdout_accuracy = clf.accuracy(&run.data()?.1);
    run.result("train_accuracy", report.train_accuracy);
    run.result("holdout_accuracy", holdout_accuracy);
    Ok(())
}

fn sample(run: &mut Run) -> Result<()> {
    let model = run.denoiser()?;
    let cfg = run.cfg.clone();
    let eps = Guided::new(&model, &condition(cfg.sample.label), cfg.sample.guidance)?;
    let grid = cfg.sample_config().grid(&cfg.schedule)?;
    let xs = noises(run, "sample/noise", cfg.sample.count);
    let (samples, stats) = sample_batch(&eps, &cfg.schedule, &xs, &grid.points, &cfg.solver, cfg.sample.mode)?;
    let holdout = &run.data()?.1;
    let sw = sliced_wasserstein(&samples, &holdout.points, DEFAULT_PROJECTIONS, cfg.seed)?;
    let mut t = MetricsTable::new(&["count", "nfe_per_sample", "sliced_wasserstein"]);
    t.push(vec![samples.len() as f64, (stats.nfe / samples.len()) as f64, sw]);
    run.write_metrics(&t)?;
    run.write_samples("samples/samples.csv", &samples, &vec![cfg.sample.label; samples.len()])?;
    run.phase("sample", &[stats]);
    run.result("sliced_wasserstein", sw);
    Ok(())
}

fn bench_solvers(run: &mut Run) -> Result<()> {
    let model = run.denoiser()?;
    let cfg = run.cfg.clone();
    let b = &cfg.bench;
    let eps = Guided::new(&model, &condition(b.label), b.guidance)?;
    let xs = noises(run, "bench/noise", b.samples);
    let reference = reference_samples(&eps, &cfg.schedule, &xs, b.scheme, b.reference_nfe)?;
    let modes = [SampleMode::Original, SampleMode::Reparam];
    let rows = solver_error_vs_reference(&eps, &cfg.schedule, &xs, &reference, b.solver, b.scheme, &b.nfes, &modes)?;
    write_error_csv(&rows, run.writer("metrics.csv")?)?;
    let errors = |mode: SampleMode| -> Vec<f64> { rows.iter().filter(|r| r.mode == mode).map(|r| r.mean_l2).collect() };
    let (orig, rep) = (errors(SampleMode::Original), errors(SampleMode::Reparam));
    let reduction: Vec<f64> = orig.iter().zip(&rep).map(|(o, r)| 1.0 - r / o).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    run.result_json("rows", &rows);
    run.result_json("reparam_reduction", &reduction);
    run.result("original_decreasing", decreasing(&orig));
    run.result("reparam_decreasing", decreasing(&rep));
    Ok(())
}

fn distinct_coords(run: &Run, n: usize, total: usize) -> Vec<usize> {
    let mut rng = run.rng("gradcheck/theta");
    let mut out = Vec::with_capacity(n.min(total));
    while out.len() < n.min(total) {
        let i = rng.below(total);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn gradcheck_cmd(mut run: Run) -> Result<()> {
    let model = run.denoiser()?;
    let cfg = run.cfg.clone();
    let g = &cfg.gradcheck;
    let solver = SolverConfig::new(g.solver);
    let pipe = Pipeline {
        model: &model,
        condition: condition(g.label),
        guidance: g.guidance,
        sched: cfg.schedule,
        grid: cfg.schedule.time_grid(g.steps, g.scheme)?.points,
        solver,
    };
    let x_t = noises(&run, "gradcheck/noise", 1).remove(0);
    let coords = distinct_coords(&run, g.theta_coords, model.num_params());
    let report = gradcheck(&pipe, &x_t, &g.loss, &g.targets, &coords, g.h, g.tolerance)?;
    write_gradcheck_csv(&report, run.writer("metrics.csv")?)?;

    // retained states of both gradient methods, and their agreement at the configured N
    let eps = Guided::new(&model, &pipe.condition, g.guidance)?;
    let mut adjoint_peak = Vec::new();
    let mut naive_peak = Vec::new();
    let mut stats: Vec<SolveStats> = Vec::new();
    let mut steps: Vec<usize> = MEMORY_SWEEP.to_vec();
    if !steps.contains(&g.steps) {
        steps.push(g.steps);
    }
    let mut agreement = f64::NAN;
    for &n in &steps {
        let grid = cfg.schedule.time_grid(n, g.scheme)?.points;
        let (y, fs) = solve_reparam(&eps, &cfg.schedule, &x_t, &grid, &solver)?;
        let a = cfg.schedule.alpha(grid[grid.len() - 1]);
        let x0: Vec<f64> = y.iter().map(|v| a * v).collect();
        let dl = g.loss.grad(&x0);
        let adj = adjoint_backward(&eps, &cfg.schedule, &grid, &solver, &y, &dl, &AdjointConfig::default())?;
        let naive = naive_backprop(&eps, &cfg.schedule, &grid, &solver, &x_t, &dl, Want::noise_only())?;
        if n == g.steps {
            let num: f64 = adj.grads.x_t.iter().zip(&naive.grads.x_t).map(|(u, v)| (u - v).powi(2)).sum();
            let den: f64 = naive.grads.x_t.iter().map(|v| v * v).sum();
            agreement = (num / den.max(f64::MIN_POSITIVE)).sqrt();
        }
        if MEMORY_SWEEP.contains(&n) {
            adjoint_peak.push(adj.stats.max_retained_states);
            naive_peak.push(naive.stats.max_retained_states);
        }
        stats.extend([fs, adj.stats]);
    }
    run.phase("memory-sweep", &stats);
    run.memory = Some(MemorySweep::new(MEMORY_SWEEP.to_vec(), adjoint_peak, naive_peak));
    run.result("max_rel_err", report.max_rel_err);
    run.result("tolerance", report.tolerance);
    run.result("passed", report.passed);
    run.result("naive_relative_difference", agreement);
    let passed = report.passed;
    let max = report.max_rel_err;
    run.finish(Command::Gradcheck.name())?;
    if !passed {
        return Err(Error::Validation {
            path: "gradcheck.tolerance".into(),
            msg: format!("gradient check failed: max relative error {max:e} exceeds {:e}", g.tolerance),
        });
    }
    Ok(())
}

fn guide(run: &mut Run) -> Result<()> {
    let model = run.denoiser()?;
    let clf = run.classifier()?;
    let cfg = run.cfg.clone();
    let gen = Generator::new(&model, &cfg.schedule, cfg.task.sampling)?;
    let null = gen.guided(&Condition::Null)?;
    let runs: Vec<(usize, Vec<f64>)> = (0..cfg.task.guide.runs)
        .map(|r| (r, noises(run, &format!("guide/noise/{r}"), 1).remove(0)))
        .collect();
    let reports = runs
        .par_iter()
        .map(|(_, x_t)| {
            // target the class after the one the unguided sample lands in
            let before = gen.generate(&null, x_t)?;
            let label = (clf.predict(&before.x0) + 1) % clf.num_classes();
            optimize_noise(&gen, &clf, &Condition::Null, label, x_t, &cfg.task.guide.optim)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut t = MetricsTable::new(&["run", "label", "epoch", "log_prob", "best_log_prob", "grad_norm"]);
    for (r, rep) in reports.iter().enumerate() {
        for h in &rep.history {
            t.push(vec![r as f64, rep.label as f64, h.epoch as f64, h.log_prob, h.best_log_prob, h.grad_norm]);
        }
    }
    run.write_metrics(&t)?;
    let labels: Vec<Option<usize>> = reports.iter().map(|r| Some(r.label)).collect();
    let before: Vec<Vec<f64>> = reports.iter().map(|r| r.x0_before.clone()).collect();
    let after: Vec<Vec<f64>> = reports.iter().map(|r| r.x0_after.clone()).collect();
    run.write_samples("samples/samples_before.csv", &before, &labels)?;
    run.write_samples("samples/samples_after.csv", &after, &labels)?;
    let stats: Vec<SolveStats> = reports.iter().map(|r| r.stats).collect();
    run.phase("guide", &stats);
    let gains: Vec<f64> = reports.iter().map(|r| r.improvement()).collect();
    run.result("runs_gaining_one_nat", gains.iter().filter(|&&g| g >= 1.0).count());
    run.result_json("improvement", &gains);
    Ok(())
}

fn audit(run: &mut Run) -> Result<()> {
    let model = run.denoiser()?;
    let clf = run.classifier()?;
    let cfg = run.cfg.clone();
    let holdout = run.data()?.1.clone();
    let concepts = holdout
        .class_means(|p| clf.features(p))
        .into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| Error::Data(format!("holdout set has no points of class {k}"))))
        .collect::<Result<Vec<_>>>()?;
    let a = &cfg.task.audit;
    let labels: Vec<usize> = if a.labels.is_empty() {
        (0..concepts.len().min(clf.num_classes())).collect()
    } else {
        a.labels.clone()
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| derive_seed(cfg.seed, &format!("audit/seed/{i}"))).collect();
    let gen = Generator::new(&model, &cfg.schedule, cfg.task.sampling)?;
    let report = audit_batch(&gen, &clf, &concepts, &labels, &seeds, &a.search)?;
    let mut t = MetricsTable::new(&[
        "label",
        "seed_index",
        "attempted",
        "success",
        "iterations",
        "initial_distance",
        "final_distance",
        "delta_inf",
        "sample_shift",
    ]);
    let mut max_delta = 0.0f64;
    for (i, o) in report.outcomes.iter().enumerate() {
        let delta_inf = o.delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        max_delta = max_delta.max(delta_inf);
        t.push(vec![
            o.label as f64,
            (i % seeds.len().max(1)) as f64,
            f64::from(u8::from(o.attempted)),
            f64::from(u8::from(o.success)),
            o.iterations as f64,
            o.initial_distance,
            o.final_distance,
            delta_inf,
            o.sample_shift,
        ]);
    }
    run.write_metrics(&t)?;
    let stats: Vec<SolveStats> = report.outcomes.iter().map(|o| o.stats).collect();
    run.phase("audit", &stats);
    run.result("attempted", report.outcomes.iter().filter(|o| o.attempted).count());
    run.result("max_delta_inf", max_delta);
    run.result("delta_within_tau", max_delta <= a.search.tau);
    run.result_json("success_ratio", &report.table);
    Ok(())
}

fn finetune_style(run: &mut Run) -> Result<()> {
    let mut model = run.denoiser()?;
    let clf = run.classifier()?;
    let cfg = run.cfg.clone();
    let f = &cfg.task.finetune;
    let sampling = cfg.task.sampling;
    let labels: Vec<usize> = (0..cfg.data.modes).collect();
    let triplets = make_triplets(&model, &cfg.schedule, sampling, &labels, f.per_label, cfg.seed)?;
    let mut style = StyleObjective::from_reference(&clf, &cfg.data.center(f.style_mode), triplets);
    style.w_s = f.w_s;
    style.w_c = f.w_c;
    let before = model.clone();
    let report = finetune_weights(&mut model, &cfg.schedule, sampling, &clf, &style, &f.optim, cfg.seed)?;
    let mut t = MetricsTable::new(&["epoch", "total", "style", "content"]);
    for e in &report.curve {
        t.push(vec![e.epoch as f64, e.total, e.style, e.content]);
    }
    run.write_metrics(&t)?;
    save_denoiser(&run.path("checkpoints/finetuned.adjd"), &model, &cfg.schedule)?;

    let gen = Generator::new(&model, &cfg.schedule, sampling)?;
    let after = style
        .triplets
        .par_iter()
        .map(|tr| {
            let eps = Guided::with_vector(&model, tr.cond.clone(), sampling.guidance)?;
            Ok(gen.generate(&eps, &tr.x_t)?.x0)
        })
        .collect::<Result<Vec<_>>>()?;
    let originals: Vec<Vec<f64>> = style.triplets.iter().map(|t| t.x0.clone()).collect();
    let tags: Vec<Option<usize>> = style.triplets.iter().map(|t| t.label).collect();
    run.write_samples("samples/samples_before.csv", &originals, &tags)?;
    run.write_samples("samples/samples_after.csv", &after, &tags)?;

    let start = report.trainable.0;
    let frozen = before.params()[..start]
        .iter()
        .zip(&model.params()[..start])
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && before.cond_table() == model.cond_table();
    run.phase("finetune", &[report.stats]);
    run.result("initial_loss", report.initial_loss());
    run.result("final_loss", report.final_loss());
    run.result("loss_ratio", report.final_loss() / report.initial_loss());
    run.result("updates", report.updates);
    run.result("frozen_unchanged", frozen);
    Ok(())
}

fn invert_embed(run: &mut Run) -> Result<()> {
    let model = run.denoiser()?;
    let cfg = run.cfg.clone();
    let k = model.num_classes();
    let gen = Generator::new(&model, &cfg.schedule, cfg.task.sampling)?;
    let inv = cfg.task.invert.optim;
    let jobs: Vec<(Vec<f64>, usize, usize)> = (0..cfg.task.invert.runs)
        .map(|r| {
            let mut rng = run.rng(&format!("invert/{r}"));
            let x_t = initial_noise(&cfg.schedule, model.data_dim(), &mut rng);
            let base = rng.below(k);
            let target = if k > 1 { (base + 1 + rng.below(k - 1)) % k } else { base };
            (x_t, base, target)
        })
        .collect();
    let results = jobs
        .par_iter()
        .map(|(x_t, b, t)| {
            let base = model.embed(&Condition::Label(*b))?;
            let target = gen.generate(&gen.guided(&Condition::Label(*t))?, x_t)?.x0;
            let init = inv.composition.null_init(&model);
            let rep = invert_embedding(&gen, &base, &init, x_t, &target, &inv)?;
            let c = inv.composition.compose(&base, &rep.best_hash);
            let fitted = gen.generate(&Guided::with_vector(&model, c, gen.sampling.guidance)?, x_t)?.x0;
            Ok((base, target, fitted, rep))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = MetricsTable::new(&["run", "step", "mse", "best_mse"]);
    for (r, (_, _, _, rep)) in results.iter().enumerate() {
        for h in &rep.history {
            t.push(vec![r as f64, h.step as f64, h.mse, h.best_mse]);
        }
    }
    run.write_metrics(&t)?;
    for (r, (base, _, _, rep)) in results.iter().enumerate() {
        save_embedding(&run.path(&format!("checkpoints/embedding_{r}.adjd")), &rep.best_hash, base, &cfg.schedule)?;
    }
    let tags: Vec<Option<usize>> = jobs.iter().map(|j| Some(j.2)).collect();
    let targets: Vec<Vec<f64>> = results.iter().map(|r| r.1.clone()).collect();
    let fitted: Vec<Vec<f64>> = results.iter().map(|r| r.2.clone()).collect();
    run.write_samples("samples/samples_before.csv", &targets, &tags)?;
    run.write_samples("samples/samples_after.csv", &fitted, &tags)?;
    let stats: Vec<SolveStats> = results.iter().map(|r| r.3.stats).collect();
    run.phase("invert", &stats);
    let reductions: Vec<f64> = results.iter().map(|r| r.3.reduction()).collect();
    run.result("runs_reducing_80_percent", reductions.iter().filter(|&&v| v >= 0.8).count());
    run.result_json("reduction", &reductions);
    Ok(())
}
