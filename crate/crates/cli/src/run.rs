//! Run directories and the models a run needs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adjd_core::checkpoint::{check_schedule, load_classifier, load_denoiser, save_classifier, save_denoiser};
use adjd_core::config::RunConfig;
use adjd_core::data::LabeledData;
use adjd_core::metrics::{run_report, MemorySweep, MetricsTable, PhaseReport};
use adjd_core::nnet::{train_score_matching, Denoiser, TrainReport};
use adjd_core::odeint::SolveStats;
use adjd_core::rng::Rng;
use adjd_core::sampler::write_samples_csv;
use adjd_core::tasks::{train_classifier, ClassifierReport, ToyClassifier};
use adjd_core::{Error, Result};

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    started: Instant,
    phases: Vec<PhaseReport>,
    pub results: BTreeMap<String, serde_json::Value>,
    pub memory: Option<MemorySweep>,
    data: Option<(LabeledData, LabeledData)>,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::from(e).context(format!("writing {}", path.display()))
}

impl Run {
    /// Create the output layout and echo the resolved config.
    pub fn create(cfg: RunConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        for sub in ["checkpoints", "samples"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_at(&p))?;
        }
        let p = dir.join("config.json");
        fs::write(&p, cfg.to_json() + "\n").map_err(io_at(&p))?;
        Ok(Self {
            cfg,
            dir,
            started: Instant::now(),
            phases: Vec::new(),
            results: BTreeMap::new(),
            memory: None,
            data: None,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn rng(&self, label: &str) -> Rng {
        Rng::labeled(self.cfg.seed, label)
    }

    pub fn phase(&mut self, name: &str, stats: &[SolveStats]) {
        self.phases.push(PhaseReport::from_stats(name, stats));
    }

    pub fn result(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.results.insert(key.to_string(), value.into());
    }

    pub fn result_json<T: serde::Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).expect("report values serialize");
        self.results.insert(key.to_string(), v);
    }

    pub fn write_metrics(&self, table: &MetricsTable) -> Result<()> {
        let p = self.path("metrics.csv");
        let f = fs::File::create(&p).map_err(io_at(&p))?;
        table.write_csv(std::io::BufWriter::new(f))
    }

    pub fn writer(&self, rel: &str) -> Result<std::io::BufWriter<fs::File>> {
        let p = self.path(rel);
        Ok(std::io::BufWriter::new(fs::File::create(&p).map_err(io_at(&p))?))
    }

    pub fn write_samples(&self, rel: &str, samples: &[Vec<f64>], labels: &[Option<usize>]) -> Result<()> {
        let seeds = vec![self.cfg.seed; samples.len()];
        write_samples_csv(samples, labels, &seeds, self.writer(rel)?)
    }

    pub fn finish(self, command: &str) -> Result<()> {
        let mut report = run_report(command, self.phases, self.started.elapsed().as_secs_f64());
        report.memory = self.memory;
        report.results = self.results;
        let p = self.dir.join("report.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(io_at(&p))
    }

    /// `(train, holdout)` mixture data for this seed.
    pub fn data(&mut self) -> Result<&(LabeledData, LabeledData)> {
        if self.data.is_none() {
            self.data = Some(self.cfg.data.split(self.cfg.seed)?);
        }
        Ok(self.data.as_ref().expect("just filled"))
    }

    /// Train a fresh denoiser and save it under `checkpoints/`.
    pub fn train_denoiser(&mut self) -> Result<(Denoiser, TrainReport)> {
        let cfg = self.cfg.clone();
        let mut model = Denoiser::new(cfg.model.clone(), &mut self.rng("model/init"))?;
        let (train, _) = self.data()?;
        let report = train_score_matching(&mut model, train, &cfg.schedule, &cfg.train, cfg.seed)?;
        save_denoiser(&self.path("checkpoints/denoiser.adjd"), &model, &cfg.schedule)?;
        Ok((model, report))
    }

    pub fn train_classifier(&mut self) -> Result<(ToyClassifier, ClassifierReport)> {
        let cfg = self.cfg.classifier.clone();
        let seed = self.cfg.seed;
        let (train, _) = self.data()?;
        let (clf, report) = train_classifier(train, &cfg, seed)?;
        save_classifier(&self.path("checkpoints/classifier.adjd"), &clf)?;
        Ok((clf, report))
    }

    /// The configured denoiser checkpoint, or a freshly trained one.
    pub fn denoiser(&mut self) -> Result<Denoiser> {
        match self.cfg.checkpoints.denoiser.clone() {
            Some(p) => {
                let (model, trained) = load_denoiser(&p)?;
                if !check_schedule(&trained, &self.cfg.schedule) {
                    self.result("schedule_mismatch", true);
                }
                if model.data_dim() != self.cfg.model.data_dim {
                    return Err(Error::argument("checkpoint data dimension differs from model.data_dim"));
                }
                Ok(model)
            }
            None => {
                log::info!("no denoiser checkpoint configured; training one");
                Ok(self.train_denoiser()?.0)
            }
        }
    }

    pub fn classifier(&mut self) -> Result<ToyClassifier> {
        match self.cfg.checkpoints.classifier.clone() {
            Some(p) => load_classifier(&p),
            None => {
                log::info!("no classifier checkpoint configured; training one");
                Ok(self.train_classifier()?.0)
            }
        }
    }
}
