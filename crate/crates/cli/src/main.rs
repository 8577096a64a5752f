//! `adjd`: train toy diffusion models, sample them, and run adjoint-gradient tasks.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use adjd_core::config::{parse_config, RunConfig};
use adjd_core::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adjd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train the noise-prediction network on the mixture data.
    TrainDenoiser,
    /// Train the toy classifier used by the tasks.
    TrainClassifier,
    /// Draw samples with the configured solver.
    Sample,
    /// Endpoint error of both clocks against a high-NFE reference.
    BenchSolvers,
    /// Compare adjoint gradients with finite differences.
    Gradcheck,
    /// Optimize initial noise towards a target class.
    Guide,
    /// Bounded noise search that flips the classifier's decision.
    Audit,
    /// Finetune the last layers towards a style reference.
    FinetuneStyle,
    /// Fit a conditioning embedding that reproduces a target sample.
    InvertEmbed,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::TrainDenoiser => "train-denoiser",
            Command::TrainClassifier => "train-classifier",
            Command::Sample => "sample",
            Command::BenchSolvers => "bench-solvers",
            Command::Gradcheck => "gradcheck",
            Command::Guide => "guide",
            Command::Audit => "audit",
            Command::FinetuneStyle => "finetune-style",
            Command::InvertEmbed => "invert-embed",
        }
    }
}

fn error_line(kind: &str, err: &dyn std::fmt::Display, extra: &[(&str, serde_json::Value)]) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("error".into(), kind.into());
    obj.insert("message".into(), err.to_string().replace('\n', " ").into());
    for (k, v) in extra {
        obj.insert((*k).into(), v.clone());
    }
    serde_json::Value::Object(obj).to_string()
}

fn core_error_line(err: &Error) -> String {
    let mut root = err;
    while let Error::Context { source, .. } = root {
        root = source;
    }
    let extra = match root {
        Error::Parse { offset, .. } => vec![("offset", (*offset).into())],
        Error::Validation { path, .. } => vec![("path", path.as_str().into())],
        _ => Vec::new(),
    };
    error_line(err.kind(), err, &extra)
}

fn load_config(cli: &Cli) -> adjd_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::from(e).context(format!("reading {}", p.display())))?;
            parse_config(&bytes)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> adjd_core::Result<()> {
    let Ok(v) = std::env::var("ADJD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::argument(format!("ADJD_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::argument(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", &first, &[]));
            return ExitCode::from(2);
        }
    };
    let result = configure_threads()
        .and_then(|()| load_config(&cli))
        .and_then(|cfg| commands::dispatch(cli.command, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", core_error_line(&e));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_lines_are_single_line_json() {
        let e = Error::Validation {
            path: "solver.kind".into(),
            msg: "unknown variant `rk9`".into(),
        }
        .context("loading run.json");
        let line = core_error_line(&e);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "validation");
        assert_eq!(v["path"], "solver.kind");
        let p = core_error_line(&Error::Parse {
            offset: 7,
            msg: "expected value".into(),
        });
        let v: serde_json::Value = serde_json::from_str(&p).unwrap();
        assert_eq!(v["offset"], 7);
    }

    #[test]
    fn cli_parses_global_flags_after_the_subcommand() {
        let cli = Cli::try_parse_from(["adjd", "sample", "--seed", "4", "--output", "x"]).unwrap();
        assert_eq!(cli.seed, Some(4));
        assert_eq!(cli.command.name(), "sample");
        assert!(Cli::try_parse_from(["adjd", "rk9"]).is_err());
    }
}
