use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {what} = {value} outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("solver error at clock {clock}: {msg}")]
    Solver { clock: f64, msg: String },

    #[error("stiffness error: step {step:e} underflowed near clock {clock}")]
    Stiffness { clock: f64, step: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("backprop error at clock {clock}: {msg}")]
    Backprop { clock: f64, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("validation error at {path}: {msg}")]
    Validation { path: String, msg: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::Argument(_) => "argument",
            Error::Data(_) => "data",
            Error::Unsupported(_) => "unsupported",
            Error::Solver { .. } => "solver",
            Error::Stiffness { .. } => "stiffness",
            Error::Training { .. } => "training",
            Error::Backprop { .. } => "backprop",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::Context { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(what: &str, xs: &[f64]) -> Result<()> {
    if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what}[{i}] is not finite ({})", xs[i])));
    }
    Ok(())
}
