//! Validated run parameters and exit codes.

use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use yoco::model::io::read_manifest;
use yoco::{Error, ModelConfig};

pub const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  verification or equivalence failure
  2  usage error (bad or unknown flags)
  3  invalid model config
  4  I/O failure (unreadable input, unwritable output)
  5  invalid weights file
  6  invalid run parameters (token out of vocabulary, devices > n, ...)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Verify = 1,
    Config = 3,
    Io = 4,
    Weights = 5,
    Params = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => ExitCode::Config,
            Error::Io(_) => ExitCode::Io,
            Error::Weights(_) | Error::Json(_) => ExitCode::Weights,
            Error::TokenOutOfVocab { .. }
            | Error::EmptyPrompt
            | Error::TooLong { .. }
            | Error::InvalidArgument(_) => ExitCode::Params,
            _ => ExitCode::Verify,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ExitCode::Io, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum ParadigmArg {
    Parallel,
    Recurrent,
    Chunkwise,
}

/// Where the model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Config(ModelConfig),
    Weights(PathBuf, ModelConfig),
}

impl ModelSource {
    pub fn config(&self) -> &ModelConfig {
        match self {
            ModelSource::Config(c) | ModelSource::Weights(_, c) => c,
        }
    }
}

/// Resolves `--config`, `--preset` and `--weights` into one model source.
/// At most one may be given; the default is the tiny preset.
pub fn resolve_model(
    config: Option<&PathBuf>,
    preset: Option<&str>,
    weights: Option<&PathBuf>,
) -> CliResult<ModelSource> {
    let given = [config.is_some(), preset.is_some(), weights.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if given > 1 {
        return Err(CliError::new(
            ExitCode::Params,
            "--config, --preset and --weights are mutually exclusive",
        ));
    }
    if let Some(w) = weights {
        let m = read_manifest(w).map_err(|e| match e {
            Error::Io(e) => CliError::new(ExitCode::Io, format!("{}: {e}", w.display())),
            Error::Config(m) => CliError::new(ExitCode::Weights, format!("manifest config: {m}")),
            other => CliError::new(ExitCode::Weights, other.to_string()),
        })?;
        return Ok(ModelSource::Weights(w.clone(), m.config));
    }
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))?;
        return Ok(ModelSource::Config(ModelConfig::from_json(&text)?));
    }
    let cfg = match preset {
        Some(p) => ModelConfig::preset(p).map_err(|e| CliError::new(ExitCode::Config, e.to_string()))?,
        None => ModelConfig::tiny(),
    };
    Ok(ModelSource::Config(cfg))
}
