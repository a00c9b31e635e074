//! Config-driven runner for the nlab verification pipelines.

pub mod catalog;
pub mod config;
pub mod pipelines;

use std::fmt::Display;
use std::io::{self, Write};
use std::path::Path;

use nlab::lagrangian::LagrangianError;
use nlab::nelson::NelsonError;
use nlab::noether::NoetherError;
use nlab::sde::SdeError;
use nlab::stochastic::StochasticError;
use nlab::variational::VariationalError;
use thiserror::Error;

pub use config::ExperimentConfig;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numerical(_) | CliError::Io(_) => EXIT_NUMERICAL,
        }
    }
}

fn validation(module: &str, e: impl Display) -> CliError {
    CliError::Validation(format!("{module}: {e}"))
}

fn numerical(module: &str, e: impl Display) -> CliError {
    CliError::Numerical(format!("{module}: {e}"))
}

impl From<LagrangianError> for CliError {
    fn from(e: LagrangianError) -> Self {
        match e {
            LagrangianError::Domain { .. } => numerical("lagrangian", e),
            _ => validation("lagrangian", e),
        }
    }
}

impl From<VariationalError> for CliError {
    fn from(e: VariationalError) -> Self {
        match e {
            VariationalError::Argument(_) => validation("variational", e),
            VariationalError::Lagrangian(inner) => inner.into(),
            VariationalError::Io(io) => CliError::Io(io),
            _ => numerical("variational", e),
        }
    }
}

impl From<NoetherError> for CliError {
    fn from(e: NoetherError) -> Self {
        match e {
            NoetherError::Lagrangian(inner) => inner.into(),
            NoetherError::Variational(inner) => inner.into(),
            _ => validation("noether", e),
        }
    }
}

impl From<SdeError> for CliError {
    fn from(e: SdeError) -> Self {
        match e {
            SdeError::BlowUp { .. } | SdeError::Normalization { .. } => numerical("sde", e),
            SdeError::Io(io) => CliError::Io(io),
            _ => validation("sde", e),
        }
    }
}

impl From<NelsonError> for CliError {
    fn from(e: NelsonError) -> Self {
        match e {
            NelsonError::InsufficientData { .. } => numerical("nelson", e),
            NelsonError::Sde(inner) => inner.into(),
            _ => validation("nelson", e),
        }
    }
}

impl From<StochasticError> for CliError {
    fn from(e: StochasticError) -> Self {
        match e {
            StochasticError::Lagrangian(inner) => inner.into(),
            StochasticError::Nelson(inner) => inner.into(),
            StochasticError::Sde(inner) => inner.into(),
            StochasticError::NotFinite { .. } => numerical("stochastic", e),
            _ => validation("stochastic", e),
        }
    }
}

/// Ordered `key=value` verdicts and figures of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// True iff every `pass` entry (and every `*_pass`) is `true`.
    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .filter(|(k, _)| k == "pass" || k.ends_with("_pass"))
            .all(|(_, v)| v == "true")
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }

    /// Two aligned columns for terminals.
    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        self.entries
            .iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Summary {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Summary { entries }
    }
}

/// Runs a validated config, writing artifacts and `summary` into `out`.
pub fn run_config(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    std::fs::create_dir_all(out)?;
    let summary = pipelines::run(cfg, out)?;
    let file = std::fs::File::create(out.join("summary"))?;
    summary.write(io::BufWriter::new(file))?;
    Ok(summary)
}

/// Exit code of a finished run.
pub fn exit_code(result: &Result<Summary, CliError>) -> i32 {
    match result {
        Ok(s) if s.passed() => EXIT_PASS,
        Ok(_) => EXIT_FAIL,
        Err(e) => e.exit_code(),
    }
}
