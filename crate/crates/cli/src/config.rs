//! Experiment configuration: strict JSON with a versioned schema tag.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const SCHEMA: &str = "nlab-experiment/1";

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Extremal,
    NoetherCheck,
    Simulate,
    NelsonEstimate,
    StochasticNoether,
    DifferentialCheck,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Extremal => "extremal",
            Kind::NoetherCheck => "noether-check",
            Kind::Simulate => "simulate",
            Kind::NelsonEstimate => "nelson-estimate",
            Kind::StochasticNoether => "stochastic-noether",
            Kind::DifferentialCheck => "differential-check",
        }
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, Kind::Extremal | Kind::NoetherCheck)
    }
}

/// Boundary data `x(a) = start`, `x(b) = end`.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Boundary {
    pub interval: [f64; 2],
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Numeric {
    /// Grid intervals of the boundary value problem.
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub n_paths: Option<usize>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    /// Kernel bandwidth; Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    /// Regression lag in time units, a multiple of `dt`.
    pub h: Option<f64>,
    pub t_min: Option<f64>,
    /// Integration window `(a, b)` of the action, or the Noether time range.
    pub window: Option<[f64; 2]>,
    /// Simulation horizon; defaults to `(0, 1)`.
    pub horizon: Option<[f64; 2]>,
    /// Record every k-th step.
    pub record_every: Option<usize>,
    /// Width of the pooling window of the drift regression.
    pub pool: Option<f64>,
    /// Evaluation times of the drift comparison.
    pub times: Option<Vec<f64>>,
    /// Evaluation points per time.
    pub points: Option<usize>,
    /// Quantile band of the evaluation points.
    pub band: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProductRule {
    pub t: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub kind: Kind,
    #[serde(default = "one")]
    pub dim: usize,
    pub lagrangian: Option<String>,
    pub generators: Option<String>,
    pub group: Option<String>,
    pub sde: Option<String>,
    /// Fixed initial state overriding the catalog default.
    pub x0: Option<Vec<f64>>,
    pub boundary: Option<Boundary>,
    #[serde(default)]
    pub numeric: Numeric,
    /// Signs of `D_mu` to evaluate.
    pub mu: Option<Vec<i32>>,
    pub variations: Option<Vec<String>>,
    /// `C1` and/or `N1`.
    pub spaces: Option<Vec<String>>,
    pub probes: Option<Vec<Probe>>,
    pub product_rule: Option<ProductRule>,
    pub output: PathBuf,
}

fn one() -> usize {
    1
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn positive(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(invalid(format!("numeric.{name} must be positive, got {x}"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA {
            return Err(invalid(format!("schema must be `{SCHEMA}`, got `{}`", self.schema)));
        }
        if self.dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let nm = &self.numeric;
        positive("dt", nm.dt)?;
        positive("bandwidth", nm.bandwidth)?;
        positive("h", nm.h)?;
        positive("t_min", nm.t_min)?;
        positive("pool", nm.pool)?;
        for (name, v) in [("N", nm.n), ("n_paths", nm.n_paths), ("record_every", nm.record_every), ("points", nm.points)] {
            if v == Some(0) {
                return Err(invalid(format!("numeric.{name} must be positive")));
            }
        }
        for (name, w) in [("window", nm.window), ("horizon", nm.horizon), ("band", nm.band)] {
            if let Some([a, b]) = w {
                if !(a < b) || !a.is_finite() || !b.is_finite() {
                    return Err(invalid(format!("numeric.{name} must be an increasing pair")));
                }
            }
        }
        if let Some(mu) = &self.mu {
            if mu.is_empty() || mu.iter().any(|m| m.abs() != 1) {
                return Err(invalid("mu entries must be 1 or -1"));
            }
        }
        if let Some(spaces) = &self.spaces {
            if spaces.iter().any(|s| s != "C1" && s != "N1") {
                return Err(invalid("spaces must be C1 or N1"));
            }
        }
        let need = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(invalid(format!("`{}` needs `{field}`", self.kind.name())))
            }
        };
        match self.kind {
            Kind::Extremal => {
                need("lagrangian", self.lagrangian.is_some())?;
                need("boundary", self.boundary.is_some())?;
                need("numeric.N", nm.n.is_some())?;
            }
            Kind::NoetherCheck => {
                need("lagrangian", self.lagrangian.is_some())?;
                need("generators", self.generators.is_some())?;
                need("boundary", self.boundary.is_some())?;
                need("numeric.N", nm.n.is_some())?;
            }
            Kind::Simulate => {}
            Kind::NelsonEstimate => need("numeric.times", nm.times.is_some())?,
            Kind::StochasticNoether => {
                need("lagrangian", self.lagrangian.is_some())?;
                need("group", self.group.is_some())?;
            }
            Kind::DifferentialCheck => {
                need("lagrangian", self.lagrangian.is_some())?;
                if self.variations.is_some() {
                    need("numeric.window", nm.window.is_some())?;
                }
            }
        }
        if self.kind.is_stochastic() {
            need("sde", self.sde.is_some())?;
            need("numeric.n_paths", nm.n_paths.is_some())?;
            need("numeric.dt", nm.dt.is_some())?;
            need("numeric.seed", nm.seed.is_some())?;
        }
        Ok(())
    }

    pub fn mus(&self) -> Vec<i32> {
        self.mu.clone().unwrap_or_else(|| vec![1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema": "nlab-experiment/1", "kind": "simulate", "sde": "brownian",
        "numeric": {"n_paths": 10, "dt": 0.01, "seed": 1}, "output": "out"}"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.kind, Kind::Simulate);
        assert_eq!(cfg.dim, 1);
    }

    #[test]
    fn rejects_unknown_and_missing_fields() {
        let extra = MINIMAL.replace("\"kind\"", "\"colour\": 1, \"kind\"");
        assert!(matches!(ExperimentConfig::from_json(&extra), Err(CliError::Validation(_))));
        let no_seed = MINIMAL.replace(", \"seed\": 1", "");
        assert!(ExperimentConfig::from_json(&no_seed).is_err());
        let bad_schema = MINIMAL.replace("nlab-experiment/1", "nlab-experiment/0");
        assert!(ExperimentConfig::from_json(&bad_schema).is_err());
        let bad_kind = MINIMAL.replace("simulate", "simulated");
        assert!(ExperimentConfig::from_json(&bad_kind).is_err());
        let negative = MINIMAL.replace("0.01", "-0.01");
        assert!(ExperimentConfig::from_json(&negative).is_err());
    }
}
