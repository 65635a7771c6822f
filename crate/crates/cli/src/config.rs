use std::path::{Path, PathBuf};

use mfc::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const DEFAULT_H: f64 = 0.125;
pub const DEFAULT_HORIZON: f64 = 1.0;
pub const DEFAULT_DISCOUNT_RATE: f64 = 1.0;
pub const DEFAULT_HALF_WIDTH: f64 = 1.5;
pub const DEFAULT_CELLS: usize = 5;
pub const DEFAULT_N: u32 = 6;
pub const DEFAULT_PARTICLES: usize = 256;
pub const DEFAULT_REPLICATIONS: usize = 16;
pub const DEFAULT_SEED: u64 = 20240601;
pub const DEFAULT_AUDIT_SAMPLES: usize = 2000;
pub const DEFAULT_OUT: &str = "out";

/// Parsed run configuration. Only `[model]` is mandatory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub h: Option<f64>,
    pub horizon: Option<f64>,
    pub discount_rate: Option<f64>,
    /// Half-width `L` of the truncation box.
    pub half_width: Option<f64>,
    /// Cells per axis `m`.
    pub cells: Option<usize>,
    /// Quantization denominator.
    pub n: Option<u32>,
    /// Explicit action grid; defaults to the discretized action set.
    pub actions: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Execution {
    pub particles: Option<usize>,
    pub replications: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub audit_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionChoice {
    Finite,
    Discounted,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// Persisted policy JSON.
    pub file: Option<PathBuf>,
    /// Constant action used when no file is given.
    pub constant: Option<Vec<f64>>,
    pub criterion: Option<CriterionChoice>,
}

/// Overrides applied on top of the built-in plan for the chosen experiment.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: Option<String>,
    pub horizon: Option<f64>,
    pub h_ladder: Option<Vec<f64>>,
    pub h_ref: Option<f64>,
    pub n_ladder: Option<Vec<usize>>,
    pub particles: Option<usize>,
    pub replications: Option<usize>,
    pub slope_band: Option<[f64; 2]>,
    pub min_fraction: Option<f64>,
}

/// Scalar overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Fully resolved scalar settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub h: f64,
    pub horizon: f64,
    pub discount_rate: f64,
    pub half_width: f64,
    pub cells: usize,
    pub n: u32,
    pub particles: usize,
    pub replications: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out: PathBuf,
    pub audit_samples: usize,
}

pub fn load(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        Failure::Config(m) => Failure::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<RunConfig, Failure> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().trim().to_string();
        match e.span() {
            Some(span) => {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                Failure::Config(format!("{msg} (line {line})"))
            }
            None => Failure::Config(msg),
        }
    })
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Failure::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn at_least_one<T: Into<u64> + Copy>(name: &str, v: T) -> Result<T, Failure> {
    if v.into() >= 1 {
        Ok(v)
    } else {
        Err(Failure::Config(format!("{name} must be at least 1")))
    }
}

impl RunConfig {
    /// Applies flag > file > default and range-checks every scalar.
    pub fn settings(&self, flags: &Overrides) -> Result<Settings, Failure> {
        let d = &self.discretization;
        let e = &self.execution;
        let horizon = d.horizon.unwrap_or(DEFAULT_HORIZON);
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Failure::Config(format!(
                "discretization.horizon must be finite and nonnegative, got {horizon}"
            )));
        }
        let workers = flags.workers.or(e.workers);
        if let Some(w) = workers {
            at_least_one("workers", w as u64)?;
        }
        Ok(Settings {
            h: positive("discretization.h", d.h.unwrap_or(DEFAULT_H))?,
            horizon,
            discount_rate: positive("discretization.discount_rate", d.discount_rate.unwrap_or(DEFAULT_DISCOUNT_RATE))?,
            half_width: positive("discretization.half_width", d.half_width.unwrap_or(DEFAULT_HALF_WIDTH))?,
            cells: at_least_one("discretization.cells", d.cells.unwrap_or(DEFAULT_CELLS) as u64)? as usize,
            n: at_least_one("discretization.n", d.n.unwrap_or(DEFAULT_N))?,
            particles: at_least_one("execution.particles", e.particles.unwrap_or(DEFAULT_PARTICLES) as u64)? as usize,
            replications: at_least_one(
                "execution.replications",
                e.replications.unwrap_or(DEFAULT_REPLICATIONS) as u64,
            )? as usize,
            seed: flags.seed.or(e.seed).unwrap_or(DEFAULT_SEED),
            workers,
            out: flags
                .out
                .clone()
                .or_else(|| e.out.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            audit_samples: at_least_one(
                "execution.audit_samples",
                e.audit_samples.unwrap_or(DEFAULT_AUDIT_SAMPLES) as u64,
            )? as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"
[model]
dim = 1
initial_state = [0.0]
action_set = { kind = "interval_box", bounds = [[-1.0, 1.0]], quantization_count = [3] }
drift = { id = "satmr" }
diffusion = { id = "satmr" }
running_cost = { id = "satmr" }
terminal_cost = { id = "satmr" }
constants = { c1 = 2.0, c2 = 3.0, c3 = 2.0, c4 = 3.0 }
"#;

    fn err(text: &str) -> String {
        match parse(text) {
            Err(Failure::Config(m)) => m,
            other => panic!("expected a config failure, got {other:?}"),
        }
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = parse(MODEL).unwrap();
        let s = cfg.settings(&Overrides::default()).unwrap();
        assert_eq!(s.h, DEFAULT_H);
        assert_eq!(s.horizon, DEFAULT_HORIZON);
        assert_eq!(s.seed, DEFAULT_SEED);
        assert_eq!(s.out, PathBuf::from(DEFAULT_OUT));
        assert_eq!(s.workers, None);
    }

    #[test]
    fn flags_beat_file_values() {
        let text = format!("{MODEL}\n[execution]\nseed = 5\nworkers = 2\nout = \"a\"\n");
        let cfg = parse(&text).unwrap();
        let s = cfg.settings(&Overrides::default()).unwrap();
        assert_eq!((s.seed, s.workers, s.out.clone()), (5, Some(2), PathBuf::from("a")));
        let flags = Overrides {
            seed: Some(9),
            workers: Some(1),
            out: Some("b".into()),
        };
        let s = cfg.settings(&flags).unwrap();
        assert_eq!((s.seed, s.workers, s.out), (9, Some(1), PathBuf::from("b")));
    }

    #[test]
    fn missing_model_key_is_named() {
        let text = MODEL.replace("drift = { id = \"satmr\" }\n", "");
        assert!(err(&text).contains("drift"));
        assert!(err("[execution]\nseed = 1\n").contains("model"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MODEL}\n[discretization]\nstep = 0.1\n");
        assert!(err(&text).contains("step"));
    }

    #[test]
    fn ranges_are_checked() {
        for bad in ["h = 0.0", "h = -1.0", "horizon = -0.5", "cells = 0", "n = 0", "half_width = 0.0"] {
            let cfg = parse(&format!("{MODEL}\n[discretization]\n{bad}\n")).unwrap();
            assert!(
                matches!(cfg.settings(&Overrides::default()), Err(Failure::Config(_))),
                "{bad}"
            );
        }
        let cfg = parse(MODEL).unwrap();
        let flags = Overrides {
            workers: Some(0),
            ..Default::default()
        };
        assert!(cfg.settings(&flags).is_err());
    }
}
