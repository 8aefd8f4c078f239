use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// How the optimizer visits the tied parameter blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Newton step on every block at once, each block preconditioned by its own Hessian.
    #[default]
    JointBlockJacobi,
    /// One block per iteration, cycling through the blocks.
    CyclicSubspace,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::JointBlockJacobi => "joint-block-jacobi",
            Schedule::CyclicSubspace => "cyclic-subspace",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint-block-jacobi" => Ok(Schedule::JointBlockJacobi),
            "cyclic-subspace" => Ok(Schedule::CyclicSubspace),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Training hyperparameters. Every field has a default, so a config file only
/// needs the keys it changes; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub format_version: u32,
    /// Prior variance of the parameter; the regularizer weight is `1 / sigma_squared`.
    pub sigma_squared: f64,
    /// Hessian ridge, relative to the mean diagonal of the block.
    pub damping: f64,
    pub max_iterations: usize,
    /// Stop once the summed per-block improvement bounds fall below this.
    pub gradient_tolerance: f64,
    pub rank_budget: usize,
    /// Incomplete Cholesky stops when the largest residual drops below
    /// `residual_tol` times the largest initial diagonal.
    pub residual_tol: f64,
    pub window_radius: usize,
    pub degree: u32,
    pub offset: f64,
    pub center_labels: bool,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let kernel = KernelSpec::default();
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            sigma_squared: 1.0,
            damping: 1e-8,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            rank_budget: 200,
            residual_tol: 1e-6,
            window_radius: kernel.window_radius,
            degree: kernel.degree,
            offset: kernel.offset,
            center_labels: kernel.center_labels,
            schedule: Schedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            degree: self.degree,
            offset: self.offset,
            window_radius: self.window_radius,
            center_labels: self.center_labels,
        }
    }

    pub fn with_kernel(mut self, spec: &KernelSpec) -> Self {
        self.degree = spec.degree;
        self.offset = spec.offset;
        self.window_radius = spec.window_radius;
        self.center_labels = spec.center_labels;
        self
    }

    /// Regularizer weight `λ = 1 / σ²`.
    pub fn lambda(&self) -> f64 {
        1.0 / self.sigma_squared
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.sigma_squared > 0.0 && self.sigma_squared.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_squared must be positive, got {}",
                self.sigma_squared
            )));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!("damping must be >= 0, got {}", self.damping)));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "gradient_tolerance must be >= 0, got {}",
                self.gradient_tolerance
            )));
        }
        if self.rank_budget < 1 {
            return Err(Error::Config("rank_budget must be >= 1".into()));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::Config(format!(
                "residual_tol must be >= 0, got {}",
                self.residual_tol
            )));
        }
        self.kernel_spec().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_uses_defaults() {
        let c = TrainConfig::from_json(r#"{"sigma_squared": 4.0, "schedule": "cyclic-subspace"}"#)
            .unwrap();
        assert_eq!(c.sigma_squared, 4.0);
        assert_eq!(c.schedule, Schedule::CyclicSubspace);
        assert_eq!(c.rank_budget, TrainConfig::default().rank_budget);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_json(r#"{"sigma": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
    }

    #[test]
    fn invalid_values() {
        assert!(TrainConfig::from_json(r#"{"sigma_squared": 0.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"rank_budget": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"degree": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"format_version": 7}"#).is_err());
    }

    #[test]
    fn schedule_names() {
        for s in [Schedule::JointBlockJacobi, Schedule::CyclicSubspace] {
            assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        }
    }
}
