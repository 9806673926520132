//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytic::GridSpec;
use crate::capacity::CapacitySettings;
use crate::channel::ChannelConfig;
use crate::envs::{Dynamics, Environment};
use crate::error::{Error, Result};
use crate::policy::GceLoopConfig;
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub environment: Environment,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub capacity: CapacitySettings,
    #[serde(default)]
    pub policy: GceLoopConfig,
    /// Landscape grid; the environment's default grid when absent.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Default output directory; `--out` overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(environment: Environment) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            environment,
            channel: ChannelConfig::default(),
            capacity: CapacitySettings::default(),
            policy: GceLoopConfig::default(),
            grid: None,
            output_dir: None,
            seed: 0,
        }
    }

    /// Parses and validates a config document. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => Error::Config(format!("{name}: {other}")),
            })
        };
        section("environment", self.environment.validate())?;
        section("channel", self.channel.validate())?;
        section("capacity", self.capacity.validate())?;
        section("policy", self.policy.validate(&self.environment))?;
        section("grid", self.grid_spec().validate(self.environment.state_dim()))
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_else(|| GridSpec::default_for(&self.environment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Pendulum;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::new(Environment::Pendulum(Pendulum::default()));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "environment": {"name": "ball_in_box"}}"#).unwrap();
        assert_eq!(cfg.channel, ChannelConfig::default());
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = r#"{"schema_version": 1, "environment": {"name": "pendulum"}"#;
        assert!(RunConfig::from_json(&format!("{base}, \"colour\": 1}}")).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "environment": {"name": "pendulum", "mass": 2}}"#).is_err());
        let err = RunConfig::from_json(&format!("{base}, \"policy\": {{\"gamma\": 1.5}}}}")).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        assert!(RunConfig::from_json(r#"{"schema_version": 2, "environment": {"name": "pendulum"}}"#).is_err());
    }
}
