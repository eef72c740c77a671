//! Run configuration: TOML file, environment and command-line overrides.
//!
//! Precedence, highest first: `--set section.key=value` overrides,
//! `ROADCAL_SECTION__KEY=value` environment variables, the config file,
//! built-in defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::geometry::AnchorMode;
use crate::grouping::GroupingParams;
use crate::hypothesis::PrefilterParams;
use crate::pnp::RansacParams;
use crate::refinement::{RegistrationSettings, VehicleDims};
use crate::tracking::TrackerParams;

pub const ENV_PREFIX: &str = "ROADCAL_";

/// Offset from the localization antenna to the vehicle reference point
/// (geometric center at ground level), in the vehicle body frame: `x`
/// forward, `y` left, `z` up. Meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeverArm {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl LeverArm {
    pub fn is_zero(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.z == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Detections carry stable track ids; skip the tracker.
    pub pretracked: bool,
    pub anchor: AnchorMode,
    pub tracker: TrackerParams,
    pub ransac: RansacParams,
    pub prefilter: PrefilterParams,
    pub grouping: GroupingParams,
    pub registration: RegistrationSettings,
    pub vehicle: VehicleDims,
    pub lever_arm: LeverArm,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads `path` (or defaults), then applies environment and explicit
    /// overrides, and validates the result.
    pub fn load(
        path: Option<&std::path::Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self, PipelineError> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        let mut env_overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        env_overrides.sort();
        for (key, value) in env_overrides {
            cfg = cfg.with_override(&key, &value)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
            cfg = cfg.with_override(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets a dotted key, e.g. `ransac.inlier_threshold_px`, to a value given
    /// in TOML syntax (bare words are taken as strings).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, PipelineError> {
        let mut root = toml::Table::try_from(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields one part");
        let mut table = &mut root;
        for s in sections {
            table = table
                .entry(s.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| PipelineError::Config(format!("`{s}` in `{key}` is not a section")))?;
        }
        table.insert(last.to_string(), parsed);
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(format!("override `{key}`: {e}")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::Config(m);
        self.ransac.validate().map_err(cfg)?;
        self.prefilter.validate().map_err(cfg)?;
        self.grouping.validate().map_err(cfg)?;
        self.vehicle
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.tracker.min_track_detections < 1 {
            return Err(cfg("tracker.min_track_detections must be at least 1".into()));
        }
        if self.registration.max_iterations < 1 {
            return Err(cfg("registration.max_iterations must be at least 1".into()));
        }
        if let AnchorMode::Fixed(a) = self.anchor {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(cfg("anchor offset must be finite".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
