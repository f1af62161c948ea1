//! The single TOML configuration shared by every stage.
//!
//! Each section maps to one module's config struct; every field has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DistillConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pipeline::rowmlp::StageTwoTrainConfig;
use crate::pipeline::stage1::StageOneTrainConfig;
use crate::preprocess::PreprocessConfig;
use crate::radar::{CfarConfig, RadarConfig};
use crate::scene::{LidarConfig, SceneConfig, TrajectoryConfig};
use crate::supervision::KernelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Matching thresholds, meters.
    pub taus: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            taus: crate::metrics::DEFAULT_TAUS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
    pub lidar: LidarConfig,
    pub radar: RadarConfig,
    pub cfar: CfarConfig,
    pub preprocess: PreprocessConfig,
    pub kernel: KernelConfig,
    pub schedule: NoiseSchedule,
    pub stage1: StageOneTrainConfig,
    pub stage2: StageTwoTrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                Config::from_toml_str(&text)
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.trajectory.validate()?;
        self.lidar.fov.validate()?;
        self.radar.validate()?;
        self.preprocess.validate()?;
        self.kernel.validate()?;
        self.schedule.validate()?;
        if !(self.cfar.pfa > 0.0 && self.cfar.pfa < 1.0) {
            return Err(Error::config("cfar pfa must lie in (0, 1)"));
        }
        if self.eval.taus.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("evaluation thresholds must be positive"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = Config::default();
        let text = cfg.to_toml_string().unwrap();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn partial_sections_override() {
        let cfg = Config::from_toml_str("[trajectory]\nframe_count = 1\n[preprocess]\nq_final = 2.5\n").unwrap();
        assert_eq!(cfg.trajectory.frame_count, 1);
        assert_eq!(cfg.preprocess.q_final, 2.5);
        assert_eq!(cfg.preprocess.frames, 5);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[kernel]\nsize = 4\n").is_err());
        assert!(Config::from_toml_str("[schedule]\nsigma_min = 100.0\n").is_err());
        assert!(Config::from_toml_str("[scene\n").is_err());
        assert!(Config::from_toml_str("[eval]\ntaus = [0.0]\n").is_err());
    }
}
