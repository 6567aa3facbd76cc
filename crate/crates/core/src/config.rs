//! Run configuration: one TOML document covering scenes, queries, model,
//! training and evaluation. Every field has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::raydn::RaySpec;
use crate::scenes::{RigSpec, SceneSpec};
use crate::toynet::{DecoderConfig, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of scene files.
    pub scenes: PathBuf,
    /// Training output directory (model file and loss log).
    pub run: PathBuf,
    /// Evaluation output directory.
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { scenes: "scenes".into(), run: "run".into(), report: "report".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Token grid per camera.
    pub grid_w: usize,
    pub grid_h: usize,
    /// Detections scoring below this are dropped at inference.
    pub score_floor: f64,
    pub rays: RaySpec,
    pub rig: RigSpec,
    pub scene: SceneSpec,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            grid_w: 16,
            grid_h: 12,
            score_floor: 0.05,
            rays: RaySpec::default(),
            rig: RigSpec::default(),
            scene: SceneSpec::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Compat(format!(
                "config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::domain("token grid dimensions must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::domain(format!("score_floor {} outside [0, 1]", self.score_floor)));
        }
        if self.decoder.n_classes != self.scene.class_count {
            return Err(Error::domain(format!(
                "decoder n_classes {} differs from scene class_count {}",
                self.decoder.n_classes, self.scene.class_count
            )));
        }
        self.rays.validate()?;
        self.rig.validate()?;
        self.scene.range.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
