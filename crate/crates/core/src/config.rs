//! Pipeline configuration file (TOML, one section per stage) and its hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amplifier::AmplifierConfig;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_RATES, DEFAULT_SIGMAS};
use crate::flow::FlowEstimatorSpec;
use crate::model::{ModelConfig, PipelineMode};
use crate::refine::Ablation;
use crate::sensing::{check_shift, MaskSet};
use crate::separator::DOWNSAMPLE;
use crate::solvers::GapTvConfig;
use crate::train::TrainConfig;

pub const DATA_ROOT_ENV: &str = "DVSCI_DATA_ROOT";
pub const HASH_HEX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub mode: PipelineMode,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Dual,
            seed: 0,
            data_root: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySection {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            frames: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSection {
    pub density: f64,
    pub shift: (isize, isize),
    pub seed: u64,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            density: 0.5,
            shift: (0, 10),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplifierSection {
    /// Defaults to on for dual mode and off for single-view mode.
    pub enabled: Option<bool>,
    #[serde(flatten)]
    pub params: AmplifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub width_scale: f64,
    pub joint_separator: bool,
    pub ablation: Ablation,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            width_scale: 0.25,
            joint_separator: false,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub sigmas: Vec<f64>,
    pub rates: Vec<usize>,
    pub repetitions: usize,
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sigmas: DEFAULT_SIGMAS.to_vec(),
            rates: DEFAULT_RATES.to_vec(),
            repetitions: 3,
            samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub geometry: GeometrySection,
    pub masks: MaskSection,
    pub amplifier: AmplifierSection,
    pub network: NetworkSection,
    pub flow: FlowEstimatorSpec,
    pub solver: GapTvConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = self.to_toml_string().expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(digest)[..HASH_HEX_LEN].to_string()
    }

    pub fn amplifier_enabled(&self) -> bool {
        self.amplifier.enabled.unwrap_or(self.pipeline.mode == PipelineMode::Dual)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.rows == 0 || g.cols == 0 || g.frames == 0 {
            return Err(Error::Config(format!(
                "geometry must be positive, got {}x{}x{}",
                g.rows, g.cols, g.frames
            )));
        }
        if g.rows % DOWNSAMPLE != 0 || g.cols % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "geometry {}x{} must be divisible by {DOWNSAMPLE}",
                g.rows, g.cols
            )));
        }
        if !(self.masks.density > 0.0 && self.masks.density <= 1.0) {
            return Err(Error::Config(format!("mask density {} outside (0,1]", self.masks.density)));
        }
        check_shift(self.masks.shift).map_err(|e| Error::Config(e.to_string()))?;
        match (self.pipeline.mode, self.amplifier_enabled()) {
            (PipelineMode::SingleView, true) => {
                return Err(Error::Config("single-view mode has no amplifier; set amplifier.enabled = false".into()))
            }
            (PipelineMode::Dual, false) => {
                return Err(Error::Config("dual mode requires the amplifier".into()));
            }
            _ => {}
        }
        if !(self.network.width_scale > 0.0 && self.network.width_scale.is_finite()) {
            return Err(Error::Config(format!("width scale {} must be positive", self.network.width_scale)));
        }
        self.model_config().validate().map_err(as_config)?;
        self.solver.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        if self.eval.sigmas.is_empty() || self.eval.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("eval.sigmas must be a nonempty list of finite values >= 0".into()));
        }
        if self.eval.rates.is_empty() || self.eval.rates.contains(&0) {
            return Err(Error::Config("eval.rates must be a nonempty list of positive frame counts".into()));
        }
        if self.eval.repetitions == 0 || self.eval.samples == 0 {
            return Err(Error::Config("eval.repetitions and eval.samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.pipeline.mode,
            frames: self.geometry.frames,
            width_scale: self.network.width_scale,
            joint_separator: self.network.joint_separator,
            amplifier: self.amplifier.params,
            flow: self.flow.clone(),
            ablation: self.network.ablation,
        }
    }

    pub fn mask_set(&self) -> Result<MaskSet> {
        self.mask_set_for(self.geometry.frames)
    }

    pub fn mask_set_for(&self, frames: usize) -> Result<MaskSet> {
        MaskSet::generate(
            self.geometry.rows,
            self.geometry.cols,
            frames,
            self.masks.density,
            self.masks.shift,
            self.masks.seed,
        )
    }

    /// Config value, then `DVSCI_DATA_ROOT`, then `./data`.
    pub fn data_root(&self) -> PathBuf {
        if let Some(p) = &self.pipeline.data_root {
            return p.clone();
        }
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string().unwrap();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), HASH_HEX_LEN);
    }

    #[test]
    fn partial_sections() {
        let c = PipelineConfig::from_toml_str("[geometry]\nrows = 32\n[solver]\nlambda = 0.1\n").unwrap();
        assert_eq!(c.geometry.rows, 32);
        assert_eq!(c.geometry.cols, 64);
        assert_eq!(c.solver.iterations, 100);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn rejects_inconsistent() {
        let bad = |s: &str| PipelineConfig::from_toml_str(s).and_then(|c| c.validate()).unwrap_err();
        assert!(matches!(bad("[geometry]\nrows = 33\n"), Error::Config(_)));
        assert!(matches!(bad("[masks]\nshift = [1, 0]\n"), Error::Config(_)));
        assert!(matches!(bad("[pipeline]\nmode = \"single-view\"\n[amplifier]\nenabled = true\n"), Error::Config(_)));
        assert!(matches!(bad("[network.ablation]\nno_refine = true\nno_flow = true\n"), Error::Config(_)));
        assert!(matches!(bad("[geometry]\nrows = \"x\"\n"), Error::Config(_)));
        let single = PipelineConfig::from_toml_str("[pipeline]\nmode = \"single-view\"\n").unwrap();
        single.validate().unwrap();
        assert!(!single.amplifier_enabled());
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            PipelineConfig::load(Path::new("/nonexistent/dvsci.toml")),
            Err(Error::MissingFile(_))
        ));
    }
}
