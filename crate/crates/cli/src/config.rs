//! Declarative experiment configuration (TOML).
//!
//! ```toml
//! name = "desk"
//! scenarios = ["augmentation", "synthetic_only"]
//! seeds = [0, 1, 2]
//! real_size = 1000
//! synthetic_size = 2000
//! test_size = 500
//! generators = ["baseline", "1", "2", "3", "4"]
//!
//! [generator]
//! train_steps = 3000
//! ```
//!
//! Every table except the top level is optional and falls back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use nesyaug_core::detect::{DetectorNoise, PixelDetectorConfig};
use nesyaug_core::filter::FilterPolicy;
use nesyaug_core::manifest::GeneratorId;
use nesyaug_core::world::WorldSpec;
use nesyaug_models::diffusion::GeneratorConfig;
use nesyaug_models::sgg::{ScoreMode, SggHyper};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Real training data plus one generator's synthetic data.
    Augmentation,
    /// One generator's synthetic data alone.
    SyntheticOnly,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Augmentation => "augmentation",
            Scenario::SyntheticOnly => "synthetic_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Connected colour components matched against shape silhouettes.
    Pixel,
    /// The requested layout with configurable noise; ignores the pixels.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub kind: DetectorKind,
    pub threshold: f64,
    pub pixel: PixelDetectorConfig,
    pub noise: DetectorNoise,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Pixel,
            threshold: nesyaug_core::extract::DEFAULT_THRESHOLD,
            pixel: PixelDetectorConfig::default(),
            noise: DetectorNoise::PURE,
        }
    }
}

/// Generator architecture plus training and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSettings {
    #[serde(flatten)]
    pub model: GeneratorConfig,
    pub train_steps: usize,
    pub sample_steps: usize,
    pub guidance: f64,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            model: GeneratorConfig::default(),
            train_steps: 3000,
            sample_steps: 50,
            guidance: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SggSettings {
    #[serde(flatten)]
    pub hyper: SggHyper,
    pub score_mode: ScoreMode,
}

impl Default for SggSettings {
    fn default() -> Self {
        Self {
            hyper: SggHyper::default(),
            score_mode: ScoreMode::Tde,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenarios: Vec<Scenario>,
    pub seeds: Vec<u64>,
    pub real_size: usize,
    pub synthetic_size: usize,
    /// Per-generator overrides; must all equal `synthetic_size`.
    #[serde(default)]
    pub synthetic_sizes: BTreeMap<String, usize>,
    pub test_size: usize,
    pub generators: Vec<String>,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub filter: FilterPolicy,
    #[serde(default)]
    pub generator: GeneratorSettings,
    #[serde(default)]
    pub sgg: SggSettings,
    #[serde(default)]
    pub detector: DetectorSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        let cfg: Self = toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn generator_ids(&self) -> Result<Vec<GeneratorId>, Failure> {
        self.generators
            .iter()
            .map(|g| g.parse().map_err(Failure::Config))
            .collect()
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let err = |m: String| Err(Failure::Config(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return err(format!("name {:?} must be non-empty [A-Za-z0-9_-]", self.name));
        }
        if self.scenarios.is_empty() {
            return err("at least one scenario is required".into());
        }
        if self.seeds.is_empty() {
            return err("seeds must be listed explicitly".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return err("seeds must be distinct".into());
        }
        if self.real_size == 0 || self.synthetic_size == 0 || self.test_size == 0 {
            return err("dataset sizes must be positive".into());
        }
        let ids = self.generator_ids()?;
        if ids.is_empty() {
            return err("at least one generator is required".into());
        }
        let mut unique = ids.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != ids.len() {
            return err("generators must be distinct".into());
        }
        for (g, &n) in &self.synthetic_sizes {
            let id: GeneratorId = g.parse().map_err(Failure::Config)?;
            if !ids.contains(&id) {
                return err(format!("synthetic size given for unused generator {g}"));
            }
            if n != self.synthetic_size {
                return err(format!(
                    "synthetic size must be equal across generators: {g} has {n}, expected {}",
                    self.synthetic_size
                ));
            }
        }
        self.world.validate().map_err(Failure::Config)?;
        self.filter.validate().map_err(Failure::Config)?;
        let g = &self.generator;
        if g.model.image_size != self.world.image_size as usize {
            return err(format!(
                "generator draws {0}x{0} images but the world renders {1}x{1}",
                g.model.image_size, self.world.image_size
            ));
        }
        if g.train_steps == 0 {
            return err("generator.train_steps must be positive".into());
        }
        if g.sample_steps == 0 || g.sample_steps > g.model.t_max {
            return err(format!("generator.sample_steps must be in 1..={}", g.model.t_max));
        }
        if !(g.guidance >= 0.0 && g.guidance.is_finite()) {
            return err("generator.guidance must be a finite value >= 0".into());
        }
        let s = &self.sgg.hyper;
        if s.epochs == 0 || s.batch == 0 || s.hidden == 0 || s.class_dim == 0 || !(s.lr > 0.0) {
            return err("sgg hyperparameters must be positive".into());
        }
        let d = &self.detector;
        if !(0.0..=1.0).contains(&d.threshold) {
            return err("detector.threshold must be in [0, 1]".into());
        }
        if !(d.noise.sigma >= 0.0) || !(0.0..=1.0).contains(&d.noise.p_confusion) || !(0.0..=1.0).contains(&d.noise.min_score) {
            return err("detector noise out of range".into());
        }
        Ok(())
    }
}
