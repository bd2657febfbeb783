//! The single TOML file that drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{ProviderOptions, TraditionalAugConfig, MAX_RECONSTRUCTIONS};
use crate::error::{Error, Result};
use crate::evalkit::{FprMode, RobustnessSpec};
use crate::extractor::{BackboneSpec, ExtractorConfig, Normalization, TapLayers, TrainableMask, WeightsSource};
use crate::verifier::{GridSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSettings {
    pub caption: String,
    pub caption_options: ProviderOptions,
    pub reconstruction: String,
    pub reconstruction_options: ProviderOptions,
    pub backbone_weights: WeightsSource,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            caption: "hash-caption".into(),
            caption_options: ProviderOptions::new(),
            reconstruction: "seeded-noise".into(),
            reconstruction_options: ProviderOptions::new(),
            backbone_weights: WeightsSource::Random { seed: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSettings {
    /// Reconstructions per positive; drawn from {1, 2, 3} per image when unset.
    pub k: Option<usize>,
    /// Conventionally augmented copies per positive.
    pub traditional_variants: usize,
    pub traditional: TraditionalAugConfig,
    /// Continue past per-image provider failures.
    pub keep_going: bool,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            k: None,
            traditional_variants: 1,
            traditional: TraditionalAugConfig::default(),
            keep_going: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSettings {
    pub architecture: String,
    pub width_divisor: usize,
    pub input_size: usize,
    pub tap_layers: TapLayers,
    pub normalization: Normalization,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub trainable: Option<TrainableMask>,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        let bb = BackboneSpec::default();
        let ex = ExtractorConfig::default();
        Self {
            architecture: bb.architecture,
            width_divisor: bb.width_divisor,
            input_size: bb.input_size,
            tap_layers: bb.tap_layers,
            normalization: bb.normalization,
            embed_dim: ex.embed_dim,
            attention_hidden: ex.attention_hidden,
            trainable: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    pub fpr_target: f64,
    pub fpr_mode: FprMode,
    /// Run the perturbation battery after the clean evaluation.
    pub robustness_enabled: bool,
    pub robustness: RobustnessSpec,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            fpr_target: 1e-2,
            fpr_mode: FprMode::Conservative,
            robustness_enabled: false,
            robustness: RobustnessSpec::default(),
        }
    }
}

/// Relative paths are resolved against the config file's directory.
/// Component seeds (`train.seed`, `augment.traditional.seed`,
/// `evaluation.robustness.seed`) are derived from `seed` and ignored if set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub providers: ProviderSettings,
    #[serde(default)]
    pub augment: AugmentSettings,
    #[serde(default)]
    pub extractor: ExtractorSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub calibration: GridSpec,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
}

/// Stable per-purpose seed derived from the global one.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            Error::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_owned(),
            }
        })
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let WeightsSource::File { path } = &mut self.providers.backbone_weights {
            if path.is_relative() && std::env::var_os(crate::extractor::WEIGHTS_DIR_ENV).is_none() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", self.manifest.display())));
        }
        if let WeightsSource::File { path } = &self.providers.backbone_weights {
            let resolved = crate::extractor::resolve_weights_path(path);
            if !resolved.is_file() {
                return Err(Error::WeightsLoad {
                    path: resolved,
                    message: "backbone weights file not found".into(),
                });
            }
        }
        if let Some(k) = self.augment.k {
            if k == 0 || k > MAX_RECONSTRUCTIONS {
                return Err(Error::Config(format!("augment.k must be in 1..={MAX_RECONSTRUCTIONS}, got {k}")));
            }
        }
        self.augment.traditional.validate()?;
        self.train.validate()?;
        self.evaluation.robustness.validate()?;
        let f = self.evaluation.fpr_target;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("evaluation.fpr_target {f} must lie in (0, 1)")));
        }
        if self.calibration.size < 2 {
            return Err(Error::Config("calibration.size must be >= 2".into()));
        }
        if self.extractor.embed_dim == 0 || self.extractor.attention_hidden == 0 {
            return Err(Error::Config("extractor dimensions must be > 0".into()));
        }
        self.extractor_config().backbone.block_layout()?;
        Ok(())
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        let e = &self.extractor;
        ExtractorConfig {
            backbone: BackboneSpec {
                architecture: e.architecture.clone(),
                width_divisor: e.width_divisor,
                tap_layers: e.tap_layers.clone(),
                weights_source: self.providers.backbone_weights.clone(),
                input_size: e.input_size,
                normalization: e.normalization.clone(),
            },
            embed_dim: e.embed_dim,
            attention_hidden: e.attention_hidden,
            seed: derive_seed(self.seed, "extractor"),
            trainable: e.trainable.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn robustness_spec(&self) -> RobustnessSpec {
        RobustnessSpec {
            seed: derive_seed(self.seed, "robustness"),
            ..self.evaluation.robustness.clone()
        }
    }

    pub fn projection_seed(&self) -> u64 {
        derive_seed(self.seed, "projection")
    }

    pub fn augment_seed(&self) -> u64 {
        derive_seed(self.seed, "augment")
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\nmanifest = \"m.json\"\noutput_dir = \"out\"\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.providers.reconstruction, "seeded-noise");
        assert_eq!(cfg.evaluation.robustness.jpeg_quality, 50);
        assert_eq!(cfg.train_config().seed, derive_seed(3, "train"));
    }

    #[test]
    fn missing_seed_and_unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("manifest = \"m\"\noutput_dir = \"o\"\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = PipelineConfig::from_toml(
            "seed = 1\nmanifest = \"m\"\noutput_dir = \"o\"\n[train]\nepoch = 3\n",
            Path::new("c.toml"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err:?}");
    }

    #[test]
    fn load_checks_referenced_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.toml");
        std::fs::write(&cfg_path, "seed = 1\nmanifest = \"m.json\"\noutput_dir = \"out\"\n").unwrap();
        assert!(matches!(PipelineConfig::load(&cfg_path), Err(Error::Config(_))));
        std::fs::write(dir.path().join("m.json"), "{}").unwrap();
        let cfg = PipelineConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        std::fs::write(
            &cfg_path,
            "seed = 1\nmanifest = \"m.json\"\noutput_dir = \"out\"\n[providers.backbone_weights]\nkind = \"file\"\npath = \"absent.sfwb\"\n",
        )
        .unwrap();
        assert!(matches!(PipelineConfig::load(&cfg_path), Err(Error::WeightsLoad { .. })));
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "train"), derive_seed(1, "augment"));
        assert_eq!(derive_seed(1, "train"), derive_seed(1, "train"));
    }
}
