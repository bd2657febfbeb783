//! Semantic self-reconstruction and conventional augmentation.
//!
//! Captioning and style-conditioned reconstruction are pluggable providers.
//! The built-in providers are deterministic stand-ins so the whole pipeline
//! runs offline; real generative models plug in through [`ProviderRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageTensor;
use crate::error::{Error, Result};
use crate::transforms;

/// Hard cap on reconstructions per source image.
pub const MAX_RECONSTRUCTIONS: usize = 8;

pub trait CaptionProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Describes the semantic content of `image`. Must be deterministic and
    /// non-empty.
    fn describe(&self, image: &ImageTensor) -> Result<String>;
}

pub trait ReconstructionProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Renders `caption` in the style of `style_ref`.
    fn reconstruct(&self, style_ref: &ImageTensor, caption: &str, seed: u64) -> Result<ImageTensor>;
}

/// Caption derived from the image content hash, e.g. `"synthetic scene 0x3fa2"`.
#[derive(Debug, Clone, Default)]
pub struct HashCaptioner;

impl CaptionProvider for HashCaptioner {
    fn name(&self) -> &str {
        "hash-caption"
    }

    fn describe(&self, image: &ImageTensor) -> Result<String> {
        let h = image.content_hash();
        Ok(format!("synthetic scene 0x{:02x}{:02x}", h[0], h[1]))
    }
}

/// Returns the style reference unchanged.
#[derive(Debug, Clone, Default)]
pub struct IdentityReconstructor;

impl ReconstructionProvider for IdentityReconstructor {
    fn name(&self) -> &str {
        "identity"
    }

    fn reconstruct(&self, style_ref: &ImageTensor, _caption: &str, _seed: u64) -> Result<ImageTensor> {
        Ok(style_ref.clone())
    }
}

/// Adds seeded Gaussian noise to the style reference, then clamps.
#[derive(Debug, Clone)]
pub struct NoiseReconstructor {
    pub sigma: f64,
}

impl Default for NoiseReconstructor {
    fn default() -> Self {
        Self { sigma: 0.03 }
    }
}

impl ReconstructionProvider for NoiseReconstructor {
    fn name(&self) -> &str {
        "seeded-noise"
    }

    fn reconstruct(&self, style_ref: &ImageTensor, _caption: &str, seed: u64) -> Result<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(transforms::gaussian_noise(style_ref, self.sigma, &mut rng))
    }
}

/// Provider-specific options from the pipeline configuration.
pub type ProviderOptions = toml::Table;

type CaptionFactory = Box<dyn Fn(&ProviderOptions) -> Result<Arc<dyn CaptionProvider>> + Send + Sync>;
type ReconFactory =
    Box<dyn Fn(&ProviderOptions) -> Result<Arc<dyn ReconstructionProvider>> + Send + Sync>;

/// Name-keyed provider constructors.
pub struct ProviderRegistry {
    captioners: BTreeMap<String, CaptionFactory>,
    reconstructors: BTreeMap<String, ReconFactory>,
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderRegistry")
            .field("captioners", &self.captioners.keys().collect::<Vec<_>>())
            .field("reconstructors", &self.reconstructors.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        Self {
            captioners: BTreeMap::new(),
            reconstructors: BTreeMap::new(),
        }
    }

    /// Registry holding the offline stubs: `hash-caption`, `identity`, `seeded-noise`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register_captioner("hash-caption", |_| Ok(Arc::new(HashCaptioner)));
        reg.register_reconstructor("identity", |_| Ok(Arc::new(IdentityReconstructor)));
        reg.register_reconstructor("seeded-noise", |opts| {
            let sigma = match opts.get("sigma") {
                None => NoiseReconstructor::default().sigma,
                Some(v) => v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .filter(|s| s.is_finite() && *s >= 0.0)
                    .ok_or_else(|| Error::Config("seeded-noise: sigma must be a number >= 0".into()))?,
            };
            Ok(Arc::new(NoiseReconstructor { sigma }))
        });
        reg
    }

    pub fn register_captioner(
        &mut self,
        name: &str,
        factory: impl Fn(&ProviderOptions) -> Result<Arc<dyn CaptionProvider>> + Send + Sync + 'static,
    ) {
        self.captioners.insert(name.to_owned(), Box::new(factory));
    }

    pub fn register_reconstructor(
        &mut self,
        name: &str,
        factory: impl Fn(&ProviderOptions) -> Result<Arc<dyn ReconstructionProvider>>
            + Send
            + Sync
            + 'static,
    ) {
        self.reconstructors.insert(name.to_owned(), Box::new(factory));
    }

    pub fn captioner(&self, name: &str, options: &ProviderOptions) -> Result<Arc<dyn CaptionProvider>> {
        let factory = self.captioners.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown caption provider `{name}` (known: {:?})",
                self.captioners.keys().collect::<Vec<_>>()
            ))
        })?;
        factory(options)
    }

    pub fn reconstructor(
        &self,
        name: &str,
        options: &ProviderOptions,
    ) -> Result<Arc<dyn ReconstructionProvider>> {
        let factory = self.reconstructors.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown reconstruction provider `{name}` (known: {:?})",
                self.reconstructors.keys().collect::<Vec<_>>()
            ))
        })?;
        factory(options)
    }
}

/// Extracts the intrinsic-semantics caption. Empty captions are provider errors.
pub fn caption(image: &ImageTensor, provider: &dyn CaptionProvider) -> Result<String> {
    let text = provider.describe(image)?;
    if text.trim().is_empty() {
        return Err(Error::Provider {
            provider: provider.name().to_owned(),
            message: "returned an empty caption".into(),
        });
    }
    Ok(text)
}

/// Provenance of one self-reconstructed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub parent_id: String,
    pub index: usize,
    pub caption: String,
    pub seed: u64,
    pub caption_provider: String,
    pub reconstruction_provider: String,
}

/// Produces `k` reinterpretations of `image` from its own caption, using the
/// image itself as style reference. Output `i` uses seed `base_seed + i`.
pub fn self_reconstruct(
    image_id: &str,
    image: &ImageTensor,
    captioner: &dyn CaptionProvider,
    reconstructor: &dyn ReconstructionProvider,
    k: usize,
    base_seed: u64,
) -> Result<Vec<(ImageTensor, AugmentationRecord)>> {
    if k == 0 || k > MAX_RECONSTRUCTIONS {
        return Err(Error::Precondition(format!(
            "reconstruction count must be in 1..={MAX_RECONSTRUCTIONS}, got {k}"
        )));
    }
    let text = caption(image, captioner)?;
    let mut out = Vec::with_capacity(k);
    for index in 0..k {
        let seed = base_seed.wrapping_add(index as u64);
        let recon = reconstructor
            .reconstruct(image, &text, seed)
            .map_err(|e| Error::Reconstruction {
                index,
                source: Box::new(e),
            })?;
        // Re-validate: providers are external code.
        let recon = ImageTensor::new(recon.height(), recon.width(), recon.into_pixels()).map_err(
            |e| Error::Reconstruction {
                index,
                source: Box::new(e),
            },
        )?;
        out.push((
            recon,
            AugmentationRecord {
                parent_id: image_id.to_owned(),
                index,
                caption: text.clone(),
                seed,
                caption_provider: captioner.name().to_owned(),
                reconstruction_provider: reconstructor.name().to_owned(),
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraditionalAugConfig {
    pub flip_prob: f64,
    pub jpeg_quality: u8,
    pub gaussian_noise_sigma: f64,
    pub color_jitter_hue: f64,
    pub seed: u64,
}

impl Default for TraditionalAugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jpeg_quality: 75,
            gaussian_noise_sigma: 0.02,
            color_jitter_hue: 0.02,
            seed: 0,
        }
    }
}

impl TraditionalAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} not in [0, 1]", self.flip_prob)));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config(format!(
                "jpeg_quality {} not in [1, 100]",
                self.jpeg_quality
            )));
        }
        if !(self.gaussian_noise_sigma >= 0.0 && self.gaussian_noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "gaussian_noise_sigma {} must be finite and >= 0",
                self.gaussian_noise_sigma
            )));
        }
        if !(0.0..=0.5).contains(&self.color_jitter_hue) {
            return Err(Error::Config(format!(
                "color_jitter_hue {} not in [0, 0.5]",
                self.color_jitter_hue
            )));
        }
        Ok(())
    }
}

/// Applies flip, hue jitter, additive noise, then a JPEG round-trip, each
/// drawn from a generator seeded by `config.seed`.
pub fn traditional_augment(image: &ImageTensor, config: &TraditionalAugConfig) -> Result<ImageTensor> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = if rng.random::<f64>() < config.flip_prob {
        image.flip_horizontal()
    } else {
        image.clone()
    };
    if config.color_jitter_hue > 0.0 {
        let h = config.color_jitter_hue;
        let shift = rng.random_range(-h..=h);
        out = transforms::hue_shift(&out, shift as f32);
    }
    out = transforms::gaussian_noise(&out, config.gaussian_noise_sigma, &mut rng);
    transforms::jpeg_round_trip(&out, config.jpeg_quality)
}
