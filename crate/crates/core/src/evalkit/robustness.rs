//! Perturbation battery: re-verify every test image after each transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{roc_auc, tpr_at_fpr_with, FprMode, ScoreSet};
use crate::datamodel::{ImageTensor, Label, VerifierParams};
use crate::error::{Error, Result};
use crate::extractor::ExtractorParams;
use crate::transforms;
use crate::verifier::fingerprint_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSpec {
    pub rotation_degrees: f64,
    pub jpeg_quality: u8,
    pub gaussian_blur_kernel: usize,
    pub gaussian_blur_sigma: f64,
    /// Each image gets a hue shift drawn uniformly from `[-h, h]`.
    pub color_jitter_hue: f64,
    pub contrast_factor: f64,
    pub finetune_second_stage: bool,
    pub prompt_attack: bool,
    pub seed: u64,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self {
            rotation_degrees: 15.0,
            jpeg_quality: 50,
            gaussian_blur_kernel: 3,
            gaussian_blur_sigma: 1.0,
            color_jitter_hue: 0.2,
            contrast_factor: 2.0,
            finetune_second_stage: true,
            prompt_attack: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Identity,
    Rotation { degrees: f64 },
    Jpeg { quality: u8 },
    GaussianBlur { kernel: usize, sigma: f64 },
    ColorJitter { hue: f64 },
    Contrast { factor: f64 },
    FinetuneSecondStage,
    PromptAttack,
}

impl Perturbation {
    pub fn name(&self) -> String {
        match self {
            Perturbation::Identity => "clean".into(),
            Perturbation::Rotation { degrees } => format!("rotation {degrees}deg"),
            Perturbation::Jpeg { quality } => format!("jpeg q{quality}"),
            Perturbation::GaussianBlur { kernel, sigma } => format!("blur {kernel}x{kernel} s{sigma}"),
            Perturbation::ColorJitter { hue } => format!("hue jitter {hue}"),
            Perturbation::Contrast { factor } => format!("contrast x{factor}"),
            Perturbation::FinetuneSecondStage => "second-stage finetune".into(),
            Perturbation::PromptAttack => "prompt attack".into(),
        }
    }

    /// Needs a generative provider; the battery cannot run it locally.
    pub fn needs_provider(&self) -> bool {
        matches!(self, Perturbation::FinetuneSecondStage | Perturbation::PromptAttack)
    }

    /// `index` keys the per-image randomness of stochastic transforms.
    pub fn apply(&self, image: &ImageTensor, seed: u64, index: usize) -> Result<ImageTensor> {
        match *self {
            Perturbation::Identity => Ok(image.clone()),
            Perturbation::Rotation { degrees } => Ok(transforms::rotate(image, degrees)),
            Perturbation::Jpeg { quality } => transforms::jpeg_round_trip(image, quality),
            Perturbation::GaussianBlur { kernel, sigma } => transforms::gaussian_blur(image, kernel, sigma),
            Perturbation::ColorJitter { hue } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let shift = if hue > 0.0 { rng.random_range(-hue..=hue) } else { 0.0 };
                Ok(transforms::hue_shift(image, shift as f32))
            }
            Perturbation::Contrast { factor } => Ok(transforms::adjust_contrast(image, factor as f32)),
            Perturbation::FinetuneSecondStage | Perturbation::PromptAttack => Err(Error::Provider {
                provider: self.name(),
                message: "provider unavailable".into(),
            }),
        }
    }
}

impl RobustnessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config("jpeg_quality must be in 1..=100".into()));
        }
        if self.gaussian_blur_kernel % 2 == 0 || !(self.gaussian_blur_sigma > 0.0) {
            return Err(Error::Config("blur kernel must be odd and sigma > 0".into()));
        }
        let finite = [self.rotation_degrees, self.color_jitter_hue, self.contrast_factor];
        if finite.iter().any(|v| !v.is_finite()) || self.color_jitter_hue < 0.0 || self.contrast_factor < 0.0 {
            return Err(Error::Config("robustness parameters must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The battery in report order, starting with the clean row.
    pub fn perturbations(&self) -> Vec<Perturbation> {
        let mut list = vec![
            Perturbation::Identity,
            Perturbation::Rotation { degrees: self.rotation_degrees },
            Perturbation::Jpeg { quality: self.jpeg_quality },
            Perturbation::GaussianBlur {
                kernel: self.gaussian_blur_kernel,
                sigma: self.gaussian_blur_sigma,
            },
            Perturbation::ColorJitter { hue: self.color_jitter_hue },
            Perturbation::Contrast { factor: self.contrast_factor },
        ];
        if self.finetune_second_stage {
            list.push(Perturbation::FinetuneSecondStage);
        }
        if self.prompt_attack {
            list.push(Perturbation::PromptAttack);
        }
        list
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: ImageTensor,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingResult {
    pub setting: String,
    pub auc: Option<f64>,
    pub tpr_at_fpr: Option<f64>,
    pub n_positive: usize,
    pub n_negative: usize,
    /// `"ok"` or `"skipped: <reason>"`.
    pub status: String,
}

impl SettingResult {
    pub fn from_scores(setting: impl Into<String>, scores: &ScoreSet, fpr_target: f64, mode: FprMode) -> Result<Self> {
        Ok(Self {
            setting: setting.into(),
            auc: Some(roc_auc(scores)?),
            tpr_at_fpr: Some(tpr_at_fpr_with(scores, fpr_target, mode)?),
            n_positive: scores.positive_scores.len(),
            n_negative: scores.negative_scores.len(),
            status: "ok".into(),
        })
    }

    pub fn skipped(setting: impl Into<String>, reason: &str) -> Self {
        Self {
            setting: setting.into(),
            auc: None,
            tpr_at_fpr: None,
            n_positive: 0,
            n_negative: 0,
            status: format!("skipped: {reason}"),
        }
    }
}

/// Scores (negated distances) of labeled images after `perturbation`.
pub fn score_images(
    images: &[LabeledImage],
    perturbation: Perturbation,
    seed: u64,
    extractor: &ExtractorParams,
    verifier: &VerifierParams,
) -> Result<ScoreSet> {
    let distances: Vec<(Label, f64)> = images
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let img = perturbation.apply(&item.image, seed, i)?;
            let fp = extractor.extract_fingerprint(&item.id, &img)?;
            Ok((item.label, fingerprint_distance(&fp, verifier)?))
        })
        .collect::<Result<_>>()?;
    let pick = |l: Label| -> Vec<f64> { distances.iter().filter(|(x, _)| *x == l).map(|(_, d)| *d).collect() };
    ScoreSet::from_distances(&pick(Label::Positive), &pick(Label::Negative))
}

/// One result per perturbation, in the order of [`RobustnessSpec::perturbations`].
pub fn robustness_battery(
    images: &[LabeledImage],
    spec: &RobustnessSpec,
    extractor: &ExtractorParams,
    verifier: &VerifierParams,
    fpr_target: f64,
    mode: FprMode,
) -> Result<Vec<(Perturbation, Option<ScoreSet>, SettingResult)>> {
    spec.validate()?;
    if verifier.radius.is_none() {
        return Err(Error::Uncalibrated);
    }
    spec.perturbations()
        .into_iter()
        .map(|p| {
            if p.needs_provider() {
                return Ok((p, None, SettingResult::skipped(p.name(), "provider unavailable")));
            }
            let scores = score_images(images, p, spec.seed, extractor, verifier)?;
            let row = SettingResult::from_scores(p.name(), &scores, fpr_target, mode)?;
            Ok((p, Some(scores), row))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_battery_order_and_flags() {
        let spec = RobustnessSpec::default();
        let names: Vec<String> = spec.perturbations().iter().map(|p| p.name()).collect();
        assert_eq!(names[0], "clean");
        assert_eq!(names.len(), 8);
        let spec = RobustnessSpec {
            finetune_second_stage: false,
            prompt_attack: false,
            ..spec
        };
        assert_eq!(spec.perturbations().len(), 6);
    }

    #[test]
    fn identity_is_a_no_op_and_jitter_is_seeded() {
        let img = ImageTensor::from_fn(8, 8, |y, x| [((y * 8 + x) % 7) as f32 / 7.0, 0.3, 0.8]).unwrap();
        assert_eq!(Perturbation::Identity.apply(&img, 1, 0).unwrap(), img);
        let j = Perturbation::ColorJitter { hue: 0.2 };
        assert_eq!(j.apply(&img, 1, 3).unwrap(), j.apply(&img, 1, 3).unwrap());
        assert!(Perturbation::PromptAttack.apply(&img, 1, 0).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(RobustnessSpec { jpeg_quality: 0, ..Default::default() }.validate().is_err());
        assert!(RobustnessSpec { gaussian_blur_kernel: 4, ..Default::default() }.validate().is_err());
    }
}
