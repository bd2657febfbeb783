//! The augment → train → calibrate → verify / evaluate commands.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{log_event, Checkpoint, CHECKPOINT_VERSION};
use super::config::{derive_seed, PipelineConfig};
use super::ingest::{absolutize, entry_path, list_images, load_entries, load_image, save_png};
use crate::augment::{self_reconstruct, traditional_augment, ProviderRegistry, TraditionalAugConfig};
use crate::datamodel::{
    validate_manifest, DatasetManifest, ImageTensor, Label, ManifestEntry, Origin, Split, Verdict,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    emit_report, robustness_battery, score_images, EvaluationReport, LabeledImage, Perturbation, ScoreSet,
    SettingResult,
};
use crate::extractor::ExtractorParams;
use crate::verifier::{
    calibrate_radius, fingerprint_distance, train, CalibrationResult, EpochStats, OnlineExtractor, TrainOutcome,
};
use crate::VerifierParams;

pub const AUGMENTED_MANIFEST: &str = "manifest.augmented.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RUN_LOG: &str = "run.log";
pub const REPORT_STEM: &str = "report";

/// Per-artist output locations under the configured output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(config: &PipelineConfig, artist_id: &str) -> Result<Self> {
        let ok = !artist_id.is_empty()
            && artist_id != "."
            && artist_id != ".."
            && artist_id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
        if !ok {
            return Err(Error::Config(format!(
                "artist id `{artist_id}` cannot name an output directory (use letters, digits, `.`, `_`, `-`)"
            )));
        }
        Ok(Self {
            dir: config.output_dir.join(artist_id),
        })
    }

    pub fn augmented_manifest(&self) -> PathBuf {
        self.dir.join(AUGMENTED_MANIFEST)
    }

    pub fn augmented_images(&self) -> PathBuf {
        self.dir.join("augmented")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(RUN_LOG)
    }
}

fn checked_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(path)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Config(format!("{}: {}", path.display(), list.join("; "))));
    }
    Ok(manifest)
}

/// The configured manifest and its workspace.
pub fn source_manifest(config: &PipelineConfig) -> Result<(DatasetManifest, Workspace)> {
    let manifest = checked_manifest(&config.manifest)?;
    let ws = Workspace::new(config, &manifest.target_artist_id)?;
    Ok((manifest, ws))
}

/// The augmented manifest when `augment` has run, the configured one otherwise.
pub fn working_manifest(config: &PipelineConfig) -> Result<(DatasetManifest, PathBuf, Workspace)> {
    let (manifest, ws) = source_manifest(config)?;
    let aug = ws.augmented_manifest();
    if aug.is_file() {
        let m = checked_manifest(&aug)?;
        if m.target_artist_id != manifest.target_artist_id {
            return Err(Error::Config(format!("{} belongs to another artist", aug.display())));
        }
        Ok((m, aug, ws))
    } else {
        log::warn!("no augmented manifest at {}; using the source manifest", aug.display());
        Ok((manifest, config.manifest.clone(), ws))
    }
}

#[derive(Debug)]
pub struct AugmentSummary {
    pub manifest_path: PathBuf,
    pub added: usize,
    /// Positives skipped under `keep_going`, with the reason.
    pub failures: Vec<(String, Error)>,
}

struct Generated {
    entry: ManifestEntry,
    image: ImageTensor,
}

fn augment_one(
    config: &PipelineConfig,
    registry_pair: (&dyn crate::augment::CaptionProvider, &dyn crate::augment::ReconstructionProvider),
    entry: &ManifestEntry,
    image: &ImageTensor,
    k: usize,
) -> Result<Vec<Generated>> {
    let base = config.augment_seed();
    let sr_seed = derive_seed(base, &format!("{}/self-reconstruction", entry.id));
    let mut out = Vec::new();
    for (img, rec) in self_reconstruct(&entry.id, image, registry_pair.0, registry_pair.1, k, sr_seed)? {
        let id = format!("{}.sr{}", entry.id, rec.index);
        out.push(Generated {
            entry: ManifestEntry {
                id: id.clone(),
                path: format!("augmented/{id}.png"),
                label: entry.label,
                artist_id: entry.artist_id.clone(),
                split: entry.split,
                origin: Origin::SelfReconstructed,
                parent_id: Some(entry.id.clone()),
                seed: Some(rec.seed),
            },
            image: img,
        });
    }
    for n in 0..config.augment.traditional_variants {
        let seed = derive_seed(base, &format!("{}/traditional/{n}", entry.id));
        let cfg = TraditionalAugConfig {
            seed,
            ..config.augment.traditional.clone()
        };
        let id = format!("{}.ta{n}", entry.id);
        out.push(Generated {
            entry: ManifestEntry {
                id: id.clone(),
                path: format!("augmented/{id}.png"),
                label: entry.label,
                artist_id: entry.artist_id.clone(),
                split: entry.split,
                origin: Origin::TraditionalAug,
                parent_id: Some(entry.id.clone()),
                seed: Some(seed),
            },
            image: traditional_augment(image, &cfg)?,
        });
    }
    Ok(out)
}

/// Augments every original positive of the train split and writes the
/// extended manifest plus images into the artist's workspace.
pub fn cli_augment(config: &PipelineConfig, registry: &ProviderRegistry) -> Result<AugmentSummary> {
    let (manifest, ws) = source_manifest(config)?;
    let positives: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train && e.label == Label::Positive && e.origin == Origin::Original)
        .collect();
    if positives.is_empty() {
        return Err(Error::Precondition(format!(
            "{} has no original positive train entries to augment",
            config.manifest.display()
        )));
    }
    let captioner = registry.captioner(&config.providers.caption, &config.providers.caption_options)?;
    let reconstructor =
        registry.reconstructor(&config.providers.reconstruction, &config.providers.reconstruction_options)?;
    let images = load_entries(&config.manifest, &positives)?;

    let mut k_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.augment_seed(), "k"));
    let ks: Vec<usize> = positives
        .iter()
        .map(|_| config.augment.k.unwrap_or_else(|| k_rng.random_range(1..=3)))
        .collect();
    let results: Vec<Result<Vec<Generated>>> = positives
        .par_iter()
        .zip(images.par_iter())
        .zip(ks.par_iter())
        .map(|((e, img), &k)| augment_one(config, (captioner.as_ref(), reconstructor.as_ref()), e, img, k))
        .collect();

    let mut generated = Vec::new();
    let mut failures = Vec::new();
    for (entry, r) in positives.iter().zip(results) {
        match r {
            Ok(g) => generated.extend(g),
            Err(e) if config.augment.keep_going => {
                log::warn!("augmentation of {} failed: {e}", entry.id);
                failures.push((entry.id.clone(), e));
            }
            Err(e) => {
                return Err(Error::Provider {
                    provider: format!("{}+{}", captioner.name(), reconstructor.name()),
                    message: format!("image {}: {e}", entry.id),
                })
            }
        }
    }

    let mut out = absolutize(&manifest, &config.manifest)?;
    out.entries.extend(generated.iter().map(|g| g.entry.clone()));
    let violations = validate_manifest(&out);
    if let Some(v) = violations.first() {
        return Err(Error::Precondition(format!("augmented manifest is invalid: {v}")));
    }

    let img_dir = ws.augmented_images();
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for g in &generated {
        save_png(&g.image, &ws.dir.join(&g.entry.path))?;
    }
    let path = ws.augmented_manifest();
    out.save(&path)?;
    log_event(
        &ws.log(),
        "augment",
        &format!("added {} entries, {} failures", generated.len(), failures.len()),
    )?;
    Ok(AugmentSummary {
        manifest_path: path,
        added: generated.len(),
        failures,
    })
}

fn split_entries(manifest: &DatasetManifest, split: Split) -> Result<Vec<&ManifestEntry>> {
    let entries: Vec<&ManifestEntry> = manifest.entries_in(split).collect();
    for label in [Label::Positive, Label::Negative] {
        if !entries.iter().any(|e| e.label == label) {
            return Err(Error::Precondition(format!(
                "{split} split has no {} entries; it needs both classes",
                match label {
                    Label::Positive => "positive",
                    Label::Negative => "negative",
                }
            )));
        }
    }
    Ok(entries)
}

/// Trains extractor and verifier on the train split and writes the
/// checkpoint. With `resume`, continues from the checkpoint's epoch count.
pub fn cli_train(
    config: &PipelineConfig,
    checkpoint: Option<&Path>,
    resume: bool,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<PathBuf> {
    let (manifest, manifest_path, ws) = working_manifest(config)?;
    let ck_path = checkpoint.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let entries = split_entries(&manifest, Split::Train)?;
    let train_cfg = config.train_config();

    let (params, mut state) = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.target_artist_id != manifest.target_artist_id {
            return Err(Error::Config(format!(
                "checkpoint belongs to artist `{}`, manifest to `{}`",
                ck.target_artist_id, manifest.target_artist_id
            )));
        }
        let comparable = |c: &crate::verifier::TrainConfig| crate::verifier::TrainConfig { epochs: 0, ..c.clone() };
        if comparable(&ck.train_config) != comparable(&train_cfg) {
            return Err(Error::Config(
                "training settings differ from the checkpoint; only `epochs` may change on resume".into(),
            ));
        }
        (ExtractorParams::from_state(ck.extractor)?, ck.training)
    } else {
        let params = ExtractorParams::new(config.extractor_config())?;
        let verifier = VerifierParams::init(
            params.embed_dim(),
            train_cfg.projection_dim,
            config.projection_seed(),
            &train_cfg.loss_weights(),
        );
        let state = TrainOutcome::new(verifier, &train_cfg);
        (params, state)
    };

    let images = load_entries(&manifest_path, &entries)?;
    let labels: Vec<Label> = entries.iter().map(|e| e.label).collect();
    let mut model = OnlineExtractor::new(params, &images);
    drop(images);
    let start = state.epochs_completed();
    train(&mut model, &labels, &mut state, &train_cfg, on_epoch)?;
    state.verifier.radius = None;

    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        target_artist_id: manifest.target_artist_id.clone(),
        extractor: model.into_params().to_state(),
        train_config: train_cfg,
        training: state,
        calibration: None,
    };
    ck.save(&ck_path)?;
    log_event(
        &ws.log(),
        "train",
        &format!(
            "epochs {start}..{} on {} images -> {}",
            ck.training.epochs_completed(),
            labels.len(),
            ck_path.display()
        ),
    )?;
    Ok(ck_path)
}

fn load_model(ck: &Checkpoint) -> Result<ExtractorParams> {
    ExtractorParams::from_state(ck.extractor.clone())
}

/// Distances of the given entries' images to the center.
fn entry_distances(
    manifest_path: &Path,
    entries: &[&ManifestEntry],
    extractor: &ExtractorParams,
    verifier: &VerifierParams,
) -> Result<Vec<f64>> {
    entries
        .par_iter()
        .map(|e| {
            let img = load_image(&entry_path(manifest_path, e))?;
            let fp = extractor.extract_fingerprint(&e.id, &img)?;
            fingerprint_distance(&fp, verifier)
        })
        .collect()
}

/// Chooses the radius on the validation split and stores it in the checkpoint.
pub fn cli_calibrate(config: &PipelineConfig, checkpoint: Option<&Path>) -> Result<CalibrationResult> {
    let (manifest, manifest_path, ws) = working_manifest(config)?;
    let ck_path = checkpoint.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let mut ck = Checkpoint::load(&ck_path)?;
    let entries = split_entries(&manifest, Split::Val)?;
    let extractor = load_model(&ck)?;
    let distances = entry_distances(&manifest_path, &entries, &extractor, &ck.training.verifier)?;
    let pick = |l: Label| -> Vec<f64> {
        entries
            .iter()
            .zip(&distances)
            .filter(|(e, _)| e.label == l)
            .map(|(_, d)| *d)
            .collect()
    };
    let result = calibrate_radius(&pick(Label::Positive), &pick(Label::Negative), &config.calibration)?;
    ck.training.verifier.radius = Some(result.radius);
    ck.calibration = Some(result.clone());
    ck.save(&ck_path)?;
    log_event(
        &ws.log(),
        "calibrate",
        &format!("radius {} (tpr {}, fpr {})", result.radius, result.tpr, result.fpr),
    )?;
    Ok(result)
}

#[derive(Debug)]
pub struct VerifyLine {
    pub path: PathBuf,
    pub result: Result<Verdict>,
}

impl VerifyLine {
    pub fn render(&self) -> String {
        match &self.result {
            Ok(v) => format!(
                "{}\t{:.6}\t{:.6}\t{}\tmargin={:+.6}",
                v.image_id,
                v.distance,
                v.radius,
                if v.inside { "INSIDE" } else { "OUTSIDE" },
                v.radius - v.distance
            ),
            Err(e) => format!("{}\tERROR\t{e}", self.path.display()),
        }
    }
}

/// 0 when every image is inside, 2 when any is outside, 1 on any error.
pub fn verify_exit_code(lines: &[VerifyLine]) -> i32 {
    if lines.is_empty() || lines.iter().any(|l| l.result.is_err()) {
        1
    } else if lines.iter().all(|l| l.result.as_ref().is_ok_and(|v| v.inside)) {
        0
    } else {
        2
    }
}

/// One verdict per image at `input` (a file or a directory of images).
pub fn cli_verify(config: &PipelineConfig, checkpoint: Option<&Path>, input: &Path) -> Result<Vec<VerifyLine>> {
    let (_, ws) = source_manifest(config)?;
    let ck_path = checkpoint.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let ck = Checkpoint::load(&ck_path)?;
    if ck.training.verifier.radius.is_none() {
        return Err(Error::Uncalibrated);
    }
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Error::Precondition(format!("no images found at {}", input.display())));
    }
    let extractor = load_model(&ck)?;
    let verifier = &ck.training.verifier;
    Ok(files
        .par_iter()
        .map(|path| {
            let id = path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
            let result =
                load_image(path).and_then(|img| crate::verifier::verify(&id, &img, &extractor, verifier));
            VerifyLine {
                path: path.clone(),
                result,
            }
        })
        .collect())
}

#[derive(Debug)]
pub struct EvaluateOutput {
    pub report: EvaluationReport,
    pub clean_scores: ScoreSet,
    pub json_path: PathBuf,
    pub table_path: PathBuf,
}

/// Scores the test split and writes the report; with `robustness`, also
/// runs the perturbation battery.
pub fn cli_evaluate(config: &PipelineConfig, checkpoint: Option<&Path>, robustness: bool) -> Result<EvaluateOutput> {
    let (manifest, manifest_path, ws) = working_manifest(config)?;
    let ck_path = checkpoint.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let ck = Checkpoint::load(&ck_path)?;
    let radius = ck.training.verifier.radius.ok_or(Error::Uncalibrated)?;
    let entries = split_entries(&manifest, Split::Test)?;
    let extractor = load_model(&ck)?;
    let verifier = &ck.training.verifier;
    let images: Vec<LabeledImage> = load_entries(&manifest_path, &entries)?
        .into_iter()
        .zip(&entries)
        .map(|(image, e)| LabeledImage {
            id: e.id.clone(),
            image,
            label: e.label,
        })
        .collect();
    let eval = &config.evaluation;
    let mut report = EvaluationReport::new(manifest.target_artist_id.clone(), eval.fpr_target, eval.fpr_mode);
    report.radius = Some(radius);
    report.calibration = ck.calibration.clone();

    let clean_scores = score_images(&images, Perturbation::Identity, 0, &extractor, verifier)?;
    if robustness || eval.robustness_enabled {
        let spec = config.robustness_spec();
        let rows = robustness_battery(&images, &spec, &extractor, verifier, eval.fpr_target, eval.fpr_mode)?;
        report.rows = rows.into_iter().map(|(_, _, row)| row).collect();
        report.robustness = Some(spec);
    } else {
        report.rows = vec![SettingResult::from_scores(
            Perturbation::Identity.name(),
            &clean_scores,
            eval.fpr_target,
            eval.fpr_mode,
        )?];
    }
    let (json_path, table_path) = emit_report(&report, &ws.dir, REPORT_STEM)?;
    log_event(&ws.log(), "evaluate", &format!("{} rows -> {}", report.rows.len(), json_path.display()))?;
    Ok(EvaluateOutput {
        report,
        clean_scores,
        json_path,
        table_path,
    })
}
