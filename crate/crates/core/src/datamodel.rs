//! Shared domain types: images, dataset manifests, level encodings,
//! fingerprints, verifier parameters and verdicts.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Current manifest format version.
pub const MANIFEST_VERSION: u32 = 1;
/// Current fingerprint record version.
pub const FINGERPRINT_VERSION: u32 = 1;

/// RGB raster with values in `[0, 1]`, stored row-major as `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        let expected = height * width * Self::CHANNELS;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "pixel buffer has {} values, expected {expected}",
                pixels.len()
            )));
        }
        if let Some(pos) = pixels
            .iter()
            .position(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidImage(format!(
                "pixel value {} at offset {pos} is outside [0, 1]",
                pixels[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image from a per-pixel closure; values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                pixels.extend(rgb.iter().map(|v| clamp_unit(*v)));
            }
        }
        Self::new(height, width, pixels)
    }

    /// Wraps a buffer after clamping every value into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            *p = clamp_unit(*p);
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        Self::CHANNELS
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Mirrors the image left-to-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                pixels.extend_from_slice(&self.rgb(y, x));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Largest absolute per-value difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f32> {
        if self.height != other.height || self.width != other.width {
            return None;
        }
        Some(
            self.pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }

    /// SHA-256 over the dimensions and the raw pixel bits.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for p in &self.pixels {
            hasher.update(p.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    SelfReconstructed,
    TraditionalAug,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub artist_id: String,
    pub split: Split,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ManifestEntry {
    pub fn original(
        id: impl Into<String>,
        path: impl Into<String>,
        label: Label,
        artist_id: impl Into<String>,
        split: Split,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label,
            artist_id: artist_id.into(),
            split,
            origin: Origin::Original,
            parent_id: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub target_artist_id: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(target_artist_id: impl Into<String>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            target_artist_id: target_artist_id.into(),
            entries,
        }
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.entries_in(split).filter(|e| e.label == label).count()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Which manifest rule an entry breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    UnsupportedVersion,
    DuplicateId,
    MissingParent,
    LabelNotInherited,
    TargetArtistInNegatives,
    SplitLineage,
    MissingTrainClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending entry, `None` for manifest-wide rules.
    pub entry_id: Option<String>,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.entry_id {
            Some(id) => write!(f, "entry `{id}`: {:?}: {}", self.rule, self.message),
            None => write!(f, "manifest: {:?}: {}", self.rule, self.message),
        }
    }
}

/// Checks every manifest invariant and reports each breach. Never fails.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entry: Option<&str>, rule: Rule, message: String| {
        out.push(Violation {
            entry_id: entry.map(str::to_owned),
            rule,
            message,
        })
    };

    if manifest.version != MANIFEST_VERSION {
        push(
            None,
            Rule::UnsupportedVersion,
            format!(
                "version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        );
    }

    let mut seen = HashSet::new();
    let mut by_id: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.as_str()) {
            push(Some(&e.id), Rule::DuplicateId, "id appears more than once".into());
        } else {
            by_id.insert(e.id.as_str(), e);
        }
    }

    for e in &manifest.entries {
        if e.label == Label::Negative && e.artist_id == manifest.target_artist_id {
            push(
                Some(&e.id),
                Rule::TargetArtistInNegatives,
                format!(
                    "negative entry belongs to the target artist `{}`",
                    manifest.target_artist_id
                ),
            );
        }
        if e.origin == Origin::Original {
            continue;
        }
        let Some(parent_id) = e.parent_id.as_deref() else {
            push(
                Some(&e.id),
                Rule::MissingParent,
                "augmented entry has no parent_id".into(),
            );
            continue;
        };
        let Some(parent) = by_id.get(parent_id) else {
            push(
                Some(&e.id),
                Rule::MissingParent,
                format!("parent `{parent_id}` does not exist"),
            );
            continue;
        };
        if parent.label != e.label || parent.artist_id != e.artist_id {
            push(
                Some(&e.id),
                Rule::LabelNotInherited,
                format!("label/artist differ from parent `{parent_id}`"),
            );
        }
        // Walk to the root original so multi-level lineage is checked too.
        let mut root = *parent;
        let mut hops = 0;
        while root.origin != Origin::Original && hops < manifest.entries.len() {
            match root.parent_id.as_deref().and_then(|p| by_id.get(p)) {
                Some(next) => root = next,
                None => break,
            }
            hops += 1;
        }
        if parent.split != e.split || root.split != e.split {
            push(
                Some(&e.id),
                Rule::SplitLineage,
                format!(
                    "entry is in {} but its lineage (`{}`) is in {}",
                    e.split,
                    root.id,
                    if parent.split != e.split { parent.split } else { root.split }
                ),
            );
        }
    }

    for label in [Label::Positive, Label::Negative] {
        if manifest.count(Split::Train, label) == 0 {
            push(
                None,
                Rule::MissingTrainClass,
                format!("train split has no {label:?} entries"),
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Mid,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Mid, Level::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::High => "high",
        }
    }
}

/// Pooled and convolved encoding of one backbone tap.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEncoding {
    pub level: Level,
    pub vector: Vec<f64>,
    pub source_layer: String,
}

/// Fused style vector and the attention weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleFingerprint {
    pub format_version: u32,
    pub extractor_version: String,
    pub image_id: String,
    pub embed_dim: usize,
    pub vector: Vec<f64>,
    pub attention: Vec<f64>,
}

impl StyleFingerprint {
    pub fn new(
        image_id: impl Into<String>,
        extractor_version: impl Into<String>,
        vector: Vec<f64>,
        attention: Vec<f64>,
    ) -> Result<Self> {
        let fp = Self {
            format_version: FINGERPRINT_VERSION,
            extractor_version: extractor_version.into(),
            image_id: image_id.into(),
            embed_dim: vector.len(),
            vector,
            attention,
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vector.len() != self.embed_dim {
            return Err(Error::dim("fingerprint vector", self.embed_dim, self.vector.len()));
        }
        if self.attention.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Precondition(
                "attention weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = self.attention.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!(
                "attention weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fp: Self = serde_json::from_str(text)?;
        if fp.format_version != FINGERPRINT_VERSION {
            return Err(Error::Config(format!(
                "fingerprint record version {} is not supported",
                fp.format_version
            )));
        }
        fp.validate()?;
        Ok(fp)
    }
}

/// Bias-free linear projection applied to fingerprints before measuring
/// distance to the center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    /// `(output_dim, input_dim)`.
    pub weight: Array2<f64>,
}

impl ProjectionSpec {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Trained verifier: projection, center, loss hyperparameters and radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierParams {
    pub projection: ProjectionSpec,
    pub center: Vec<f64>,
    pub margin: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub radius: Option<f64>,
    pub version: String,
}

impl VerifierParams {
    pub fn validate(&self) -> Result<()> {
        if self.center.len() != self.projection.output_dim() {
            return Err(Error::dim(
                "verifier center",
                self.projection.output_dim(),
                self.center.len(),
            ));
        }
        let hyper = [
            self.margin,
            self.beta,
            self.epsilon,
            self.lambda_pos,
            self.lambda_neg,
        ];
        if hyper.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("verifier hyperparameters must be finite".into()));
        }
        if self.margin < 0.0 || self.lambda_pos < 0.0 || self.lambda_neg < 0.0 {
            return Err(Error::Config(
                "margin and loss weights must be nonnegative".into(),
            ));
        }
        if self.beta <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("beta and epsilon must be positive".into()));
        }
        if let Some(r) = self.radius {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::Config(format!("radius {r} must be finite and >= 0")));
            }
        }
        if self.center.iter().any(|v| !v.is_finite()) || self.projection.weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("verifier weights must be finite".into()));
        }
        Ok(())
    }
}

/// Decision for one suspect image. Boundary points (`distance == radius`)
/// count as inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub image_id: String,
    pub distance: f64,
    pub radius: f64,
    pub inside: bool,
    pub boundary_margin: f64,
}

impl Verdict {
    pub fn new(image_id: impl Into<String>, distance: f64, radius: f64) -> Self {
        Self {
            image_id: image_id.into(),
            distance,
            radius,
            inside: distance <= radius,
            boundary_margin: radius - distance,
        }
    }
}
