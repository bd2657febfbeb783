//! Procedural painting-like textures standing in for artists.
//!
//! Each family has its own palette and brushstroke habit (orientation,
//! stroke length and width), so images of a family share a style while
//! differing in content.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{DatasetManifest, ImageTensor, Label, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::transforms::to_rgb8;

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyStyle {
    pub name: String,
    pub palette: Vec<[f32; 3]>,
    /// Mean stroke orientation in degrees and its spread.
    pub angle_deg: f64,
    pub angle_jitter_deg: f64,
    pub stroke_length: (f64, f64),
    pub stroke_width: (f64, f64),
    pub strokes: usize,
    /// Amplitude of the fine oriented grain.
    pub grain: f64,
    pub grain_period: f64,
}

impl FamilyStyle {
    /// Warm palette, long shallow strokes.
    pub fn ochre() -> Self {
        Self {
            name: "ochre".into(),
            palette: vec![[0.86, 0.47, 0.2], [0.95, 0.76, 0.32], [0.58, 0.26, 0.14], [0.9, 0.62, 0.45]],
            angle_deg: 20.0,
            angle_jitter_deg: 12.0,
            stroke_length: (14.0, 26.0),
            stroke_width: (1.5, 3.0),
            strokes: 70,
            grain: 0.05,
            grain_period: 5.0,
        }
    }

    /// Cool palette, short steep dabs.
    pub fn lagoon() -> Self {
        Self {
            name: "lagoon".into(),
            palette: vec![[0.14, 0.34, 0.68], [0.2, 0.6, 0.55], [0.52, 0.76, 0.86], [0.1, 0.2, 0.35]],
            angle_deg: 105.0,
            angle_jitter_deg: 15.0,
            stroke_length: (5.0, 11.0),
            stroke_width: (1.0, 2.0),
            strokes: 110,
            grain: 0.05,
            grain_period: 3.0,
        }
    }

    /// Paints one `size`×`size` image; `seed` picks the content.
    pub fn render(&self, size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0, 0.04).expect("valid sd");
        let n = size as f64;
        let base = self.palette[rng.random_range(0..self.palette.len())];
        let other = self.palette[rng.random_range(0..self.palette.len())];
        let wash_angle = rng.random_range(0.0..2.0 * PI);
        let mut px = vec![0f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let t = 0.5 + 0.5 * ((x as f64 * wash_angle.cos() + y as f64 * wash_angle.sin()) / n * PI).sin();
                for c in 0..3 {
                    px[(y * size + x) * 3 + c] = base[c] + (other[c] - base[c]) * t as f32 * 0.5;
                }
            }
        }
        for _ in 0..self.strokes {
            let cx = rng.random_range(0.0..n);
            let cy = rng.random_range(0.0..n);
            let angle = (self.angle_deg + rng.random_range(-self.angle_jitter_deg..=self.angle_jitter_deg)).to_radians();
            let len = rng.random_range(self.stroke_length.0..=self.stroke_length.1);
            let width = rng.random_range(self.stroke_width.0..=self.stroke_width.1);
            let mut color = self.palette[rng.random_range(0..self.palette.len())];
            for v in &mut color {
                *v += jitter.sample(&mut rng) as f32;
            }
            let (ca, sa) = (angle.cos(), angle.sin());
            let reach = (len / 2.0 + 3.0 * width).ceil();
            let y0 = (cy - reach).max(0.0) as usize;
            let y1 = ((cy + reach).ceil() as usize).min(size);
            let x0 = (cx - reach).max(0.0) as usize;
            let x1 = ((cx + reach).ceil() as usize).min(size);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let along = dx * ca + dy * sa;
                    let across = -dx * sa + dy * ca;
                    let overshoot = (along.abs() - len / 2.0).max(0.0);
                    let a = (-(across * across + overshoot * overshoot) / (2.0 * width * width)).exp() * 0.85;
                    let i = (y * size + x) * 3;
                    for c in 0..3 {
                        px[i + c] += (color[c] - px[i + c]) * a as f32;
                    }
                }
            }
        }
        let ga = self.angle_deg.to_radians();
        let phase = rng.random_range(0.0..2.0 * PI);
        for y in 0..size {
            for x in 0..size {
                let g = self.grain
                    * ((x as f64 * ga.sin() - y as f64 * ga.cos()) * 2.0 * PI / self.grain_period + phase).sin();
                for c in 0..3 {
                    px[(y * size + x) * 3 + c] += g as f32;
                }
            }
        }
        ImageTensor::from_clamped(size, size, px).expect("size matches buffer")
    }

    pub fn render_many(&self, count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
        (0..count as u64)
            .map(|i| self.render(size, seed.wrapping_mul(1_000_003).wrapping_add(i)))
            .collect()
    }
}

/// Layout of the two-family fixture dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub target: FamilyStyle,
    pub other: FamilyStyle,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            target: FamilyStyle::ochre(),
            other: FamilyStyle::lagoon(),
            size: 64,
            train: 60,
            val: 20,
            test: 20,
            seed: 2024,
        }
    }
}

/// Writes the fixture's PNGs under `dir/images` and its manifest to
/// `dir/manifest.json`. Image paths are relative to `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<DatasetManifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let per_family = spec.train + spec.val + spec.test;
    let mut entries = Vec::with_capacity(2 * per_family);
    for (k, (family, label)) in [(&spec.target, Label::Positive), (&spec.other, Label::Negative)]
        .into_iter()
        .enumerate()
    {
        let renders = family.render_many(per_family, spec.size, spec.seed.wrapping_add(k as u64 * 7919));
        for (i, img) in renders.iter().enumerate() {
            let id = format!("{}-{i:03}", family.name);
            let rel = format!("images/{id}.png");
            let path = dir.join(&rel);
            to_rgb8(img)
                .save(&path)
                .map_err(|e| Error::Codec { path: path.clone(), message: e.to_string() })?;
            let split = if i < spec.train {
                Split::Train
            } else if i < spec.train + spec.val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry::original(id, rel, label, family.name.clone(), split));
        }
    }
    let manifest = DatasetManifest::new(spec.target.name.clone(), entries);
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
