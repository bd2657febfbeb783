//! Image files in, canonical tensors out.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};

use crate::datamodel::{DatasetManifest, ImageTensor, ManifestEntry};
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Converts any decoded raster to RGB, warning when channels were dropped
/// or replicated.
pub fn from_dynamic(img: DynamicImage, path: &Path) -> Result<ImageTensor> {
    match img.color() {
        ColorType::Rgb8 | ColorType::Rgb16 | ColorType::Rgb32F => {}
        other => log::warn!("{}: converting {other:?} to RGB", path.display()),
    }
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    ImageTensor::from_clamped(h as usize, w as usize, rgb.into_raw())
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    from_dynamic(img, path)
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    crate::transforms::to_rgb8(image).save(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Entry paths are relative to the manifest's directory unless absolute.
pub fn entry_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads the images of `entries` in order, in parallel.
pub fn load_entries(manifest_path: &Path, entries: &[&ManifestEntry]) -> Result<Vec<ImageTensor>> {
    use rayon::prelude::*;
    entries
        .par_iter()
        .map(|e| load_image(&entry_path(manifest_path, e)))
        .collect()
}

/// Files with a known image extension: the path itself, or a directory's
/// direct children sorted by name.
pub fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Paths in `manifest` rewritten as absolute so it can be saved elsewhere.
pub fn absolutize(manifest: &DatasetManifest, manifest_path: &Path) -> Result<DatasetManifest> {
    let base = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .canonicalize()
        .map_err(|e| Error::io(manifest_path, e))?;
    let mut out = manifest.clone();
    for e in &mut out.entries {
        if Path::new(&e.path).is_relative() {
            e.path = base.join(&e.path).to_string_lossy().into_owned();
        }
    }
    Ok(out)
}
