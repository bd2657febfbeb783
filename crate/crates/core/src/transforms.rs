//! Pixel-space image transforms shared by the augmentation stage, the
//! robustness battery and extractor preprocessing. Every transform returns a
//! valid [`ImageTensor`]; out-of-range values are clamped.

use std::path::PathBuf;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageBuffer, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{clamp_unit, ImageTensor};
use crate::error::{Error, Result};

pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    image.flip_horizontal()
}

/// Adds `N(0, sigma^2)` noise to every value, then clamps.
pub fn gaussian_noise<R: Rng + ?Sized>(image: &ImageTensor, sigma: f64, rng: &mut R) -> ImageTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    let pixels = image
        .pixels()
        .iter()
        .map(|&p| p + normal.sample(rng) as f32)
        .collect();
    ImageTensor::from_clamped(image.height(), image.width(), pixels).expect("shape preserved")
}

/// Rotates every pixel's hue by `shift` turns (`shift` in `[-0.5, 0.5]`).
pub fn hue_shift(image: &ImageTensor, shift: f32) -> ImageTensor {
    if shift == 0.0 {
        return image.clone();
    }
    let mut pixels = Vec::with_capacity(image.pixels().len());
    for px in image.pixels().chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        let h = (h + shift).rem_euclid(1.0);
        pixels.extend_from_slice(&hsv_to_rgb(h, s, v));
    }
    ImageTensor::from_clamped(image.height(), image.width(), pixels).expect("shape preserved")
}

/// Blends each pixel with the mean grayscale level: `(x - mean) * factor + mean`.
pub fn adjust_contrast(image: &ImageTensor, factor: f32) -> ImageTensor {
    let px = image.pixels();
    let n = (px.len() / 3) as f64;
    let mean = px
        .chunks_exact(3)
        .map(|c| f64::from(luma(c)))
        .sum::<f64>()
        / n;
    let mean = mean as f32;
    let pixels = px.iter().map(|&p| (p - mean) * factor + mean).collect();
    ImageTensor::from_clamped(image.height(), image.width(), pixels).expect("shape preserved")
}

fn luma(c: &[f32]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Separable Gaussian blur with a square odd-sized kernel and reflected edges.
pub fn gaussian_blur(image: &ImageTensor, kernel_size: usize, sigma: f64) -> Result<ImageTensor> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::Config(format!(
            "blur kernel size must be odd, got {kernel_size}"
        )));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let half = (kernel_size / 2) as isize;
    let mut kernel: Vec<f32> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (image.height(), image.width());
    let src = image.pixels();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - half, w);
                    acc += weight * src[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - half, h);
                    acc += weight * tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    ImageTensor::from_clamped(h, w, out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Rotates counter-clockwise about the image center with bilinear sampling;
/// samples falling outside the source replicate the nearest edge pixel.
pub fn rotate(image: &ImageTensor, degrees: f64) -> ImageTensor {
    if degrees == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(image.pixels().len());
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse mapping: rotate the destination point back into the source
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            pixels.extend_from_slice(&bilinear(image, sy, sx));
        }
    }
    ImageTensor::from_clamped(h, w, pixels).expect("shape preserved")
}

fn bilinear(image: &ImageTensor, y: f64, x: f64) -> [f32; 3] {
    let (h, w) = (image.height(), image.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = image.get(y0, x0, c) * (1.0 - fx) + image.get(y0, x1, c) * fx;
        let bottom = image.get(y1, x0, c) * (1.0 - fx) + image.get(y1, x1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Encodes to JPEG at `quality` (1..=100) and decodes back.
pub fn jpeg_round_trip(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "JPEG quality must be in [1, 100], got {quality}"
        )));
    }
    let rgb = to_rgb8(image);
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| codec_err(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| codec_err(e.to_string()))?
        .to_rgb8();
    Ok(from_rgb8(&decoded))
}

fn codec_err(message: String) -> Error {
    Error::Codec {
        path: PathBuf::from("<memory>"),
        message,
    }
}

/// Quantizes to 8-bit RGB.
pub fn to_rgb8(image: &ImageTensor) -> RgbImage {
    let bytes = image
        .pixels()
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageBuffer::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer length matches dimensions")
}

pub fn from_rgb8(rgb: &RgbImage) -> ImageTensor {
    let pixels = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    ImageTensor::new(rgb.height() as usize, rgb.width() as usize, pixels)
        .expect("8-bit values are in range")
}

/// Scales the shorter side to `size` and center-crops to `size x size`.
pub fn resize_center_crop(image: &ImageTensor, size: usize) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    if h == size && w == size {
        return image.clone();
    }
    let scale = size as f64 / h.min(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).max(size);
    let nw = ((w as f64 * scale).round() as usize).max(size);
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, image.pixels().to_vec())
            .expect("buffer length matches dimensions");
    let resized = if nh == h && nw == w {
        buf
    } else {
        image::imageops::resize(&buf, nw as u32, nh as u32, image::imageops::FilterType::Triangle)
    };
    let top = (nh - size) / 2;
    let left = (nw - size) / 2;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            pixels.extend_from_slice(&resized.get_pixel((left + x) as u32, (top + y) as u32).0);
        }
    }
    ImageTensor::from_clamped(size, size, pixels).expect("crop is non-empty")
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(clamp_unit)
}
