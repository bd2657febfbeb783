//! Caption-conditioned self-reconstruction plus classic augmentation.
//!
//! A custom caption provider is registered next to the built-in ones; the
//! reconstructions and one traditional variant are written as PNGs.
//!
//! ```text
//! cargo run --example self_reconstruction -- /tmp/recon
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use stylefence::augment::{
    self_reconstruct, traditional_augment, CaptionProvider, ProviderOptions, ProviderRegistry, TraditionalAugConfig,
};
use stylefence::pipeline::save_png;
use stylefence::synthetic::FamilyStyle;
use stylefence::{ImageTensor, Result};

/// Describes an image by its dominant channel.
struct PaletteCaptioner;

impl CaptionProvider for PaletteCaptioner {
    fn name(&self) -> &str {
        "palette"
    }

    fn describe(&self, image: &ImageTensor) -> Result<String> {
        let mut sums = [0.0f64; 3];
        for px in image.pixels().chunks_exact(3) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += f64::from(*v);
            }
        }
        let names = ["red", "green", "blue"];
        let top = (0..3).max_by(|&a, &b| sums[a].total_cmp(&sums[b])).unwrap();
        Ok(format!("a painting dominated by {} tones", names[top]))
    }
}

fn main() -> anyhow::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "recon".into()).into();
    std::fs::create_dir_all(&dir)?;

    let mut registry = ProviderRegistry::with_builtins();
    registry.register_captioner("palette", |_| Ok(Arc::new(PaletteCaptioner)));
    let options = ProviderOptions::default();
    let captioner = registry.captioner("palette", &options)?;
    let reconstructor = registry.reconstructor("seeded-noise", &options)?;

    let original = FamilyStyle::ochre().render(64, 3);
    save_png(&original, &dir.join("original.png"))?;

    for (img, record) in self_reconstruct("original", &original, captioner.as_ref(), reconstructor.as_ref(), 3, 100)? {
        let path = dir.join(format!("original.sr{}.png", record.index));
        save_png(&img, &path)?;
        println!("{} seed={} caption={:?}", path.display(), record.seed, record.caption);
    }

    let classic = traditional_augment(&original, &TraditionalAugConfig { seed: 5, ..Default::default() })?;
    save_png(&classic, &dir.join("original.ta0.png"))?;
    println!("{}", dir.join("original.ta0.png").display());
    Ok(())
}
