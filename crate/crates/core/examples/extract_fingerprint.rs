//! Style fingerprints for two painted families, with per-level attention.
//!
//! ```text
//! cargo run --release --example extract_fingerprint
//! ```

use stylefence::extractor::{BackboneSpec, ExtractorConfig, ExtractorParams};
use stylefence::synthetic::FamilyStyle;
use stylefence::StyleFingerprint;

fn cosine(a: &StyleFingerprint, b: &StyleFingerprint) -> f64 {
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(&a.vector) * norm(&b.vector))
}

fn main() -> anyhow::Result<()> {
    let extractor = ExtractorParams::new(ExtractorConfig {
        backbone: BackboneSpec {
            width_divisor: 8,
            input_size: 64,
            ..BackboneSpec::default()
        },
        embed_dim: 64,
        ..ExtractorConfig::default()
    })?;
    println!("extractor {} -> {} dims", extractor.version(), extractor.embed_dim());

    let mut prints = Vec::new();
    for family in [FamilyStyle::ochre(), FamilyStyle::lagoon()] {
        for (i, img) in family.render_many(3, 64, 11).into_iter().enumerate() {
            let id = format!("{}-{i}", family.name);
            let fp = extractor.extract_fingerprint(&id, &img)?;
            let attn: Vec<String> = fp.attention.iter().map(|a| format!("{a:.3}")).collect();
            println!("{id:10} attention [{}]", attn.join(", "));
            prints.push(fp);
        }
    }

    println!("\ncosine similarity");
    for a in &prints {
        let row: Vec<String> = prints.iter().map(|b| format!("{:6.3}", cosine(a, b))).collect();
        println!("{:10} {}", a.image_id, row.join(" "));
    }
    Ok(())
}
