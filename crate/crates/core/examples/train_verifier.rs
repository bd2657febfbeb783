//! Fits the hypersphere verifier on frozen fingerprints and calibrates its
//! radius on held-out images.
//!
//! ```text
//! cargo run --release --example train_verifier
//! ```

use ndarray::Array1;
use stylefence::extractor::{BackboneSpec, ExtractorConfig, ExtractorParams};
use stylefence::synthetic::FamilyStyle;
use stylefence::verifier::{calibrate_radius, train, FixedFeatures, GridSpec, TrainConfig, TrainOutcome};
use stylefence::{ImageTensor, Label, VerifierParams};

fn fingerprints(extractor: &ExtractorParams, images: &[ImageTensor]) -> anyhow::Result<Vec<Array1<f64>>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| Ok(Array1::from(extractor.extract_fingerprint(&i.to_string(), img)?.vector)))
        .collect()
}

fn distances(v: &VerifierParams, feats: &[Array1<f64>]) -> anyhow::Result<Vec<f64>> {
    feats
        .iter()
        .map(|f| {
            let z = stylefence::verifier::project_vector(f.as_slice().unwrap(), v)?;
            Ok(stylefence::verifier::distance(z.as_slice().unwrap(), &v.center))
        })
        .collect()
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
    let (target, other) = (FamilyStyle::ochre(), FamilyStyle::lagoon());

    let mut train_feats = fingerprints(&extractor, &target.render_many(40, 64, 1))?;
    train_feats.extend(fingerprints(&extractor, &other.render_many(40, 64, 2))?);
    let labels: Vec<Label> = (0..80).map(|i| if i < 40 { Label::Positive } else { Label::Negative }).collect();

    let config = TrainConfig {
        epochs: 30,
        projection_dim: 32,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let verifier = VerifierParams::init(extractor.embed_dim(), config.projection_dim, 9, &config.loss_weights());
    let mut state = TrainOutcome::new(verifier, &config);
    train(&mut FixedFeatures(train_feats), &labels, &mut state, &config, |s| {
        if s.epoch % 5 == 4 {
            println!(
                "epoch {:2} loss {:.4} d+ {:.3} d- {:.3}",
                s.epoch, s.total_loss, s.mean_pos_distance, s.mean_neg_distance
            );
        }
    })?;

    let pos = distances(&state.verifier, &fingerprints(&extractor, &target.render_many(20, 64, 3))?)?;
    let neg = distances(&state.verifier, &fingerprints(&extractor, &other.render_many(20, 64, 4))?)?;
    let cal = calibrate_radius(&pos, &neg, &GridSpec::default())?;
    println!("radius {:.4} ({}): tpr {:.2} fpr {:.2}", cal.radius, cal.criterion, cal.tpr, cal.fpr);
    Ok(())
}
