//! Scores a calibrated verifier on clean and perturbed test images and
//! prints the evaluation table.
//!
//! ```text
//! cargo run --release --example evaluate_robustness
//! ```

use ndarray::Array1;
use stylefence::evalkit::{render_table, robustness_battery, EvaluationReport, FprMode, LabeledImage, RobustnessSpec};
use stylefence::extractor::{BackboneSpec, ExtractorConfig, ExtractorParams};
use stylefence::synthetic::FamilyStyle;
use stylefence::verifier::{calibrate_radius, distance, project_vector, train, FixedFeatures, GridSpec, TrainConfig, TrainOutcome};
use stylefence::{ImageTensor, Label, VerifierParams};

fn labeled(prefix: &str, images: Vec<ImageTensor>, label: Label) -> Vec<LabeledImage> {
    images
        .into_iter()
        .enumerate()
        .map(|(i, image)| LabeledImage { id: format!("{prefix}-{i}"), image, label })
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
    let features = |set: &[LabeledImage]| -> anyhow::Result<Vec<Array1<f64>>> {
        set.iter()
            .map(|l| Ok(Array1::from(extractor.extract_fingerprint(&l.id, &l.image)?.vector)))
            .collect()
    };

    let mut train_set = labeled("t", target.render_many(30, 64, 1), Label::Positive);
    train_set.extend(labeled("o", other.render_many(30, 64, 2), Label::Negative));
    let config = TrainConfig { epochs: 25, projection_dim: 32, learning_rate: 5e-3, ..TrainConfig::default() };
    let verifier = VerifierParams::init(extractor.embed_dim(), config.projection_dim, 4, &config.loss_weights());
    let mut state = TrainOutcome::new(verifier, &config);
    let labels: Vec<Label> = train_set.iter().map(|l| l.label).collect();
    train(&mut FixedFeatures(features(&train_set)?), &labels, &mut state, &config, |_| {})?;
    let mut verifier = state.verifier;

    let mut val = labeled("vt", target.render_many(15, 64, 3), Label::Positive);
    val.extend(labeled("vo", other.render_many(15, 64, 4), Label::Negative));
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (l, f) in val.iter().zip(features(&val)?) {
        let d = distance(project_vector(f.as_slice().unwrap(), &verifier)?.as_slice().unwrap(), &verifier.center);
        if l.label == Label::Positive { pos.push(d) } else { neg.push(d) }
    }
    let calibration = calibrate_radius(&pos, &neg, &GridSpec::default())?;
    verifier.radius = Some(calibration.radius);

    let mut test = labeled("xt", target.render_many(20, 64, 5), Label::Positive);
    test.extend(labeled("xo", other.render_many(20, 64, 6), Label::Negative));
    let spec = RobustnessSpec { seed: 8, ..RobustnessSpec::default() };
    let mut report = EvaluationReport::new("ochre", 0.05, FprMode::Conservative);
    report.radius = verifier.radius;
    report.calibration = Some(calibration);
    for (_, _, row) in robustness_battery(&test, &spec, &extractor, &verifier, 0.05, FprMode::Conservative)? {
        report.rows.push(row);
    }
    report.robustness = Some(spec);
    print!("{}", render_table(&report));
    Ok(())
}
