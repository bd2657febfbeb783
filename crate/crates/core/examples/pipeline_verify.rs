//! Runs augment, train, calibrate and evaluate on a small generated dataset,
//! then checks a folder of new images against the trained sphere.
//!
//! ```text
//! cargo run --release --example pipeline_verify
//! ```

use stylefence::augment::ProviderRegistry;
use stylefence::pipeline::{self, save_png, PipelineConfig};
use stylefence::synthetic::{write_fixture, FamilyStyle, FixtureSpec};

const CONFIG: &str = r#"seed = 1
manifest = "manifest.json"
output_dir = "out"

[augment]
k = 1

[extractor]
width_divisor = 16
input_size = 32
embed_dim = 32

[train]
epochs = 15
batch_size = 16
projection_dim = 16
learning_rate = 0.005
"#;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let spec = FixtureSpec { size: 32, train: 24, val: 10, test: 10, ..FixtureSpec::default() };
    write_fixture(dir.path(), &spec)?;
    let config_path = dir.path().join("stylefence.toml");
    std::fs::write(&config_path, CONFIG)?;
    let config = PipelineConfig::load(&config_path)?;

    let summary = pipeline::cli_augment(&config, &ProviderRegistry::with_builtins())?;
    println!("augment: +{} entries", summary.added);
    pipeline::cli_train(&config, None, false, |s| {
        println!("train: epoch {:2} loss {:.4}", s.epoch, s.total_loss)
    })?;
    let cal = pipeline::cli_calibrate(&config, None)?;
    println!("calibrate: radius {:.4} tpr {:.2} fpr {:.2}", cal.radius, cal.tpr, cal.fpr);
    let eval = pipeline::cli_evaluate(&config, None, false)?;
    print!("{}", stylefence::evalkit::render_table(&eval.report));

    let incoming = dir.path().join("incoming");
    std::fs::create_dir(&incoming)?;
    for (name, family, seed) in [("ochre", FamilyStyle::ochre(), 900), ("lagoon", FamilyStyle::lagoon(), 901)] {
        for (i, img) in family.render_many(2, 32, seed).iter().enumerate() {
            save_png(img, &incoming.join(format!("{name}-new{i}.png")))?;
        }
    }
    let lines = pipeline::cli_verify(&config, None, &incoming)?;
    for line in &lines {
        println!("{}", line.render());
    }
    println!("exit code would be {}", pipeline::verify_exit_code(&lines));
    Ok(())
}
