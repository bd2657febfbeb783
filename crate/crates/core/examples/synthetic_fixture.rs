//! Writes the two-family synthetic dataset and a matching pipeline config.
//!
//! ```text
//! cargo run --example synthetic_fixture -- /tmp/fixture
//! cargo run --bin stylefence -- augment --config /tmp/fixture/stylefence.toml
//! ```

use std::path::PathBuf;

use stylefence::synthetic::{write_fixture, FixtureSpec};

const CONFIG: &str = r#"seed = 7
manifest = "manifest.json"
output_dir = "out"

[augment]
k = 2

[extractor]
width_divisor = 8
input_size = 64

[train]
epochs = 50
"#;

fn main() -> anyhow::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "fixture".into()).into();
    let manifest = write_fixture(&dir, &FixtureSpec::default())?;
    std::fs::write(dir.join("stylefence.toml"), CONFIG)?;
    println!(
        "{} images for `{}` -> {}",
        manifest.entries.len(),
        manifest.target_artist_id,
        dir.display()
    );
    Ok(())
}
