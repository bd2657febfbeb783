use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use stylefence::augment::ProviderRegistry;
use stylefence::pipeline::{self, PipelineConfig};

#[derive(Parser)]
#[command(version, about = "Style fingerprint verification for artwork")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-reconstruct and conventionally augment the train positives.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keep_going: bool,
    },
    /// Train the extractor head and verifier; writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Pick the radius on the validation split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verify an image or every image in a directory.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score the test split and write the report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        robustness: bool,
    },
}

fn load(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Augment { common, keep_going } => {
            let mut cfg = load(&common)?;
            cfg.augment.keep_going |= keep_going;
            let summary = pipeline::cli_augment(&cfg, &ProviderRegistry::with_builtins())?;
            for (id, err) in &summary.failures {
                eprintln!("{id}: {err}");
            }
            println!("added {} entries -> {}", summary.added, summary.manifest_path.display());
            Ok(if summary.failures.is_empty() { 0 } else { 1 })
        }
        Command::Train { common, checkpoint, resume } => {
            let cfg = load(&common)?;
            let path = pipeline::cli_train(&cfg, checkpoint.as_deref(), resume, |s| {
                println!(
                    "epoch {:>3}  loss {:.6}  pos {:.6}  neg {:.6}  d+ {:.4}  d- {:.4}",
                    s.epoch + 1,
                    s.total_loss,
                    s.pos_loss,
                    s.neg_loss,
                    s.mean_pos_distance,
                    s.mean_neg_distance
                );
            })?;
            println!("checkpoint -> {}", path.display());
            Ok(0)
        }
        Command::Calibrate { common, checkpoint } => {
            let cfg = load(&common)?;
            let r = pipeline::cli_calibrate(&cfg, checkpoint.as_deref())?;
            println!("radius {:.6}  tpr {:.4}  fpr {:.4}  ({})", r.radius, r.tpr, r.fpr, r.criterion);
            Ok(0)
        }
        Command::Verify { common, checkpoint, input } => {
            let cfg = load(&common)?;
            let lines = pipeline::cli_verify(&cfg, checkpoint.as_deref(), &input)?;
            for line in &lines {
                println!("{}", line.render());
            }
            Ok(pipeline::verify_exit_code(&lines) as u8)
        }
        Command::Evaluate { common, checkpoint, robustness } => {
            let cfg = load(&common)?;
            let out = pipeline::cli_evaluate(&cfg, checkpoint.as_deref(), robustness)?;
            print!("{}", stylefence::evalkit::render_table(&out.report));
            println!("report -> {}", out.json_path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
