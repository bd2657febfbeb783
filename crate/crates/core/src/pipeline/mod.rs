//! Config-driven commands that tie the modules into one workflow.

mod checkpoint;
mod commands;
mod config;
mod ingest;

pub use checkpoint::{log_event, Checkpoint, CHECKPOINT_VERSION};
pub use commands::{
    cli_augment, cli_calibrate, cli_evaluate, cli_train, cli_verify, source_manifest, verify_exit_code,
    working_manifest, AugmentSummary, EvaluateOutput, VerifyLine, Workspace, AUGMENTED_MANIFEST, CHECKPOINT_FILE,
    REPORT_STEM, RUN_LOG,
};
pub use config::{
    derive_seed, AugmentSettings, EvaluationSettings, ExtractorSettings, PipelineConfig, ProviderSettings,
};
pub use ingest::{entry_path, list_images, load_image, save_png, IMAGE_EXTENSIONS};
