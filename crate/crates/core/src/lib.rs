//! Style fingerprinting and one-class hypersphere verification for artwork
//! copyright checks.
//!
//! The workflow is augment → train → calibrate → verify/evaluate:
//!
//! * [`augment`] grows the positive set by self-reconstruction (caption the
//!   image, re-render the caption in the image's own style) plus
//!   conventional flips, jitter, noise and JPEG.
//! * [`extractor`] taps a VGG-style backbone at three depths, pools each tap
//!   and fuses the levels with learned attention into a style fingerprint.
//! * [`verifier`] projects fingerprints, pulls positives toward a learnable
//!   center and repels negatives, then picks the radius by line search.
//! * [`evalkit`] scores verdicts with AUC and TPR at a fixed FPR, and runs
//!   the robustness battery.
//! * [`pipeline`] binds it together behind a config file and checkpoints.

pub mod augment;
pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod extractor;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod synthetic;
pub mod transforms;
pub mod verifier;

pub use datamodel::{
    validate_manifest, DatasetManifest, ImageTensor, Label, Level, LevelEncoding, ManifestEntry,
    Origin, Split, StyleFingerprint, Verdict, VerifierParams,
};
pub use error::{Error, Result};
