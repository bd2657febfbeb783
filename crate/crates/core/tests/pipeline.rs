use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use stylefence::augment::{CaptionProvider, HashCaptioner, ProviderRegistry};
use stylefence::datamodel::{DatasetManifest, ImageTensor, Label, Origin, Split};
use stylefence::evalkit::roc_auc;
use stylefence::pipeline::{self, Checkpoint, PipelineConfig};
use stylefence::synthetic::{write_fixture, FixtureSpec};
use stylefence::Error;

const TINY: &str = r#"seed = 3
manifest = "manifest.json"
output_dir = "out"

[augment]
k = 2
traditional_variants = 0

[extractor]
width_divisor = 16
input_size = 32
embed_dim = 16
attention_hidden = 8

[train]
epochs = 3
batch_size = 8
projection_dim = 8
learning_rate = 0.005
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        Self::with_config(TINY)
    }

    fn with_config(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let spec = FixtureSpec {
            size: 32,
            train: 10,
            val: 4,
            test: 4,
            ..FixtureSpec::default()
        };
        write_fixture(&root, &spec).unwrap();
        std::fs::write(root.join("stylefence.toml"), config).unwrap();
        Self { _dir: dir, root }
    }

    fn config_path(&self) -> PathBuf {
        self.root.join("stylefence.toml")
    }

    fn config(&self) -> PipelineConfig {
        PipelineConfig::load(self.config_path()).unwrap()
    }

    fn artist_dir(&self) -> PathBuf {
        self.root.join("out/ochre")
    }

    fn trained(self) -> Self {
        let cfg = self.config();
        pipeline::cli_augment(&cfg, &ProviderRegistry::with_builtins()).unwrap();
        pipeline::cli_train(&cfg, None, false, |_| {}).unwrap();
        self
    }

    fn calibrated(self) -> Self {
        let s = self.trained();
        pipeline::cli_calibrate(&s.config(), None).unwrap();
        s
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn augment_adds_k_reconstructions_per_positive() {
    let fx = Fixture::new();
    let summary = pipeline::cli_augment(&fx.config(), &ProviderRegistry::with_builtins()).unwrap();
    assert_eq!(summary.added, 20);
    let m = DatasetManifest::load(&summary.manifest_path).unwrap();
    let added: Vec<_> = m.entries.iter().filter(|e| e.origin != Origin::Original).collect();
    assert_eq!(added.len(), 20);
    for e in &added {
        assert_eq!(e.origin, Origin::SelfReconstructed);
        let parent = m.get(e.parent_id.as_deref().unwrap()).unwrap();
        assert_eq!(parent.origin, Origin::Original);
        assert_eq!(parent.label, Label::Positive);
        assert_eq!(e.split, Split::Train);
        assert!(pipeline::entry_path(&summary.manifest_path, e).is_file());
    }
    assert!(stylefence::validate_manifest(&m).is_empty());
}

#[test]
fn augment_is_idempotent() {
    let fx = Fixture::new();
    let cfg = fx.config();
    let reg = ProviderRegistry::with_builtins();
    let first = pipeline::cli_augment(&cfg, &reg).unwrap();
    let bytes = std::fs::read(&first.manifest_path).unwrap();
    let images: Vec<Vec<u8>> = files_under(&fx.artist_dir().join("augmented"))
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    pipeline::cli_augment(&cfg, &reg).unwrap();
    assert_eq!(std::fs::read(&first.manifest_path).unwrap(), bytes);
    let again: Vec<Vec<u8>> = files_under(&fx.artist_dir().join("augmented"))
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    assert_eq!(again, images);
}

#[test]
fn default_k_is_drawn_from_one_to_three() {
    let fx = Fixture::with_config(&TINY.replace("k = 2\n", ""));
    let summary = pipeline::cli_augment(&fx.config(), &ProviderRegistry::with_builtins()).unwrap();
    let m = DatasetManifest::load(&summary.manifest_path).unwrap();
    let originals: Vec<_> = m
        .entries
        .iter()
        .filter(|e| e.origin == Origin::Original && e.label == Label::Positive && e.split == Split::Train)
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    for o in originals {
        let k = m
            .entries
            .iter()
            .filter(|e| e.parent_id.as_deref() == Some(&o.id) && e.origin == Origin::SelfReconstructed)
            .count();
        assert!((1..=3).contains(&k));
        seen.insert(k);
    }
    assert!(seen.len() > 1, "k never varied: {seen:?}");
}

struct Counting(Arc<AtomicUsize>);

impl CaptionProvider for Counting {
    fn name(&self) -> &str {
        "counting"
    }

    fn describe(&self, image: &ImageTensor) -> stylefence::Result<String> {
        self.0.fetch_add(1, Ordering::SeqCst);
        HashCaptioner.describe(image)
    }
}

#[test]
fn augment_without_positives_fails_before_any_provider_call() {
    let fx = Fixture::with_config(&format!("{TINY}\n[providers]\ncaption = \"counting\"\n"));
    let mut m = DatasetManifest::load(fx.root.join("manifest.json")).unwrap();
    m.entries.retain(|e| e.label == Label::Negative);
    m.save(fx.root.join("manifest.json")).unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let mut reg = ProviderRegistry::with_builtins();
    let c = calls.clone();
    reg.register_captioner("counting", move |_| Ok(Arc::new(Counting(c.clone()))));
    let err = pipeline::cli_augment(&fx.config(), &reg).unwrap_err();
    assert!(err.to_string().to_lowercase().contains("positive"), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert!(!fx.root.join("out").exists());
}

struct FailOn(String);

impl CaptionProvider for FailOn {
    fn name(&self) -> &str {
        "flaky"
    }

    fn describe(&self, image: &ImageTensor) -> stylefence::Result<String> {
        let text = HashCaptioner.describe(image)?;
        if text == self.0 {
            return Err(Error::Provider {
                provider: "flaky".into(),
                message: "refused".into(),
            });
        }
        Ok(text)
    }
}

#[test]
fn provider_failures_abort_unless_keep_going() {
    let fx = Fixture::with_config(&format!("{TINY}\n[providers]\ncaption = \"flaky\"\n"));
    let first = stylefence::pipeline::load_image(&fx.root.join("images/ochre-000.png")).unwrap();
    let bad = HashCaptioner.describe(&first).unwrap();
    let mut reg = ProviderRegistry::with_builtins();
    reg.register_captioner("flaky", move |_| Ok(Arc::new(FailOn(bad.clone()))));
    let mut cfg = fx.config();
    let err = pipeline::cli_augment(&cfg, &reg).unwrap_err();
    assert!(err.to_string().contains("ochre-000"), "{err}");
    assert!(!fx.artist_dir().join(pipeline::AUGMENTED_MANIFEST).exists());

    cfg.augment.keep_going = true;
    let summary = pipeline::cli_augment(&cfg, &reg).unwrap();
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].0, "ochre-000");
    assert_eq!(summary.added, 18);
}

#[test]
fn train_writes_history_and_resume_continues() {
    let fx = Fixture::new().trained();
    let ck_path = fx.artist_dir().join(pipeline::CHECKPOINT_FILE);
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.training.history.len(), 3);
    assert!(ck.training.verifier.radius.is_none());

    let mut cfg = fx.config();
    cfg.train.epochs = 5;
    let mut seen = Vec::new();
    pipeline::cli_train(&cfg, None, true, |s| seen.push(s.epoch)).unwrap();
    assert_eq!(seen, [3, 4]);
    let resumed = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(resumed.training.history.len(), 5);
    assert_eq!(resumed.training.history[..3], ck.training.history[..]);

    cfg.train.learning_rate = 0.1;
    assert!(matches!(pipeline::cli_train(&cfg, None, true, |_| {}), Err(Error::Config(_))));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let fx = Fixture::new().trained();
    let mut cfg = fx.config();
    cfg.train.epochs = 5;
    pipeline::cli_train(&cfg, None, true, |_| {}).unwrap();
    let straight = fx.root.join("straight.json");
    pipeline::cli_train(&cfg, Some(&straight), false, |_| {}).unwrap();
    let resumed = Checkpoint::load(&fx.artist_dir().join(pipeline::CHECKPOINT_FILE)).unwrap();
    assert_eq!(resumed, Checkpoint::load(&straight).unwrap());
}

#[test]
fn missing_weights_file_fails_before_training() {
    let fx = Fixture::with_config(&format!(
        "{TINY}\n[providers.backbone_weights]\nkind = \"file\"\npath = \"weights/missing.sfwb\"\n"
    ));
    let err = PipelineConfig::load(fx.config_path()).unwrap_err();
    assert!(matches!(err, Error::WeightsLoad { .. }), "{err}");

    // bypassing load-time validation still fails before epoch 0
    let mut cfg = PipelineConfig::load(Fixture::new().config_path()).unwrap();
    cfg.manifest = fx.root.join("manifest.json");
    cfg.output_dir = fx.root.join("out");
    cfg.providers.backbone_weights = stylefence::extractor::WeightsSource::File {
        path: fx.root.join("weights/missing.sfwb"),
    };
    let mut epochs = 0;
    let err = pipeline::cli_train(&cfg, None, false, |_| epochs += 1).unwrap_err();
    assert!(matches!(err, Error::WeightsLoad { .. }), "{err}");
    assert_eq!(epochs, 0);
}

#[test]
fn calibration_is_deterministic_and_stored() {
    let fx = Fixture::new().trained();
    let cfg = fx.config();
    let a = pipeline::cli_calibrate(&cfg, None).unwrap();
    let bytes = std::fs::read(fx.artist_dir().join(pipeline::CHECKPOINT_FILE)).unwrap();
    let b = pipeline::cli_calibrate(&cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(fx.artist_dir().join(pipeline::CHECKPOINT_FILE)).unwrap(), bytes);
    let ck = Checkpoint::load(&fx.artist_dir().join(pipeline::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.training.verifier.radius, Some(a.radius));
    assert_eq!(ck.calibration, Some(a));
}

#[test]
fn calibration_without_val_negatives_names_the_split() {
    let fx = Fixture::new().trained();
    let aug = fx.artist_dir().join(pipeline::AUGMENTED_MANIFEST);
    let mut m = DatasetManifest::load(&aug).unwrap();
    m.entries.retain(|e| !(e.split == Split::Val && e.label == Label::Negative));
    m.save(&aug).unwrap();
    let err = pipeline::cli_calibrate(&fx.config(), None).unwrap_err();
    assert!(err.to_string().contains("val split"), "{err}");
}

#[test]
fn evaluate_reports_metrics_matching_the_oracle() {
    let fx = Fixture::new().calibrated();
    let out = pipeline::cli_evaluate(&fx.config(), None, false).unwrap();
    assert_eq!(out.report.rows.len(), 1);
    let row = &out.report.rows[0];
    let (auc, tpr) = (row.auc.unwrap(), row.tpr_at_fpr.unwrap());
    assert!((0.0..=1.0).contains(&auc) && (0.0..=1.0).contains(&tpr));
    assert_eq!((row.n_positive, row.n_negative), (4, 4));

    let s = &out.clean_scores;
    let mut doubled = 0u64;
    for p in &s.positive_scores {
        for n in &s.negative_scores {
            doubled += u64::from(p > n) * 2 + u64::from(p == n);
        }
    }
    let brute = doubled as f64 / (2 * s.positive_scores.len() * s.negative_scores.len()) as f64;
    assert_eq!(auc, brute);
    assert_eq!(roc_auc(s).unwrap(), brute);

    let parsed = stylefence::evalkit::EvaluationReport::load(&out.json_path).unwrap();
    assert_eq!(parsed, out.report);
    assert!(std::fs::read_to_string(&out.table_path).unwrap().contains("clean"));
}

#[test]
fn robustness_flag_adds_rows() {
    let fx = Fixture::new().calibrated();
    let out = pipeline::cli_evaluate(&fx.config(), None, true).unwrap();
    let names: Vec<&str> = out.report.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(names.len(), 8);
    assert_eq!(names[0], "clean");
    assert!(names.iter().any(|n| n.starts_with("jpeg q50")));
    assert!(out.report.rows.iter().filter(|r| r.status.starts_with("skipped")).count() == 2);
    let clean = pipeline::cli_evaluate(&fx.config(), None, false).unwrap();
    assert_eq!(clean.report.rows[0], out.report.rows[0]);
}

#[test]
fn uncalibrated_checkpoint_refuses_verification() {
    let fx = Fixture::new().trained();
    let err = pipeline::cli_verify(&fx.config(), None, &fx.root.join("images/ochre-000.png")).unwrap_err();
    assert!(matches!(err, Error::Uncalibrated));
    assert!(err.to_string().contains("calibrate"));
    assert!(matches!(pipeline::cli_evaluate(&fx.config(), None, false), Err(Error::Uncalibrated)));
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let fx = Fixture::new().trained();
    let path = fx.artist_dir().join(pipeline::CHECKPOINT_FILE);
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    std::fs::write(&path, text).unwrap();
    let err = pipeline::cli_calibrate(&fx.config(), None).unwrap_err();
    assert!(matches!(err, Error::CheckpointVersion { found: 9, .. }), "{err}");
}

#[test]
fn train_and_calibrate_twice_give_identical_checkpoints() {
    let fx = Fixture::new();
    let cfg = fx.config();
    pipeline::cli_augment(&cfg, &ProviderRegistry::with_builtins()).unwrap();
    let paths = [fx.root.join("a.json"), fx.root.join("b.json")];
    for p in &paths {
        pipeline::cli_train(&cfg, Some(p), false, |_| {}).unwrap();
        pipeline::cli_calibrate(&cfg, Some(p)).unwrap();
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
}

#[test]
fn outputs_stay_under_the_output_directory() {
    let fx = Fixture::new();
    let before: Vec<PathBuf> = files_under(&fx.root);
    let fx = fx.calibrated();
    pipeline::cli_evaluate(&fx.config(), None, false).unwrap();
    let out = fx.root.join("out");
    for f in files_under(&fx.root) {
        assert!(before.contains(&f) || f.starts_with(&out), "{} written outside output dir", f.display());
    }
    assert!(fx.artist_dir().join(pipeline::RUN_LOG).is_file());
}

fn bin(fx: &Fixture, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stylefence"))
        .args(args)
        .arg("--config")
        .arg(fx.config_path())
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_commands_and_exit_codes() {
    let fx = Fixture::new();
    let (code, stdout, _) = bin(&fx, &["augment"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("added 20 entries"));
    let (code, stdout, _) = bin(&fx, &["train"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 3);

    let positive = fx.root.join("images/ochre-015.png");
    let (code, _, stderr) = bin(&fx, &["verify", "--input", positive.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("calibrate"), "{stderr}");

    let (code, _, _) = bin(&fx, &["calibrate"]);
    assert_eq!(code, 0);
    let (code, stdout, _) = bin(&fx, &["evaluate", "--robustness"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("jpeg q50"));

    // pick one image the library places inside and one it places outside
    let lines = pipeline::cli_verify(&fx.config(), None, &fx.root.join("images")).unwrap();
    let pick = |inside: bool| {
        lines
            .iter()
            .find(|l| l.result.as_ref().is_ok_and(|v| v.inside == inside))
            .map(|l| l.path.clone())
            .expect("need both an inside and an outside image")
    };
    let (inside, outside) = (pick(true), pick(false));
    let (code, stdout, _) = bin(&fx, &["verify", "--input", inside.to_str().unwrap()]);
    assert_eq!((code, stdout.matches("INSIDE").count()), (0, 1), "{stdout}");
    let mixed = fx.root.join("mixed");
    std::fs::create_dir(&mixed).unwrap();
    std::fs::copy(&inside, mixed.join("a.png")).unwrap();
    std::fs::copy(&outside, mixed.join("b.png")).unwrap();
    let (code, stdout, _) = bin(&fx, &["verify", "--input", mixed.to_str().unwrap()]);
    assert_eq!(code, 2, "{stdout}");
    assert!(stdout.contains("INSIDE") && stdout.contains("OUTSIDE"), "{stdout}");

    std::fs::write(mixed.join("c.png"), b"broken").unwrap();
    let (code, stdout, _) = bin(&fx, &["verify", "--input", mixed.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stdout.contains("ERROR"), "{stdout}");
}

#[test]
fn seed_flag_overrides_config() {
    let fx = Fixture::new();
    let (code, _, _) = bin(&fx, &["augment", "--seed", "99"]);
    assert_eq!(code, 0);
    let with_flag = std::fs::read(fx.artist_dir().join(pipeline::AUGMENTED_MANIFEST)).unwrap();
    let (code, _, _) = bin(&fx, &["augment"]);
    assert_eq!(code, 0);
    let without = std::fs::read(fx.artist_dir().join(pipeline::AUGMENTED_MANIFEST)).unwrap();
    assert_ne!(with_flag, without);
}
