use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfiqa_core::config::{DatasetFormat, SynthConfig};
use pfiqa_core::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        crop_size: 32,
        n_repeats: 1,
        ..Default::default()
    };
    c.model.feature_channels = 8;
    c.model.branch_channels = 8;
    c.model.scale_hidden = 8;
    c.model.score_hidden = 4;
    c.model.weight_hidden = 4;
    c.optimizer.max_epochs = 1;
    c.dataset.format = DatasetFormat::Synthetic;
    c.dataset.synthetic = SynthConfig {
        n_contents: 6,
        scales: vec![2.0],
        degradations: vec![0.0, 0.5, 1.0],
        image_size: 40,
        seed: 0,
    };
    c
}

fn pfiqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfiqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pfiqa")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.toml");
    cfg.save(&path).unwrap();
    path
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn noise_png(path: &Path, size: u32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = image::RgbImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    img.save(path).unwrap();
}

/// Trains the tiny config once and returns (tempdir, run dir).
fn trained_run() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("runs");
    let o = pfiqa(&["--config", s(&cfg), "--out-dir", s(&out), "--emit-scatter", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(&out);
    (tmp, run)
}

#[test]
fn train_writes_a_complete_run_directory() {
    let (_tmp, run) = trained_run();
    for f in ["config.toml", "report.tsv", "report.json", "splits.json", "train_log_1.tsv", "scatter_1.tsv", "model.safetensors"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let name = run.file_name().unwrap().to_str().unwrap();
    let hash = pfiqa_cli::config_hash(&tiny_config()).unwrap();
    assert!(name.starts_with(&format!("{hash}-")), "{name}");
}

#[test]
fn training_twice_gives_identical_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("runs{k}"));
        let o = pfiqa(&["--config", s(&cfg), "--out-dir", s(&out), "train"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(fs::read(only_run_dir(&out).join("report.tsv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("runs");
    let o = pfiqa(&["--config", s(&cfg), "--out-dir", s(&out), "--seed", "7", "--epochs", "2", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = ExperimentConfig::load(&only_run_dir(&out).join("config.toml")).unwrap();
    assert_eq!(saved.seed, 7);
    assert_eq!(saved.split_seed, 7);
    assert_eq!(saved.dataset.synthetic.seed, 7);
    assert_eq!(saved.optimizer.max_epochs, 2);
    assert_eq!(saved.crop_size, 32);
}

#[test]
fn missing_dataset_root_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let mut c = tiny_config();
    c.dataset.format = DatasetFormat::Manifest;
    c.dataset.root = Some(tmp.path().join("nowhere"));
    let cfg = write_config(tmp.path(), &c);
    let o = pfiqa(&["--config", s(&cfg), "--out-dir", s(&tmp.path().join("runs")), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing file"));
}

#[test]
fn unknown_device_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = pfiqa(&["--device", "gpu", "--out-dir", s(&tmp.path().join("runs")), "synth"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_ablation_axis_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let o = pfiqa(&["--config", s(&cfg), "--out-dir", s(&tmp.path().join("runs")), "ablate", "--axis", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(pfiqa(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(pfiqa(&["predict"]).status.code(), Some(1));
}

#[test]
fn help_documents_precedence_and_exit_codes() {
    let o = pfiqa(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("flag > config file > built-in default"), "{text}");
    assert!(text.contains("3 numeric failure"), "{text}");
}

#[test]
fn predict_is_repeatable_and_dumps_zero_difference_for_identical_inputs() {
    let (tmp, run) = trained_run();
    let ckpt = run.join("model.safetensors");
    let img = tmp.path().join("img.png");
    noise_png(&img, 48, 3);
    let maps_out = tmp.path().join("maps");
    let args = |dump: bool| {
        let mut a = vec!["--out-dir", s(&maps_out), "predict", "--checkpoint", s(&ckpt), "--sr", s(&img), "--lr", s(&img), "--scale", "2"];
        if dump {
            a.push("--dump-maps");
        }
        a
    };
    let a = pfiqa(&args(false));
    let b = pfiqa(&args(true));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let ra: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let rb: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(ra["score"], rb["score"]);
    let score = ra["score"].as_f64().unwrap();
    assert!(score.is_finite());

    let maps: serde_json::Value =
        serde_json::from_slice(&fs::read(only_run_dir(&maps_out).join("maps.json")).unwrap()).unwrap();
    let crops = maps.as_array().unwrap();
    assert!(!crops.is_empty());
    for c in crops {
        assert_eq!(c["diff_global_max_abs"].as_f64(), Some(0.0));
        assert_eq!(c["diff_local_max_abs"].as_f64(), Some(0.0));
    }
}

#[test]
fn predict_rejects_images_smaller_than_the_crop() {
    let (tmp, run) = trained_run();
    let img = tmp.path().join("small.png");
    noise_png(&img, 16, 4);
    let o = pfiqa(&[
        "--out-dir",
        s(&tmp.path().join("p")),
        "predict",
        "--checkpoint",
        s(&run.join("model.safetensors")),
        "--sr",
        s(&img),
        "--lr",
        s(&img),
        "--scale",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("need at least 32x32"));
}

#[test]
fn eval_scores_the_training_dataset() {
    let (tmp, run) = trained_run();
    let out = tmp.path().join("eval");
    let o = pfiqa(&["--out-dir", s(&out), "--emit-scatter", "eval", "--checkpoint", s(&run.join("model.safetensors"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = only_run_dir(&out);
    let tsv = fs::read_to_string(dir.join("eval.tsv")).unwrap();
    let row: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[2], "18");
    let scatter = fs::read_to_string(dir.join("scatter.tsv")).unwrap();
    assert!(scatter.lines().count() >= 18);
}

#[test]
fn synthesized_corpus_trains_through_the_manifest_loader() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("synth");
    let o = pfiqa(&["--config", s(&cfg_path), "--out-dir", s(&out), "synth"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let corpus = only_run_dir(&out).join("corpus");
    let manifest = fs::read_to_string(corpus.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 18);

    let mut c = tiny_config();
    c.dataset.format = DatasetFormat::Manifest;
    c.dataset.root = Some(corpus);
    let cfg_path = write_config(tmp.path(), &c);
    let runs = tmp.path().join("runs");
    let o = pfiqa(&["--config", s(&cfg_path), "--out-dir", s(&runs), "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(only_run_dir(&runs).join("report.tsv").is_file());
}

#[test]
fn run_directories_are_never_reused() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let a = pfiqa_cli::create_run_dir(tmp.path(), &cfg).unwrap();
    let b = pfiqa_cli::create_run_dir(tmp.path(), &cfg).unwrap();
    assert_ne!(a, b);
    assert!(a.is_dir() && b.is_dir());
}
