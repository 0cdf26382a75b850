//! The `pfiqa` command line: argument parsing, run directories and subcommands.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pfiqa_autograd::io::save_tensors;
use pfiqa_core::data::manifest::decode_image;
use pfiqa_core::data::{collate, crop_pair, eval_crop_offsets, load_dataset, synthesize_corpus};
use pfiqa_core::datamodel::validate_sample;
use pfiqa_core::metrics::scatter_tsv;
use pfiqa_core::trainer::{
    evaluate, load_checkpoint, run_ablation_suite, run_protocol, save_checkpoint, AblationAxis, QualityScorer,
};
use pfiqa_core::{ErrorClass, ExperimentConfig, PfiqaError, Pfiqa, QualityPrediction, RgbImage, Sample};

const PRECEDENCE: &str = "Settings resolve as command-line flag > config file > built-in default.\n\
Every output of a command goes into one new directory under --out-dir, named\n\
from the resolved config's hash and a UTC timestamp.\n\n\
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "pfiqa", version, about = "Quality assessment for super-resolved images", after_help = PRECEDENCE)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, shuffling, splits and the synthetic corpus.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Also write predicted-vs-MOS pairs for plotting.
    #[arg(long, global = true)]
    pub emit_scatter: bool,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Dataset root directory (overrides `dataset.root`).
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the repeated split protocol and save the last model.
    Train,
    /// Score every sample of the configured dataset with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score one SR image against its LR source.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        scale: f64,
        /// Write the score, weight and difference maps of every crop.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Run one ablation table: branches, fusion or finetune.
    Ablate {
        #[arg(long)]
        axis: String,
    },
    /// Write the configured synthetic corpus as a manifest dataset.
    Synth,
}

/// Bad arguments that clap cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<PfiqaError>()) {
        Some(e) => match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        },
        None => 2,
    }
}

/// Parse `args` (program name first), run the command and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.common.device != "cpu" {
        return Err(UsageError(format!("device {:?} is not available; use cpu", cli.common.device)).into());
    }
    match &cli.command {
        Command::Train => cmd_train(&cli.common),
        Command::Eval { checkpoint } => cmd_eval(&cli.common, checkpoint),
        Command::Predict {
            checkpoint,
            sr,
            lr,
            scale,
            dump_maps,
        } => cmd_predict(&cli.common, checkpoint, sr, lr, *scale, *dump_maps),
        Command::Ablate { axis } => cmd_ablate(&cli.common, axis),
        Command::Synth => cmd_synth(&cli.common),
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.split_seed = seed;
        cfg.dataset.synthetic.seed = seed;
    }
    if let Some(e) = common.epochs {
        cfg.optimizer.max_epochs = e;
    }
    if let Some(r) = common.repeats {
        cfg.n_repeats = r;
    }
    if let Some(lr) = common.learning_rate {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(root) = &common.data_root {
        cfg.dataset.root = Some(root.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_toml_string()?.as_bytes());
    Ok(hex::encode(&digest[..6]))
}

/// Create `out_dir/<hash>-<timestamp>`, never reusing an existing directory.
pub fn create_run_dir(out_dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = format!("{}-{}", config_hash(cfg)?, chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ"));
    for n in 0.. {
        let name = if n == 0 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("directory suffixes are unbounded")
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let samples = load_dataset(&cfg.dataset)?;
    let dir = create_run_dir(&common.out_dir, &cfg)?;
    cfg.save(&dir.join("config.toml"))?;
    let out = run_protocol(&cfg, &samples)?;
    write(&dir, "report.tsv", out.report.to_tsv())?;
    write(&dir, "report.json", out.report.to_json())?;
    write(&dir, "splits.json", serde_json::to_string_pretty(&out.splits)?)?;
    for (r, log) in out.logs.iter().enumerate() {
        write(&dir, &format!("train_log_{}.tsv", r + 1), log.to_text())?;
    }
    if common.emit_scatter {
        for (r, e) in out.evaluations.iter().enumerate() {
            write(&dir, &format!("scatter_{}.tsv", r + 1), scatter_tsv(&e.predictions, &e.mos)?)?;
        }
    }
    if let (Some(model), Some(split)) = (&out.last_model, out.splits.last()) {
        let epochs = cfg.optimizer.max_epochs;
        let steps = epochs * split.train.len().div_ceil(cfg.optimizer.batch_size);
        save_checkpoint(&dir.join("model.safetensors"), model, epochs, steps)?;
    }
    print!("{}", out.report.to_tsv());
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let mut dataset = match &common.config {
        Some(_) => resolve_config(common)?.dataset,
        None => model.config.dataset.clone(),
    };
    if let Some(root) = &common.data_root {
        dataset.root = Some(root.clone());
    }
    let samples = load_dataset(&dataset)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let e = evaluate(&model, &samples, &idx, model.config.logistic_plcc)?;
    let dir = create_run_dir(&common.out_dir, &model.config)?;
    let tsv = format!("plcc\tsrcc\tn\n{:.6}\t{:.6}\t{}\n", e.report.plcc, e.report.srcc, e.report.n_samples);
    write(&dir, "eval.tsv", &tsv)?;
    write(&dir, "eval.json", serde_json::to_string_pretty(&e.report)?)?;
    if common.emit_scatter {
        write(&dir, "scatter.tsv", scatter_tsv(&e.predictions, &e.mos)?)?;
    }
    print!("{tsv}");
    println!("run directory: {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    sr: &'a Path,
    lr: &'a Path,
    scale: f64,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    maps: Option<PathBuf>,
}

#[derive(Serialize)]
struct CropDump {
    top: usize,
    left: usize,
    prediction: QualityPrediction,
    diff_global_max_abs: Option<f32>,
    diff_local_max_abs: Option<f32>,
}

fn max_abs(t: &pfiqa_autograd::Tensor) -> Option<f32> {
    (t.numel() > 0).then(|| t.data().iter().fold(0.0f32, |m, v| m.max(v.abs())))
}

fn load_pair(sr: &Path, lr: &Path, scale: f64, crop: usize) -> Result<Sample> {
    let sr_image = decode_image(sr)?;
    let (h, w) = sr_image.dims();
    if h < crop || w < crop {
        return Err(PfiqaError::Resolution {
            source_id: sr.display().to_string(),
            height: h,
            width: w,
            min: crop,
        }
        .into());
    }
    let lr_image: RgbImage = decode_image(lr)?;
    Ok(validate_sample(Sample {
        sr_image,
        lr_image_upsampled: lr_image.resize_bilinear(h, w),
        scale_factor: scale,
        mos: None,
        dataset_id: "cli".into(),
        content_id: lr.display().to_string(),
        method_id: sr.display().to_string(),
    })?)
}

fn cmd_predict(common: &Common, checkpoint: &Path, sr: &Path, lr: &Path, scale: f64, dump_maps: bool) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let sample = load_pair(sr, lr, scale, model.input_size())?;
    let score = model.score_sample(&sample)?;
    let maps = if dump_maps {
        let dir = create_run_dir(&common.out_dir, &model.config)?;
        dump_crop_maps(&model, &sample, &dir)?;
        Some(dir)
    } else {
        None
    };
    let record = ScoreRecord {
        sr,
        lr,
        scale,
        score,
        maps,
    };
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

/// `maps.json` with the four maps of each evaluation crop, plus the raw difference features.
fn dump_crop_maps(model: &Pfiqa, sample: &Sample, dir: &Path) -> Result<()> {
    let crop = model.input_size();
    let (h, w) = sample.sr_image.dims();
    let offsets = eval_crop_offsets(h, w, crop)?;
    let inputs = offsets
        .iter()
        .map(|&(top, left)| crop_pair(sample, top, left, crop, false))
        .collect::<pfiqa_core::Result<Vec<_>>>()?;
    let b = collate(&inputs)?;
    let dumps = model.predict(&b.sr, &b.lr, &b.scales)?;
    let mut records = Vec::new();
    let mut tensors = Vec::new();
    for (i, (d, &(top, left))) in dumps.into_iter().zip(&offsets).enumerate() {
        if let Some(diff) = &d.diff {
            tensors.push((format!("crop{i}.diff_global"), diff.global_feat.clone()));
            tensors.push((format!("crop{i}.diff_local"), diff.local_feat.clone()));
        }
        records.push(CropDump {
            top,
            left,
            diff_global_max_abs: d.diff.as_ref().and_then(|f| max_abs(&f.global_feat)),
            diff_local_max_abs: d.diff.as_ref().and_then(|f| max_abs(&f.local_feat)),
            prediction: d.prediction,
        });
    }
    write(dir, "maps.json", serde_json::to_string(&records)?)?;
    if !tensors.is_empty() {
        let refs: Vec<(String, &pfiqa_autograd::Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(&dir.join("diff_features.safetensors"), &refs, Default::default())?;
    }
    Ok(())
}

fn cmd_ablate(common: &Common, axis: &str) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let cfg = resolve_config(common)?;
    let samples = load_dataset(&cfg.dataset)?;
    let dir = create_run_dir(&common.out_dir, &cfg)?;
    cfg.save(&dir.join("config.toml"))?;
    let table = run_ablation_suite(&cfg, &samples, axis)?;
    write(&dir, &format!("ablation_{}.tsv", axis.name()), table.to_tsv())?;
    write(&dir, &format!("ablation_{}.json", axis.name()), serde_json::to_string_pretty(&table)?)?;
    print!("{}", table.to_tsv());
    println!("run directory: {}", dir.display());
    Ok(())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .context("image buffer size")?;
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let corpus = synthesize_corpus(&cfg.dataset.synthetic)?;
    let dir = create_run_dir(&common.out_dir, &cfg)?;
    let root = dir.join("corpus");
    fs::create_dir_all(root.join("sr"))?;
    fs::create_dir_all(root.join("lr"))?;
    let mut manifest = String::from("# sr\tlr\tscale\tlabel\tcontent\tmethod\n");
    for (i, s) in corpus.iter().enumerate() {
        let sr = format!("sr/{i:05}.png");
        let lr = format!("lr/{}_x{}.png", s.content_id, s.scale_factor);
        save_png(&s.sr_image, &root.join(&sr))?;
        if !root.join(&lr).exists() {
            save_png(&s.lr_image_upsampled, &root.join(&lr))?;
        }
        let label = s.mos.expect("synthetic samples are labelled");
        manifest += &format!("{sr}\t{lr}\t{}\t{label}\t{}\t{}\n", s.scale_factor, s.content_id, s.method_id);
    }
    write(&root, "manifest.tsv", manifest)?;
    println!("{} samples written to {}", corpus.len(), root.display());
    Ok(())
}
