//! Training, evaluation, the repeated-split protocol, ablations and checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use pfiqa_autograd::io::{load_tensors, save_tensors};
use pfiqa_autograd::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackboneTrainable, ExperimentConfig, FusionMode};
use crate::data::{collate, eval_crop_offsets, make_splits, sample_rng, train_transform, transform::crop_pair, Split};
use crate::datamodel::Sample;
use crate::error::{PfiqaError, Result};
use crate::metrics::{EvalReport, ProtocolReport};
use crate::model::Pfiqa;

const SHUFFLE_STREAM: u64 = 0x5f1e_0000_0000;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_plcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_srcc: Option<f64>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.8}\t{:.3e}\t{}\t{}",
            self.epoch,
            self.train_loss,
            self.learning_rate,
            opt(self.val_plcc),
            opt(self.val_srcc)
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tlr\tval_plcc\tval_srcc";

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }
}

/// Cosine decay from `base` to `min` over `epochs`, evaluated at `epoch` (0-based).
/// A base rate at or below the floor is used unchanged.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, epochs: usize) -> f64 {
    if base <= min || epochs <= 1 {
        return base;
    }
    let t = epoch.min(epochs) as f64 / epochs as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Pfiqa,
    optimizer: AdamW,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self::from_model(Pfiqa::new(config)?))
    }

    pub fn from_model(model: Pfiqa) -> Self {
        let optimizer = AdamW::new(AdamWConfig {
            weight_decay: model.config.optimizer.weight_decay as f32,
            ..AdamWConfig::default()
        });
        Trainer {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            log: TrainLog::default(),
        }
    }

    fn config(&self) -> &ExperimentConfig {
        &self.model.config
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let o = &self.config().optimizer;
        cosine_lr(o.learning_rate, o.min_learning_rate, epoch, o.max_epochs)
    }

    /// Shuffled batches of `indices` for `epoch`.
    pub fn batches(&self, indices: &[usize], epoch: usize) -> Vec<Vec<usize>> {
        let mut order = indices.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config().seed);
        rng.set_stream(SHUFFLE_STREAM | epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(self.config().optimizer.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// One optimizer step on `batch` (indices into `samples`); returns the batch loss.
    pub fn train_step(&mut self, samples: &[Sample], batch: &[usize], lr: f64) -> Result<f64> {
        let cfg = self.config();
        let crop = cfg.crop_size;
        let inputs = batch
            .iter()
            .map(|&i| {
                let s = &samples[i];
                if s.mos.is_none() {
                    return Err(PfiqaError::Range(format!("training sample {i} has no label")));
                }
                let mut rng = sample_rng(cfg.seed, self.epoch, i);
                train_transform(s, crop, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = collate(&inputs)?;
        let (loss_value, grads) = {
            let mut g = Graph::new(&self.model.store);
            let out = self.model.forward(&mut g, &b.sr, &b.lr, &b.scales)?;
            let loss = g.mse_loss(out.score, &b.mos)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(PfiqaError::NonFinite {
                    what: "loss",
                    epoch: self.epoch,
                    step: self.step,
                });
            }
            (value, g.backward(loss)?)
        };
        if !grads.is_finite() {
            return Err(PfiqaError::NonFinite {
                what: "gradient",
                epoch: self.epoch,
                step: self.step,
            });
        }
        self.optimizer.step(&mut self.model.store, &grads, lr as f32);
        self.step += 1;
        Ok(loss_value)
    }

    /// One pass over `indices`; appends to the log.
    pub fn train_epoch(&mut self, samples: &[Sample], indices: &[usize]) -> Result<EpochRecord> {
        if indices.is_empty() {
            return Err(PfiqaError::TooFew {
                what: "training samples",
                needed: 1,
                got: 0,
            });
        }
        let lr = self.learning_rate(self.epoch);
        let mut total = 0.0;
        for batch in self.batches(indices, self.epoch) {
            total += self.train_step(samples, &batch, lr)? * batch.len() as f64;
        }
        let rec = EpochRecord {
            epoch: self.epoch + 1,
            train_loss: total / indices.len() as f64,
            learning_rate: lr,
            val_plcc: None,
            val_srcc: None,
        };
        log::info!("epoch {} loss {:.6} lr {:.3e}", rec.epoch, rec.train_loss, lr);
        self.epoch += 1;
        self.log.records.push(rec.clone());
        Ok(rec)
    }

    /// Train until `max_epochs` epochs have been completed.
    pub fn fit(&mut self, samples: &[Sample], indices: &[usize]) -> Result<&TrainLog> {
        while self.epoch < self.config().optimizer.max_epochs {
            self.train_epoch(samples, indices)?;
        }
        Ok(&self.log)
    }
}

/// Train a fresh model on `indices` for the configured number of epochs.
pub fn train(config: &ExperimentConfig, samples: &[Sample], indices: &[usize]) -> Result<(Pfiqa, TrainLog)> {
    let mut t = Trainer::new(config)?;
    t.fit(samples, indices)?;
    Ok((t.model, t.log))
}

/// Anything that maps a sample to a quality score.
pub trait QualityScorer {
    fn score_sample(&self, sample: &Sample) -> Result<f64>;
}

impl QualityScorer for Pfiqa {
    /// Mean score over the four corner crops and the centre crop.
    fn score_sample(&self, s: &Sample) -> Result<f64> {
        let crop = self.input_size();
        let (h, w) = s.sr_image.dims();
        let offsets = eval_crop_offsets(h, w, crop)?;
        // small images give coinciding crops; score each window once
        let mut unique: Vec<(usize, usize)> = Vec::new();
        for o in offsets {
            if !unique.contains(&o) {
                unique.push(o);
            }
        }
        let inputs = unique
            .iter()
            .map(|&(top, left)| crop_pair(s, top, left, crop, false))
            .collect::<Result<Vec<_>>>()?;
        let b = collate(&inputs)?;
        let scores = self.score_batch(&b.sr, &b.lr, &b.scales)?;
        let total: f64 = offsets
            .iter()
            .map(|o| scores[unique.iter().position(|u| u == o).expect("listed")])
            .sum();
        Ok(total / offsets.len() as f64)
    }
}

/// Scores and labels of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<f64>,
    pub mos: Vec<f64>,
}

pub fn evaluate(scorer: &impl QualityScorer, samples: &[Sample], indices: &[usize], logistic: bool) -> Result<Evaluation> {
    if indices.len() < crate::metrics::MIN_SAMPLES {
        return Err(PfiqaError::TooFew {
            what: "test samples",
            needed: crate::metrics::MIN_SAMPLES,
            got: indices.len(),
        });
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut mos = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &samples[i];
        mos.push(s.mos.ok_or_else(|| PfiqaError::Range(format!("test sample {i} has no label")))?);
        predictions.push(scorer.score_sample(s)?);
    }
    Ok(Evaluation {
        report: EvalReport::compute(&predictions, &mos, logistic)?,
        predictions,
        mos,
    })
}

/// Everything produced by [`run_protocol`].
#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub report: ProtocolReport,
    pub splits: Vec<Split>,
    pub evaluations: Vec<Evaluation>,
    pub logs: Vec<TrainLog>,
    /// Model trained on the final split.
    pub last_model: Option<Pfiqa>,
}

/// Train and evaluate once per split; report per-repeat and mean correlations.
pub fn run_protocol(config: &ExperimentConfig, samples: &[Sample]) -> Result<ProtocolOutcome> {
    config.validate()?;
    let splits = make_splits(
        samples,
        config.split_seed,
        config.train_ratio,
        config.n_repeats,
        config.grouped_split,
    )?;
    let mut evaluations = Vec::with_capacity(splits.len());
    let mut logs = Vec::with_capacity(splits.len());
    let mut last_model = None;
    for (r, split) in splits.iter().enumerate() {
        log::info!("repeat {}/{}: {} train, {} test", r + 1, splits.len(), split.train.len(), split.test.len());
        let (model, log) = train(config, samples, &split.train)?;
        evaluations.push(evaluate(&model, samples, &split.test, config.logistic_plcc)?);
        logs.push(log);
        last_model = Some(model);
    }
    let report = ProtocolReport::from_repeats(evaluations.iter().map(|e| e.report.clone()).collect())?;
    Ok(ProtocolOutcome {
        report,
        splits,
        evaluations,
        logs,
        last_model,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Which branches and whether the scale factor is used.
    Branches,
    /// Which features and how they are fused.
    Fusion,
    /// Which backbones are updated.
    Finetune,
}

impl FromStr for AblationAxis {
    type Err = PfiqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branches" => Ok(AblationAxis::Branches),
            "fusion" => Ok(AblationAxis::Fusion),
            "finetune" => Ok(AblationAxis::Finetune),
            other => Err(PfiqaError::Config(format!(
                "unknown ablation axis {other:?}; expected branches, fusion or finetune"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Branches => "branches",
            AblationAxis::Fusion => "fusion",
            AblationAxis::Finetune => "finetune",
        }
    }

    /// Row labels and the configuration of each row, in table order.
    pub fn rows(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Branches => [(true, false, false), (false, true, false), (true, true, false), (true, true, true)]
                .iter()
                .zip(["(a)", "(b)", "(c)", "(d)"])
                .map(|(&(p, f, s), label)| {
                    let c = with(&|c| {
                        c.ablation.enable_perception_branch = p;
                        c.ablation.enable_fidelity_branch = f;
                        c.ablation.enable_scale_factor = s;
                    });
                    (label.to_string(), c)
                })
                .collect(),
            AblationAxis::Fusion => [
                ("ResNet-only", FusionMode::ResnetOnly),
                ("ViT-only", FusionMode::VitOnly),
                ("Concatenation", FusionMode::Concat),
                ("Adaptive Fusion", FusionMode::Adaptive),
            ]
            .iter()
            .map(|&(label, mode)| (label.to_string(), with(&|c| c.ablation.fusion_mode = mode)))
            .collect(),
            AblationAxis::Finetune => [
                ("(a)", BackboneTrainable::Resnet),
                ("(b)", BackboneTrainable::Vit),
                ("(c)", BackboneTrainable::Both),
                ("(d)", BackboneTrainable::None),
            ]
            .iter()
            .map(|&(label, t)| (label.to_string(), with(&|c| c.ablation.backbone_trainable = t)))
            .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub trainable_params: usize,
    pub report: ProtocolReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row\ttrainable_params\tplcc\tsrcc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}",
                r.label, r.trainable_params, r.report.mean_plcc, r.report.mean_srcc
            );
        }
        out
    }
}

/// Run the protocol for every row of `axis`.
pub fn run_ablation_suite(base: &ExperimentConfig, samples: &[Sample], axis: AblationAxis) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, config) in axis.rows(base) {
        log::info!("ablation {} row {label}", axis.name());
        let trainable_params = Pfiqa::new(&config)?.trainable_params();
        let outcome = run_protocol(&config, samples)?;
        rows.push(AblationRow {
            label,
            trainable_params,
            report: outcome.report,
        });
    }
    Ok(AblationTable { axis, rows })
}

/// Hex sha256 over the names and values of the parameters selected by `filter`.
pub fn param_checksum(store: &ParamStore, filter: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| filter(&p.name)) {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

const META_CONFIG: &str = "config_toml";
const META_EPOCH: &str = "epoch";
const META_STEP: &str = "step";
const META_SEED: &str = "rng_seed";

/// Everything in a checkpoint besides the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    /// Seed from which shuffling and augmentation streams are derived.
    pub rng_seed: u64,
}

fn saved_in_checkpoint(store: &ParamStore, name: &str) -> bool {
    let trainable = store.id(name).map(|id| store.get(id).trainable).unwrap_or(false);
    !Pfiqa::is_backbone_param(name) || trainable
}

/// Write the non-frozen parameters together with the config, epoch and rng seed.
pub fn save_checkpoint(path: &Path, model: &Pfiqa, epoch: usize, step: usize) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> = model
        .store
        .iter()
        .filter(|(_, p)| saved_in_checkpoint(&model.store, &p.name))
        .map(|(_, p)| (p.name.clone(), &p.value))
        .collect();
    let mut meta = HashMap::new();
    meta.insert(META_CONFIG.to_string(), model.config.to_toml_string()?);
    meta.insert(META_EPOCH.to_string(), epoch.to_string());
    meta.insert(META_STEP.to_string(), step.to_string());
    meta.insert(META_SEED.to_string(), model.config.seed.to_string());
    save_tensors(path, &tensors, meta)?;
    Ok(())
}

/// Rebuild the model described by a checkpoint and load its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Pfiqa, CheckpointMeta)> {
    if !path.is_file() {
        return Err(PfiqaError::MissingFile(path.to_path_buf()));
    }
    let file = load_tensors(path)?;
    let meta_str = |k: &str| {
        file.metadata
            .get(k)
            .ok_or_else(|| PfiqaError::Checkpoint(format!("missing metadata {k}")))
    };
    let parse = |k: &str| -> Result<u64> {
        meta_str(k)?
            .parse()
            .map_err(|_| PfiqaError::Checkpoint(format!("bad metadata {k}")))
    };
    let config = ExperimentConfig::from_toml_str(meta_str(META_CONFIG)?)?;
    let mut model = Pfiqa::new(&config)?;
    load_parameters(&mut model, &file.tensors)?;
    let meta = CheckpointMeta {
        epoch: parse(META_EPOCH)? as usize,
        step: parse(META_STEP)? as usize,
        rng_seed: parse(META_SEED)?,
    };
    Ok((model, meta))
}

/// Assign checkpoint tensors; every parameter the checkpoint should hold must be present.
pub fn load_parameters(model: &mut Pfiqa, tensors: &[(String, Tensor)]) -> Result<()> {
    let expected: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| saved_in_checkpoint(&model.store, &p.name))
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in &expected {
        if !tensors.iter().any(|(n, _)| n == name) {
            return Err(PfiqaError::Checkpoint(format!("checkpoint does not match config: {name} missing")));
        }
    }
    for (name, t) in tensors {
        let id = model
            .store
            .id(name)
            .ok_or_else(|| PfiqaError::Checkpoint(format!("checkpoint does not match config: unknown {name}")))?;
        if model.store.value(id).shape() != t.shape() {
            return Err(PfiqaError::Checkpoint(format!(
                "checkpoint does not match config: {name} is {:?}, model expects {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = t.clone();
    }
    model.feature_cache.clear();
    Ok(())
}
