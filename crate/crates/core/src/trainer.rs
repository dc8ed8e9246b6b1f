//! From-scratch (FS) and fine-tuning (FT) training regimens.
//!
//! Both regimens run the same loop: shuffled mini-batches, Adam, validation
//! after every epoch, early stopping on validation spatial accuracy with the
//! best parameters restored. They differ only in the starting weights.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::array::{SensorFrame, N_SENSORS};
use crate::dataset::{normalize, split_random, Dataset, NormStats, NormalizedDataset, SplitSpec, Splits};
use crate::metrics::spatial_accuracy;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{backward, forward_batch, init_params, loss, AdamConfig, AdamState, NetworkParams};
use crate::seed::{self, tag};
use crate::synth_eye::GazeSample;
use crate::{Error, Result, SubjectId};

/// Train/validation fractions of the pooled pre-training data.
pub const PRETRAIN_SPLIT: [f64; 3] = [0.85, 0.15, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// (written `"none"`) never stops early.
    #[serde(with = "patience_repr")]
    pub patience: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(with = "seed::serde_u64")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            batch_size: 32,
            max_epochs: 300,
            patience: Some(30),
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("Adam moments must lie in [0, 1) and epsilon be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, &[tag::INIT])
    }

    pub fn shuffle_seed(&self) -> u64 {
        seed::derive(self.seed, &[tag::SHUFFLE])
    }
}

mod patience_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Epochs(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => Repr::Epochs(*n),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Epochs(n) => Ok(Some(n)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("patience must be an integer or \"none\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation metrics of the starting weights.
    pub initial_val_loss: f64,
    pub initial_val_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the starting weights.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_accuracy(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(self.initial_val_accuracy, f64::min)
    }

    /// Validation accuracy after `epoch` epochs, 0 meaning the start.
    pub fn val_accuracy_at(&self, epoch: usize) -> Option<f64> {
        if epoch == 0 {
            Some(self.initial_val_accuracy)
        } else {
            self.epochs.get(epoch - 1).map(|e| e.val_accuracy)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regimen {
    #[serde(rename = "FS")]
    FromScratch,
    #[serde(rename = "FT")]
    FineTune,
}

impl Regimen {
    pub fn label(self) -> &'static str {
        match self {
            Regimen::FromScratch => "FS",
            Regimen::FineTune => "FT",
        }
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub regimen: Regimen,
    pub subject: Option<SubjectId>,
    pub data_fraction: f64,
    #[serde(with = "seed::serde_u64")]
    pub train_seed: u64,
    #[serde(with = "seed::serde_u64")]
    pub init_seed: u64,
    #[serde(with = "seed::serde_u64")]
    pub shuffle_seed: u64,
    /// Subjects whose data produced the starting weights (FT only).
    pub pretrain_subjects: Vec<SubjectId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: NetworkParams,
    pub norm: NormStats,
    pub history: TrainHistory,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn predict(&self, frames: &[SensorFrame]) -> Result<Vec<GazeSample>> {
        let inputs: Vec<[f64; N_SENSORS]> = frames.iter().map(|f| self.norm.apply(&f.values)).collect();
        forward_batch(&self.params, &inputs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            norm: self.norm,
        }
    }

    /// Writes `<stem>.ckpt` and the matching `<stem>.manifest.toml`.
    pub fn save(&self, dir: &Path, stem: &str, config: &TrainConfig, dataset_hashes: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint().save(&dir.join(format!("{stem}.ckpt")))?;
        let manifest = RunManifest {
            provenance: self.provenance.clone(),
            config: *config,
            dataset_hashes: dataset_hashes.to_vec(),
            best_epoch: self.history.best_epoch,
            epochs_run: self.history.epochs.len(),
        };
        manifest.save(&dir.join(format!("{stem}.manifest.toml")))
    }
}

/// Everything needed to reproduce a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub provenance: Provenance,
    pub config: TrainConfig,
    pub dataset_hashes: Vec<String>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::parse(path, e.to_string()))
    }
}

fn evaluate(params: &NetworkParams, inputs: &[[f64; N_SENSORS]], truths: &[GazeSample]) -> Result<(f64, f64)> {
    let preds = forward_batch(params, inputs)?;
    Ok((loss(&preds, truths)?, spatial_accuracy(&preds, truths)?))
}

/// Shared FS/FT loop. Returns the best parameters and the full history.
pub fn train_loop(
    start: NetworkParams,
    data: &NormalizedDataset,
    splits: &Splits,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if splits.validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let (val_x, val_y) = data.gather(&splits.validation);
    let (initial_val_loss, initial_val_accuracy) = evaluate(&start, &val_x, &val_y)?;
    let mut history = TrainHistory {
        initial_val_loss,
        initial_val_accuracy,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best = start.clone();
    let mut best_acc = initial_val_accuracy;
    let mut params = start;
    let mut adam = AdamState::new(config.adam());
    let mut rng = seed::rng(config.shuffle_seed());
    let mut order = splits.train.clone();
    let mut since_best = 0;
    let mut batch_x = Vec::with_capacity(config.batch_size);
    let mut batch_y = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            batch_x.extend(chunk.iter().map(|&i| data.inputs[i]));
            batch_y.extend(chunk.iter().map(|&i| data.targets[i]));
            let (l, grads) = backward(&params, &batch_x, &batch_y)?;
            loss_sum += l * chunk.len() as f64;
            adam.step(&mut params, &grads);
        }
        let (val_loss, val_accuracy) = evaluate(&params, &val_x, &val_y)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_accuracy < best_acc {
            best_acc = val_accuracy;
            best.clone_from(&params);
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    Ok((best, history))
}

fn single_subject(dataset: &Dataset) -> Option<SubjectId> {
    match dataset.subject_ids().as_slice() {
        [id] => Some(*id),
        _ => None,
    }
}

/// Subject-specific training from random weights.
pub fn train_fs(dataset: &Dataset, splits: &Splits, config: &TrainConfig) -> Result<TrainedModel> {
    let data = normalize(dataset, &splits.train)?;
    let (params, history) = train_loop(init_params(config.init_seed()), &data, splits, config)?;
    Ok(TrainedModel {
        params,
        norm: data.stats,
        history,
        provenance: Provenance {
            regimen: Regimen::FromScratch,
            subject: single_subject(dataset),
            data_fraction: 1.0,
            train_seed: config.seed,
            init_seed: config.init_seed(),
            shuffle_seed: config.shuffle_seed(),
            pretrain_subjects: Vec::new(),
        },
    })
}

/// Out-of-subject data used to pre-train an FT model for `target`.
#[derive(Debug, Clone)]
pub struct PretrainPool {
    target: SubjectId,
    data: Dataset,
}

impl PretrainPool {
    /// Fails if any record belongs to `target`.
    pub fn new<'a>(target: SubjectId, datasets: impl IntoIterator<Item = &'a Dataset>) -> Result<PretrainPool> {
        let pool = PretrainPool {
            target,
            data: Dataset::concat(datasets),
        };
        pool.check_leakage()?;
        Ok(pool)
    }

    pub fn check_leakage(&self) -> Result<()> {
        if self.data.records().iter().any(|r| r.subject_id == self.target) {
            return Err(Error::Leakage { target: self.target });
        }
        Ok(())
    }

    pub fn target(&self) -> SubjectId {
        self.target
    }

    pub fn subject_ids(&self) -> BTreeSet<SubjectId> {
        self.data.records().iter().map(|r| r.subject_id).collect()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }
}

/// Trains one model on the whole pool (85/15 train/validation split).
pub fn pretrain_loso(pool: &PretrainPool, config: &TrainConfig) -> Result<NetworkParams> {
    pool.check_leakage()?;
    let seed = seed::derive(config.seed, &[tag::PRETRAIN]);
    let splits = split_random(pool.dataset(), &SplitSpec::random(PRETRAIN_SPLIT, seed))?;
    let data = normalize(pool.dataset(), &splits.train)?;
    let pool_config = TrainConfig { seed, ..*config };
    Ok(train_loop(init_params(pool_config.init_seed()), &data, &splits, &pool_config)?.0)
}

/// Same loop as [`train_fs`], started from `pretrained`.
pub fn fine_tune(
    pretrained: &NetworkParams,
    dataset: &Dataset,
    splits: &Splits,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if pretrained.len() != crate::nn::N_PARAMS {
        return Err(Error::ShapeMismatch(format!(
            "pretrained weights have {} parameters",
            pretrained.len()
        )));
    }
    let data = normalize(dataset, &splits.train)?;
    let (params, history) = train_loop(pretrained.clone(), &data, splits, config)?;
    Ok(TrainedModel {
        params,
        norm: data.stats,
        history,
        provenance: Provenance {
            regimen: Regimen::FineTune,
            subject: single_subject(dataset),
            data_fraction: 1.0,
            train_seed: config.seed,
            init_seed: config.init_seed(),
            shuffle_seed: config.shuffle_seed(),
            pretrain_subjects: Vec::new(),
        },
    })
}
