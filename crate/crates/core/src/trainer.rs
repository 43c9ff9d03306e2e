//! Mini-batch training of the adapters and temperature.
//!
//! Each epoch shuffles the training split with a seeded permutation, samples
//! one prompt per image and criterion (matching the image's label), takes an
//! Adam step on the total loss, and scores the validation split with
//! standard inference. The checkpoint with the highest validation mAP wins.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{loss_and_gradients_at, total_loss, AdapterModel, ContrastiveBatch, LOG_SCALE};
use crate::datamodel::{split_view, Dataset, FeatureRecord, Split, NUM_CRITERIA};
use crate::error::{Error, Result};
use crate::inference::{score_records, InferenceOptions, PreparedPrompts, Strategy};
use crate::io;
use crate::metrics::{evaluate_records, EvalOptions};
use crate::numerics::{DenseMatrix, ParamSet};
use crate::optim::{adam_step, cosine_lr, AdamHyper, AdamState};
use crate::promptbank::PromptBank;

pub const CHECKPOINT_SCHEMA: &str = "checkpoint-v1";

/// The only supported model-selection rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    ValMapStandard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_adapters: f64,
    pub lr_temp: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            lr_adapters: 1e-5,
            lr_temp: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            selection_metric: SelectionMetric::ValMapStandard,
        }
    }
}

impl TrainConfig {
    /// Learning rates may be zero, which freezes the corresponding group.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} < 2; the contrastive loss needs in-batch negatives",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, lr) in [("lr_adapters", self.lr_adapters), ("lr_temp", self.lr_temp)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} = {lr} must be finite and >= 0")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::Config(format!("adam_eps = {} must be positive", self.adam_eps)));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn to_json(&self) -> String {
        io::to_line(self)
    }
}

/// Everything needed to resume training. The shuffle and prompt-sampling
/// streams are pure functions of `(config.seed, epoch, step)`, so the seed and
/// epoch counter are the whole random state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub model: AdapterModel,
    pub adam: AdamState,
    pub val_map: Option<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut s = io::to_line(self);
        s.push('\n');
        s
    }

    fn validate(&self) -> Result<()> {
        if self.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Schema(format!(
                "checkpoint schema {:?}, expected {CHECKPOINT_SCHEMA:?}",
                self.schema
            )));
        }
        self.config.validate()?;
        self.model.validate()?;
        let params = self.model.to_params();
        let shapes_ok = self.adam.m.len() == params.len()
            && self.adam.v.len() == params.len()
            && params
                .iter()
                .zip(self.adam.m.iter().zip(&self.adam.v))
                .all(|((_, _, p), (m, v))| m.shape() == p.shape() && v.shape() == p.shape());
        if !shapes_ok {
            return Err(Error::Schema("checkpoint optimizer state does not match the model".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    io::write_text(path, &checkpoint.to_json())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    ck.validate()?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss seen while stepping.
    pub mean_loss: f64,
    /// Loss of the end-of-epoch model over the train split in file order,
    /// with the same prompt draws every epoch.
    pub train_loss: f64,
    pub steps: usize,
    pub val_map: f64,
    pub log_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_map: f64,
}

impl TrainHistory {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("in-memory JSON serialization cannot fail");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: TrainHistory,
}

const SHUFFLE_STREAM: u64 = u64::MAX;
const FIXED_PASS_EPOCH: usize = usize::MAX;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `(seed, epoch, step)`.
fn stream_seed(seed: u64, epoch: usize, step: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ step)
}

pub struct Trainer<'a> {
    bank: &'a PromptBank,
    config: TrainConfig,
    train: Vec<&'a FeatureRecord>,
    val: Vec<&'a FeatureRecord>,
    params: ParamSet,
    adam: AdamState,
    epoch: usize,
    val_map: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, bank: &'a PromptBank, config: TrainConfig) -> Result<Self> {
        let model = AdapterModel::identity(dataset.dim);
        let params = model.to_params();
        let adam = AdamState::zeros_like(&params);
        Self::assemble(dataset, bank, config, params, adam, 0, None)
    }

    /// Continues from a checkpoint; the checkpoint's config is authoritative.
    pub fn resume(dataset: &'a Dataset, bank: &'a PromptBank, checkpoint: &Checkpoint) -> Result<Self> {
        checkpoint.validate()?;
        if checkpoint.model.dim() != dataset.dim {
            return Err(Error::Schema(format!(
                "checkpoint is {}-dimensional, features are {}-dimensional",
                checkpoint.model.dim(),
                dataset.dim
            )));
        }
        Self::assemble(
            dataset,
            bank,
            checkpoint.config.clone(),
            checkpoint.model.to_params(),
            checkpoint.adam.clone(),
            checkpoint.epoch,
            checkpoint.val_map,
        )
    }

    fn assemble(
        dataset: &'a Dataset,
        bank: &'a PromptBank,
        config: TrainConfig,
        params: ParamSet,
        adam: AdamState,
        epoch: usize,
        val_map: Option<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if bank.dim() != dataset.dim {
            return Err(Error::Schema(format!(
                "prompt bank is {}-dimensional, features are {}-dimensional",
                bank.dim(),
                dataset.dim
            )));
        }
        let train = split_view(dataset, Split::Train);
        let val = split_view(dataset, Split::Val);
        if train.len() < 2 {
            return Err(Error::Config(format!("train split has {} records; need at least 2", train.len())));
        }
        if val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        Ok(Self {
            bank,
            config,
            train,
            val,
            params,
            adam,
            epoch,
            val_map,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Batches per epoch after dropping a final batch smaller than 2.
    pub fn steps_per_epoch(&self) -> usize {
        let n = self.train.len();
        let b = self.config.batch_size;
        n / b + usize::from(n % b >= 2)
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    pub fn model(&self) -> Result<AdapterModel> {
        AdapterModel::from_params(&self.params)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config: self.config.clone(),
            epoch: self.epoch,
            model: self.model()?,
            adam: self.adam.clone(),
            val_map: self.val_map,
        })
    }

    fn build_batch(&self, members: &[&FeatureRecord], rng: &mut ChaCha8Rng) -> Result<ContrastiveBatch> {
        let images = DenseMatrix::from_rows(&members.iter().map(|r| r.embedding.as_slice()).collect::<Vec<_>>())?;
        let mut rows: Vec<Vec<&[f64]>> = (0..NUM_CRITERIA).map(|_| Vec::with_capacity(members.len())).collect();
        for r in members {
            for (c, col) in rows.iter_mut().enumerate() {
                col.push(self.bank.sample_training_prompt(c, r.labels[c], rng).embedding.as_slice());
            }
        }
        let prompts = rows.iter().map(|c| DenseMatrix::from_rows(c)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<_> = members.iter().map(|r| r.labels).collect();
        Ok(ContrastiveBatch {
            images,
            prompts,
            prompt_labels: labels.clone(),
            labels,
        })
    }

    pub fn validation_map(&self) -> Result<f64> {
        let model = self.model()?;
        let prompts = PreparedPrompts::new(&model, self.bank, None, InferenceOptions::default())?;
        let scores = score_records(&model, self.val.iter().copied(), &prompts, Strategy::Standard)?;
        Ok(evaluate_records(&scores, &self.val, Split::Val, EvalOptions::default())?.map)
    }

    /// Forward-only loss over the whole train split with epoch-independent
    /// batches and prompts, so epochs can be compared without sampling noise.
    pub fn fixed_train_loss(&self) -> Result<f64> {
        let model = self.model()?;
        let mut sum = 0.0;
        let mut steps = 0;
        for (b, members) in self.train.chunks(self.config.batch_size).enumerate() {
            if members.len() < 2 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, FIXED_PASS_EPOCH, b as u64));
            sum += total_loss(&model, &self.build_batch(members, &mut rng)?)?;
            steps += 1;
        }
        Ok(sum / steps as f64)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        if self.is_finished() {
            return Err(Error::Config(format!("all {} epochs already run", self.config.epochs)));
        }
        let epoch = self.epoch;
        let mut order = self.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, epoch, SHUFFLE_STREAM)));

        let total = self.total_steps();
        let hyper = self.config.hyper();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (b, members) in order.chunks(self.config.batch_size).enumerate() {
            if members.len() < 2 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, epoch, b as u64));
            let batch = self.build_batch(members, &mut rng)?;
            let (loss, grads) = loss_and_gradients_at(&self.params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss at epoch {} batch {b}", epoch + 1),
                });
            }
            let step = self.adam.step as usize;
            let lrs: Vec<f64> = self
                .params
                .ids()
                .map(|id| {
                    let lr0 = if id == LOG_SCALE { self.config.lr_temp } else { self.config.lr_adapters };
                    cosine_lr(step, total, lr0)
                })
                .collect();
            adam_step(&mut self.params, &grads, &mut self.adam, &lrs, hyper).map_err(|e| Error::NonFiniteGradient {
                epoch: epoch + 1,
                batch: b,
                param: e.param,
            })?;
            loss_sum += loss;
            steps += 1;
        }
        self.epoch += 1;
        let val_map = self.validation_map()?;
        self.val_map = Some(val_map);
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: loss_sum / steps as f64,
            train_loss: self.fixed_train_loss()?,
            steps,
            val_map,
            log_scale: self.params.get(LOG_SCALE).data()[0],
        })
    }

    /// Runs the remaining epochs, keeping the checkpoint with the best
    /// validation mAP (earliest on ties).
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut epochs = Vec::new();
        let mut best: Option<Checkpoint> = None;
        while !self.is_finished() {
            let stats = self.run_epoch()?;
            if best.as_ref().is_none_or(|b| b.val_map.is_none_or(|m| stats.val_map > m)) {
                best = Some(self.checkpoint()?);
            }
            epochs.push(stats);
        }
        let last = self.checkpoint()?;
        let best = best.unwrap_or_else(|| last.clone());
        Ok(TrainOutcome {
            history: TrainHistory {
                epochs,
                best_epoch: best.epoch,
                best_val_map: best.val_map.unwrap_or(f64::NAN),
            },
            best,
            last,
        })
    }
}

pub fn train(dataset: &Dataset, bank: &PromptBank, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, bank, config)?.run()
}
