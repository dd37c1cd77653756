//! Adam training with step decay, interleaved paired / text-only batches,
//! per-epoch validation R@1 and best-model retention.

mod adam;
mod checkpoint;

pub use adam::{lr_schedule, AdamHyper, AdamSlot, AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointState, RngState, FORMAT_VERSION,
    MAGIC,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{make_batches, Batch, BatchMode, CorpusError, TokenizedRecipe};
use crate::diffcore::{ParamId, Tape, Tensor};
use crate::encoders::{ModelConfig, ModelError, ModelParams};
use crate::losses::{pair_loss, recipe_component_loss, total_loss, LossConfig, LossError};
use crate::retrieval::{evaluate, Direction, MissingSpec, RetrievalError};

/// Stream offsets that keep the independent random sequences apart.
const TEXT_STREAM: u64 = 1 << 32;
const DROPOUT_SALT: u64 = 0x5eed_d80f;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training data has no paired samples")]
    NoPairedData,
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("gradient shape does not match parameter {0:?}")]
    GradientShape(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Number of paired and text-only batches per interleave cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRatio {
    pub paired: usize,
    pub text: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size_paired: usize,
    pub batch_size_text: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mix: MixRatio,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Interleave text-only batches (trained with the component loss only).
    pub use_text_only: bool,
    pub enable_rec_loss: bool,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Validation ranking size, capped at the validation set size.
    pub val_ranking_size: usize,
    pub val_groups: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 30,
            batch_size_paired: 128,
            batch_size_text: 256,
            epochs: 90,
            seed: 0,
            mix: MixRatio { paired: 1, text: 1 },
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            use_text_only: true,
            enable_rec_loss: true,
            grad_clip: None,
            val_ranking_size: 1000,
            val_groups: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must lie in (0, 1] and lr_decay_every be positive");
        }
        if self.batch_size_paired < 2 || self.batch_size_text < 2 {
            return bad("batch sizes must be at least 2 for in-batch negatives");
        }
        if self.epochs == 0 || self.val_ranking_size == 0 || self.val_groups == 0 {
            return bad("epochs, val_ranking_size and val_groups must be positive");
        }
        if self.mix.paired == 0 || (self.use_text_only && self.mix.text == 0) {
            return bad("mix ratio entries must be positive");
        }
        if self.loss.margin.is_nan() || self.loss.margin < 0.0 {
            return bad("margin must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.use_text_only && !(self.enable_rec_loss && self.loss.text_only.beta > 0.0) {
            return bad(
                "text-only batches need the component loss (enable_rec_loss with beta > 0)",
            );
        }
        if self.use_text_only && self.model.components.set().len() < 2 {
            return bad("text-only batches need at least two enabled components");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr, self.lr_decay, self.lr_decay_every, epoch)
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_R1")]
    pub val_r1: f64,
}

/// Reshuffling cursor over text-only batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCursor {
    pub round: u64,
    pub position: usize,
}

/// Training session over borrowed, tokenized data.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    params: ModelParams<f32>,
    optim: AdamState<f32>,
    train: &'a [TokenizedRecipe],
    val: Vec<&'a TokenizedRecipe>,
    text_batches: Vec<Batch<'a>>,
    cursor: TextCursor,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
    best: Option<(usize, f64, ModelParams<f32>)>,
    history: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    /// Validation uses the paired records of `val`, or of `train` when
    /// `val` has none.
    pub fn new(
        cfg: TrainConfig,
        vocab_size: usize,
        train: &'a [TokenizedRecipe],
        val: &'a [TokenizedRecipe],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = ModelParams::new(cfg.model.clone(), vocab_size, cfg.seed)?;
        Self::with_params(cfg, params, train, val)
    }

    /// Starts from existing parameters.
    pub fn with_params(
        cfg: TrainConfig,
        params: ModelParams<f32>,
        train: &'a [TokenizedRecipe],
        val: &'a [TokenizedRecipe],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if !train.iter().any(TokenizedRecipe::is_paired) {
            return Err(TrainError::NoPairedData);
        }
        let mut val: Vec<&TokenizedRecipe> = val.iter().filter(|r| r.is_paired()).collect();
        if val.is_empty() {
            val = train.iter().filter(|r| r.is_paired()).collect();
        }
        let dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
        let mut t = Self {
            cfg,
            params,
            optim: AdamState::default(),
            train,
            val,
            text_batches: Vec::new(),
            cursor: TextCursor::default(),
            dropout_rng,
            epoch: 0,
            best: None,
            history: Vec::new(),
        };
        t.reshuffle_text()?;
        Ok(t)
    }

    fn has_text(&self) -> bool {
        self.cfg.use_text_only && self.train.iter().any(|r| !r.is_paired())
    }

    fn reshuffle_text(&mut self) -> Result<(), TrainError> {
        if !self.has_text() {
            self.text_batches.clear();
            return Ok(());
        }
        let available = self.train.iter().filter(|r| !r.is_paired()).count();
        let bs = self.cfg.batch_size_text.min(available);
        if bs < 2 {
            self.text_batches.clear();
            return Ok(());
        }
        self.text_batches = make_batches(
            self.train,
            bs,
            self.cfg.seed,
            TEXT_STREAM + self.cursor.round,
            BatchMode::TextOnly,
        )?;
        Ok(())
    }

    fn next_text_batch(&mut self) -> Result<Option<Batch<'a>>, TrainError> {
        if self.text_batches.is_empty() {
            return Ok(None);
        }
        if self.cursor.position >= self.text_batches.len() {
            self.cursor.round += 1;
            self.cursor.position = 0;
            self.reshuffle_text()?;
        }
        let b = self.text_batches[self.cursor.position].clone();
        self.cursor.position += 1;
        Ok(Some(b))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamState<f32> {
        &self.optim
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// `(epoch, R@1)` of the best validation score so far.
    pub fn best_score(&self) -> Option<(usize, f64)> {
        self.best.as_ref().map(|(e, r, _)| (*e, *r))
    }

    /// Parameters of the best epoch, or the current ones before any
    /// validation.
    pub fn best_params(&self) -> &ModelParams<f32> {
        self.best.as_ref().map_or(&self.params, |(_, _, p)| p)
    }

    /// Forward, backward and Adam update for one batch; returns the loss.
    pub fn train_step(&mut self, batch: &Batch<'_>, lr: f64) -> Result<f64, TrainError> {
        let cfg = &self.cfg;
        let margin = cfg.loss.margin as f32;
        let mut tape = Tape::<f32>::new();
        let rng = (cfg.model.dropout > 0.0).then_some(&mut self.dropout_rng);
        let recipes = self
            .params
            .forward_recipes(&mut tape, &batch.records, rng)?;
        let pair = match (&batch.image_features, batch.mode) {
            (Some(features), BatchMode::Paired) => {
                let f = tape.constant(features.clone());
                let images = self.params.forward_images(&mut tape, f);
                Some(pair_loss(&mut tape, images, recipes.recipe, margin)?)
            }
            _ => None,
        };
        let rec = if cfg.enable_rec_loss {
            let params = &self.params;
            recipe_component_loss(
                &mut tape,
                recipes.components,
                cfg.model.components.set(),
                margin,
                |t, target, source, x| params.project_var(t, target, source, x),
            )?
        } else {
            None
        };
        let terms = total_loss(&mut tape, pair, rec, &cfg.loss, batch.mode)?;
        let loss = tape.value(terms.total).item() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: self.epoch });
        }
        let mut grads = tape.backward(terms.total).into_param_grads(&tape);
        if let Some(clip) = cfg.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        self.optim.step(self.params.store_mut(), &grads, lr)?;
        Ok(loss)
    }

    /// One pass over the paired data with the configured interleave,
    /// followed by validation. Returns the epoch's history row.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        let available = self.train.iter().filter(|r| r.is_paired()).count();
        let bs = self.cfg.batch_size_paired.min(available);
        if bs < 2 {
            return Err(LossError::BatchTooSmall(bs).into());
        }
        let paired = make_batches(
            self.train,
            bs,
            self.cfg.seed,
            epoch as u64,
            BatchMode::Paired,
        )?;
        let mut total = 0.0;
        let mut steps = 0usize;
        for (i, batch) in paired.iter().enumerate() {
            total += self.train_step(batch, lr)?;
            steps += 1;
            if (i + 1) % self.cfg.mix.paired == 0 {
                for _ in 0..self.cfg.mix.text {
                    if let Some(tb) = self.next_text_batch()? {
                        total += self.train_step(&tb, lr)?;
                        steps += 1;
                    }
                }
            }
        }
        let val_r1 = self.validate()?;
        self.epoch += 1;
        if self.best.as_ref().is_none_or(|(_, r, _)| val_r1 > *r) {
            self.best = Some((epoch, val_r1, self.params.clone()));
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / steps as f64,
            val_r1,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} val R@1 {val_r1:.4}",
            record.train_loss
        );
        self.history.push(record);
        Ok(record)
    }

    /// Image-to-recipe R@1 of the current parameters on the validation
    /// records.
    pub fn validate(&self) -> Result<f64, TrainError> {
        let n = self.cfg.val_ranking_size.min(self.val.len());
        let report = evaluate(
            &self.params,
            &self.val,
            n,
            self.cfg.val_groups,
            self.cfg.seed,
            Direction::ImageToRecipe,
            MissingSpec::default(),
        )?;
        Ok(report.aggregate.r1)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<&[EpochRecord], TrainError> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }

    /// Checkpoint holding the best parameters together with the current
    /// optimizer and RNG state.
    pub fn checkpoint(&self, vocabulary: crate::corpus::Vocabulary) -> CheckpointState {
        CheckpointState {
            config: self.cfg.clone(),
            vocabulary,
            params: self.best_params().clone(),
            optimizer: self.optim.clone(),
            rng: RngState::capture(self.cfg.seed ^ DROPOUT_SALT, &self.dropout_rng),
            text_cursor: self.cursor,
            epoch: self.epoch,
            best_epoch: self.best_score().map(|(e, _)| e),
            best_val_r1: self.best_score().map(|(_, r)| r),
        }
    }
}

fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], clip: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = (clip / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains to completion and returns the trainer for inspection.
pub fn train<'a>(
    cfg: TrainConfig,
    vocab_size: usize,
    train: &'a [TokenizedRecipe],
    val: &'a [TokenizedRecipe],
) -> Result<Trainer<'a>, TrainError> {
    let mut t = Trainer::new(cfg, vocab_size, train, val)?;
    t.run()?;
    Ok(t)
}
