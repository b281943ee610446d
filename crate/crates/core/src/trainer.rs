//! Mini-batch SGD training with a step-decayed learning rate.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bag_model::{BagScoring, LossReduction};
use crate::config::parse_value;
use crate::corpus::{Bag, BagKeying, LabelSet};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::sgd_step;
use crate::tensor::Tensor;

/// Training hyperparameters. Defaults follow the reference setup for the
/// NYT corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_w: usize,
    pub d_p: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub max_len: usize,
    pub clip: usize,
    /// `None` picks the smallest multiple of `heads` not below `d_w + 2 d_p`.
    pub d_model: Option<usize>,
    pub ff_mult: usize,
    pub blocks: usize,
    pub ln_eps: f64,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_rate: f64,
    pub seed: u64,
    pub min_count: usize,
    pub clip_norm: Option<f64>,
    pub loss_reduction: LossReduction,
    pub bag_scoring: BagScoring,
    pub train_keying: BagKeying,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_w: 50,
            d_p: 5,
            heads: 8,
            batch_size: 100,
            lr: 0.05,
            dropout: 0.5,
            max_len: 100,
            clip: 100,
            d_model: None,
            ff_mult: 3,
            blocks: 1,
            ln_eps: 1e-6,
            epochs: 30,
            lr_decay_every: 20,
            lr_decay_rate: 0.1,
            seed: 1,
            min_count: 101,
            clip_norm: None,
            loss_reduction: LossReduction::Mean,
            bag_scoring: BagScoring::AttendedVector,
            train_keying: BagKeying::PairRelation,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in canonical order.
pub const TRAIN_KEYS: &[&str] = &[
    "d_w",
    "d_p",
    "heads",
    "batch_size",
    "lr",
    "dropout",
    "max_len",
    "clip",
    "d_model",
    "ff_mult",
    "blocks",
    "ln_eps",
    "epochs",
    "lr_decay_every",
    "lr_decay_rate",
    "seed",
    "min_count",
    "clip_norm",
    "loss_reduction",
    "bag_scoring",
    "train_keying",
];

impl TrainConfig {
    pub fn effective_d_model(&self) -> usize {
        self.d_model.unwrap_or_else(|| {
            let d = self.d_w + 2 * self.d_p;
            d.div_ceil(self.heads.max(1)) * self.heads.max(1)
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let d_model = self.effective_d_model();
        ModelConfig {
            vocab_size,
            d_w: self.d_w,
            d_p: self.d_p,
            clip: self.clip,
            d_model,
            heads: self.heads,
            d_ff: self.ff_mult * d_model,
            blocks: self.blocks,
            ln_eps: self.ln_eps,
            dropout: self.dropout,
            scoring: self.bag_scoring,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_w", self.d_w),
            ("d_p", self.d_p),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("clip", self.clip),
            ("ff_mult", self.ff_mult),
            ("blocks", self.blocks),
            ("lr_decay_every", self.lr_decay_every),
            ("min_count", self.min_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be a non-negative number, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lr_decay_rate.is_nan() || self.lr_decay_rate <= 0.0 {
            return Err(Error::Config("lr_decay_rate must be positive".into()));
        }
        if !self.effective_d_model().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads,
                self.effective_d_model()
            )));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt = |v: &str| !matches!(v, "auto" | "none" | "");
        match key {
            "d_w" => self.d_w = parse_value(key, value)?,
            "d_p" => self.d_p = parse_value(key, value)?,
            "heads" | "h" => self.heads = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "clip" => self.clip = parse_value(key, value)?,
            "d_model" => self.d_model = opt(value).then(|| parse_value(key, value)).transpose()?,
            "ff_mult" => self.ff_mult = parse_value(key, value)?,
            "blocks" => self.blocks = parse_value(key, value)?,
            "ln_eps" => self.ln_eps = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "lr_decay_rate" => self.lr_decay_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = opt(value).then(|| parse_value(key, value)).transpose()?,
            "loss_reduction" => self.loss_reduction = value.parse()?,
            "bag_scoring" => self.bag_scoring = value.parse()?,
            "train_keying" => self.train_keying = value.parse()?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text in [`TRAIN_KEYS`] order. Floats
    /// use the shortest round-tripping representation.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>, none: &str| v.unwrap_or_else(|| none.to_owned());
        vec![
            ("d_w", self.d_w.to_string()),
            ("d_p", self.d_p.to_string()),
            ("heads", self.heads.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_len", self.max_len.to_string()),
            ("clip", self.clip.to_string()),
            ("d_model", opt(self.d_model.map(|v| v.to_string()), "auto")),
            ("ff_mult", self.ff_mult.to_string()),
            ("blocks", self.blocks.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_rate", self.lr_decay_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("min_count", self.min_count.to_string()),
            ("clip_norm", opt(self.clip_norm.map(|v| v.to_string()), "none")),
            ("loss_reduction", self.loss_reduction.to_string()),
            ("bag_scoring", self.bag_scoring.to_string()),
            ("train_keying", self.train_keying.to_string()),
        ]
    }
}

/// `lr0 * rate ^ floor(epoch / every)` for a 0-based epoch index.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.lr_decay_every.max(1)) as i32;
    config.lr * config.lr_decay_rate.powi(steps)
}

/// Fresh parameters for `config`. Deterministic given the generator state.
pub fn init_params<R: Rng + ?Sized>(
    config: &TrainConfig,
    vocab_size: usize,
    labels: LabelSet,
    pretrained: Option<Tensor>,
    rng: &mut R,
) -> Result<Model> {
    config.validate()?;
    if let Some(t) = &pretrained {
        if t.dims2().1 != config.d_w {
            return Err(Error::DimensionMismatch {
                expected: config.d_w,
                found: t.dims2().1,
            });
        }
    }
    Model::init(config.model_config(vocab_size), labels, pretrained, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Loss log text: `epoch<TAB>mean_loss<TAB>lr` per line.
pub fn format_loss_log(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for e in log {
        let _ = writeln!(out, "{}\t{}\t{}", e.epoch, e.mean_loss, e.lr);
    }
    out
}

/// Owns the model and generator for a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, rng: ChaCha8Rng) -> Self {
        Trainer {
            config,
            model,
            rng,
            epoch: 0,
            log: Vec::new(),
        }
    }

    /// One pass over `bags` in a freshly shuffled order.
    pub fn run_epoch(&mut self, bags: &[Bag]) -> Result<EpochLog> {
        if bags.is_empty() {
            return Err(Error::InvalidArgument("no training bags".into()));
        }
        let lr = lr_schedule(self.epoch, &self.config);
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut self.rng);

        let mut total = 0.0;
        for (batch_idx, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Bag> = chunk.iter().map(|&i| &bags[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| self.rng.random()).collect();
            let grads = self.model.batch_gradients(&batch, true, &seeds)?;
            let batch_loss: f64 = grads.losses.iter().sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            total += batch_loss;
            self.model.params.zero_grad();
            grads.accumulate_into(&mut self.model.params, self.config.loss_reduction.weight(batch.len()));
            if let Some(max) = self.config.clip_norm {
                self.model.params.clip_grad_norm(max);
            }
            sgd_step(&mut self.model.params, lr)?;
        }
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            mean_loss: total / bags.len() as f64,
            lr,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs the remaining configured epochs, calling `on_epoch` after each.
    pub fn train(&mut self, bags: &[Bag], mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let entry = self.run_epoch(bags)?;
            on_epoch(self, &entry)?;
        }
        Ok(())
    }
}
