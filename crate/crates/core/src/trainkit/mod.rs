//! Training loop, warm-restart schedule, evaluation metrics and the
//! ablation runner.
//!
//! An epoch makes `draws_per_class` rounds over the eligible classes in a
//! freshly shuffled order; each round contributes one sampled `n`-view tuple
//! per class. Consecutive tuples form batches of `batch_size`, and every
//! batch is one backward pass over the mean of the per-sample objectives.

mod ablation;
mod eval;
mod report;
mod schedule;

pub use ablation::{ablation_settings, run_ablation, AblationRow};
pub use eval::{check_compatible, evaluate, evaluate_classes};
pub use report::{write_ablation_csv, write_metrics_csv, ABLATION_KEY_COLUMNS};
pub use schedule::{cosine_lr, sgdr_lr};

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::combinator::{CombinationSet, DEFAULT_MAX_VIEWS};
use crate::combinator::predict_sets;
use crate::data::{eligible_classes, sample_training_views, stratified_split, Dataset, DEFAULT_EVAL_CAP};
use crate::distill::{total_loss, LossBreakdown, ObjectiveConfig};
use crate::encoder::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Var};

/// Whether `epoch_seconds` records wall time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Timing {
    #[default]
    Wall,
    /// Write zero, so metric files depend only on config and seed.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub views: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Tuples drawn per eligible class in one epoch.
    pub draws_per_class: usize,
    /// Held-out share of each class when no validation set is given.
    pub val_fraction: f64,
    pub eval_cap: Option<usize>,
    pub timing: Timing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            views: 3,
            epochs: 30,
            batch_size: 8,
            lr_max: 0.02,
            lr_min: 1e-4,
            t0: 10,
            t_mult: 2,
            seed: 0,
            objective: ObjectiveConfig::default(),
            draws_per_class: 10,
            val_fraction: 0.1,
            eval_cap: Some(DEFAULT_EVAL_CAP),
            timing: Timing::Wall,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("train.{key}: {msg}")));
        if self.views < 1 || self.views > DEFAULT_MAX_VIEWS {
            return bad("views", format!("{} is outside 1..={DEFAULT_MAX_VIEWS}", self.views));
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.draws_per_class < 1 {
            return bad("draws_per_class", "must be at least 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_max > self.lr_min && self.lr_max.is_finite()) {
            return bad("lr_max", format!("need lr_max > lr_min ≥ 0, got {} and {}", self.lr_max, self.lr_min));
        }
        if self.t0 < 1 || self.t_mult < 1 {
            return bad("t0", format!("need T_0 ≥ 1 and T_mult ≥ 1, got {} and {}", self.t0, self.t_mult));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", format!("{} is outside [0, 1)", self.val_fraction));
        }
        if self.eval_cap == Some(0) {
            return bad("eval_cap", "must be positive".into());
        }
        self.objective.schedule.validate()
    }
}

/// Metrics after one epoch, computed on the evaluation tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub top1_full: f64,
    pub top5_full: f64,
    /// Top-1 of the uniform average over each combination set, `k = 1..=n`.
    pub top1_per_k: Vec<f64>,
    /// Mean objective over the epoch's training tuples, taken before each
    /// batch update. Zero for rows that come from evaluation alone.
    pub train_loss: f64,
    /// Wall time of the training pass, excluding evaluation.
    pub epoch_seconds: f64,
    /// Number of evaluation tuples.
    pub samples: usize,
}

/// Copies image geometry and class count from `dataset` into `base`.
pub fn model_config_for(dataset: &Dataset, base: &ModelConfig) -> Result<ModelConfig> {
    let h = &dataset.header;
    if h.height != h.width {
        return Err(Error::Config(format!("images must be square, got {}×{}", h.height, h.width)));
    }
    let cfg = ModelConfig {
        in_channels: h.channels as usize,
        image_size: h.height as usize,
        num_classes: h.num_classes as usize,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Owns the model and the sampling state between epochs.
pub struct Trainer<'d> {
    config: TrainConfig,
    encoder: Encoder,
    train: &'d Dataset,
    train_classes: Vec<Vec<usize>>,
    eval_data: &'d Dataset,
    eval_classes: Vec<Vec<usize>>,
    sets: Vec<CombinationSet>,
    sampling: Rng,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    /// Fresh model initialised from the `init` stream of `config.seed`.
    pub fn new(config: TrainConfig, model: &ModelConfig, train: &'d Dataset, validation: Option<&'d Dataset>) -> Result<Self> {
        let model = model_config_for(train, model)?;
        let encoder = Encoder::new(model, &mut rng::stream(config.seed, "init"))?;
        Trainer::with_encoder(config, encoder, train, validation)
    }

    /// Continues training `encoder`. Without `validation`, a stratified
    /// `val_fraction` of each class is held out of training.
    pub fn with_encoder(config: TrainConfig, encoder: Encoder, train: &'d Dataset, validation: Option<&'d Dataset>) -> Result<Self> {
        config.validate()?;
        check_compatible(&encoder, train)?;
        let n = config.views;
        let all = train.class_indices();
        let (train_classes, eval_data, eval_classes) = match validation {
            Some(val) => {
                check_compatible(&encoder, val)?;
                (all, val, val.class_indices())
            }
            None => {
                let split = stratified_split(&all, config.val_fraction);
                if eligible_classes(&split.val, n).is_empty() {
                    warn!("held-out split has no class with {n} images; evaluating on the training images");
                    (all.clone(), train, all)
                } else {
                    (split.train, train, split.val)
                }
            }
        };
        let eligible = eligible_classes(&train_classes, n);
        if eligible.is_empty() {
            return Err(Error::Config(format!("no class has at least {n} training images")));
        }
        let skipped = train_classes.len() - eligible.len();
        if skipped > 0 {
            info!("{skipped} classes have fewer than {n} images and sit out training");
        }
        let sets = config
            .objective
            .cardinalities(n)
            .into_iter()
            .map(|k| CombinationSet::of_size(n, k))
            .collect::<Result<_>>()?;
        let sampling = rng::stream(config.seed, "sampling");
        Ok(Trainer {
            config,
            encoder,
            train,
            train_classes,
            eval_data,
            eval_classes,
            sets,
            sampling,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn into_encoder(self) -> Encoder {
        self.encoder
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass of SGD updates followed by evaluation.
    pub fn train_epoch(&mut self) -> Result<MetricsRow> {
        self.run_epoch(None)
    }

    /// Like [`Trainer::train_epoch`] but at a constant learning rate instead
    /// of the warm-restart schedule.
    pub fn train_epoch_at(&mut self, lr: f64) -> Result<MetricsRow> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {lr} must be finite and ≥ 0")));
        }
        self.run_epoch(Some(lr))
    }

    fn run_epoch(&mut self, fixed_lr: Option<f64>) -> Result<MetricsRow> {
        let start = Instant::now();
        let n = self.config.views;
        let eligible = eligible_classes(&self.train_classes, n);
        let mut items = Vec::with_capacity(eligible.len() * self.config.draws_per_class);
        for _ in 0..self.config.draws_per_class {
            let mut order = eligible.clone();
            order.shuffle(&mut self.sampling);
            for c in order {
                let views = sample_training_views(&self.train_classes[c], n, &mut self.sampling).expect("eligible class");
                items.push((c, views));
            }
        }
        let batches: Vec<_> = items.chunks(self.config.batch_size).collect();
        let mut train_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let step = self.epoch as f64 + b as f64 / batches.len() as f64;
            let lr = match fixed_lr {
                Some(lr) => lr,
                None => sgdr_lr(step, self.config.t0, self.config.t_mult, self.config.lr_max, self.config.lr_min)?,
            };
            let grads = {
                let tape = Tape::new();
                let bound = self.encoder.bind(&tape, true);
                let mut sum: Option<Var<'_>> = None;
                for (class, imgs) in batch.iter() {
                    let views: Vec<_> = imgs.iter().map(|&i| tape.constant(self.train.image(i))).collect();
                    let preds = predict_sets(&self.encoder, &bound, &views, &self.sets)?;
                    let obj = total_loss(&preds, *class, &self.config.objective)?;
                    sum = Some(match sum {
                        Some(s) => s.add(obj.total)?,
                        None => obj.total,
                    });
                }
                let loss = sum.expect("batches are nonempty").scale(1.0 / batch.len() as f64);
                train_loss += loss.item() * batch.len() as f64 / items.len() as f64;
                let g = tape.backward(loss)?;
                self.encoder.params().gradients(&bound, &g)
            };
            self.encoder.params_mut().sgd_step(&grads, lr)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        let mut row = self.evaluate()?;
        row.epoch = self.epoch;
        row.train_loss = train_loss;
        row.epoch_seconds = match self.config.timing {
            Timing::Wall => seconds,
            Timing::Off => 0.0,
        };
        Ok(row)
    }

    /// Metrics of the current model without training.
    pub fn evaluate(&self) -> Result<MetricsRow> {
        let mut row = evaluate_classes(
            &self.encoder,
            self.eval_data,
            &self.eval_classes,
            self.config.views,
            self.config.eval_cap,
            &self.config.objective,
        )?;
        row.epoch = self.epoch;
        Ok(row)
    }
}

/// A finished training run.
pub struct TrainRun {
    pub encoder: Encoder,
    pub rows: Vec<MetricsRow>,
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn fit(config: &TrainConfig, model: &ModelConfig, train: &Dataset, validation: Option<&Dataset>) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config.clone(), model, train, validation)?;
    let mut rows = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let row = trainer.train_epoch()?;
        info!(
            "epoch {:>3}  loss {:.4}  top1 {:.3}  top5 {:.3}  {:.2}s",
            row.epoch, row.loss.l_total, row.top1_full, row.top5_full, row.epoch_seconds
        );
        rows.push(row);
    }
    Ok(TrainRun {
        encoder: trainer.into_encoder(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            conv_channels: vec![4, 8],
            dim: 8,
            depth: 1,
            heads: 2,
            ff: 16,
            ..ModelConfig::default()
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            views: 2,
            epochs: 2,
            batch_size: 4,
            draws_per_class: 2,
            eval_cap: Some(3),
            timing: Timing::Off,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = generate_synthetic(&SyntheticSpec::uniform(3, 4, 16, 1)).unwrap();
        let mut t = Trainer::new(tiny_config(), &tiny_model(), &ds, Some(&ds)).unwrap();
        let before = t.encoder().params().clone();
        let a = t.train_epoch_at(0.0).unwrap();
        let b = t.train_epoch_at(0.0).unwrap();
        assert_eq!(t.encoder().params(), &before);
        assert_eq!(a.loss, b.loss);
        assert!(t.train_epoch_at(-1.0).is_err());
        t.train_epoch().unwrap();
        assert_ne!(t.encoder().params(), &before);
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = generate_synthetic(&SyntheticSpec::uniform(3, 4, 16, 2)).unwrap();
        let run = || fit(&tiny_config(), &tiny_model(), &ds, None).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.encoder.params(), b.encoder.params());
    }

    #[test]
    fn rejects_bad_configs_and_datasets() {
        let ds = generate_synthetic(&SyntheticSpec::uniform(3, 2, 16, 3)).unwrap();
        let three = TrainConfig {
            views: 3,
            ..tiny_config()
        };
        assert!(matches!(Trainer::new(three, &tiny_model(), &ds, None), Err(Error::Config(_))));
        for bad in [
            TrainConfig { batch_size: 0, ..tiny_config() },
            TrainConfig { lr_min: 1.0, ..tiny_config() },
            TrainConfig { t0: 0, ..tiny_config() },
            TrainConfig { views: 6, ..tiny_config() },
        ] {
            assert!(bad.validate().unwrap_err().is_config());
        }
        let other = generate_synthetic(&SyntheticSpec::uniform(4, 2, 16, 3)).unwrap();
        let enc = Encoder::new(model_config_for(&ds, &tiny_model()).unwrap(), &mut rng::stream(0, "init")).unwrap();
        assert!(matches!(evaluate(&enc, &other, 2, None, &ObjectiveConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn metric_bounds() {
        let ds = generate_synthetic(&SyntheticSpec::uniform(4, 3, 16, 4)).unwrap();
        let enc = Encoder::new(model_config_for(&ds, &tiny_model()).unwrap(), &mut rng::stream(0, "init")).unwrap();
        let row = evaluate(&enc, &ds, 2, None, &ObjectiveConfig::default()).unwrap();
        assert_eq!(row.samples, 4 * 3);
        assert_eq!(row.top5_full, 1.0);
        assert!(row.top1_full <= row.top5_full);
        assert_eq!(row.top1_per_k.len(), 2);
        assert_eq!(row.top1_per_k[1], row.top1_full);
    }
}
