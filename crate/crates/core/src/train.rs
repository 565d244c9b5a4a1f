//! Mini-batch training with Adam and per-epoch exponential decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{augment, Sample};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{confusion, ConfusionCounts, Metrics, MonitorMetric, EVAL_THRESHOLD};
use crate::network::{forward, loss_and_grads, ModelParams, Prediction};
use crate::optim::Adam;
use crate::parallel::par_map;
use crate::relabel::RoundTrainer;
use crate::synth::record_seed;
use crate::tensor::Tensor;
use crate::types::{derive_body_mask, BinaryMask, SkinProbMap};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub lr0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub loss: LossConfig,
    pub monitor: MonitorMetric,
    pub workers: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay: 0.96,
            batch_size: 8,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
            monitor: MonitorMetric::F1,
            workers: 1,
        }
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

fn mix(seed: u64, tag: &str, a: usize, b: usize) -> u64 {
    record_seed(seed, &format!("{tag}/{a}/{b}"))
}

pub fn predict_all(params: &ModelParams, samples: &[Sample], workers: usize) -> Result<Vec<Prediction>> {
    par_map(samples, workers, |s| forward(params, &s.image, &s.parts))
        .into_iter()
        .collect()
}

/// Binarize at [`EVAL_THRESHOLD`] and count against each sample's label.
pub fn confusions(preds: &[Prediction], samples: &[Sample]) -> Result<Vec<ConfusionCounts>> {
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| confusion(&BinaryMask::from_threshold(&p.prob, EVAL_THRESHOLD), &s.label))
        .collect()
}

pub fn evaluate(params: &ModelParams, samples: &[Sample], workers: usize) -> Result<Metrics> {
    let preds = predict_all(params, samples, workers)?;
    Ok(Metrics::from_images(&confusions(&preds, samples)?))
}

/// Model, optimizer and data for one training run.
pub struct ModelTrainer<'a> {
    params: ModelParams,
    opt: Adam,
    train: &'a [Sample],
    val: &'a [Sample],
    settings: TrainSettings,
    epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainerSnapshot {
    params: ModelParams,
    opt: Adam,
}

impl<'a> ModelTrainer<'a> {
    pub fn new(params: ModelParams, train: &'a [Sample], val: &'a [Sample], settings: TrainSettings) -> Result<Self> {
        settings.loss.validate()?;
        if settings.batch_size == 0
            || settings.lr0.is_nan()
            || settings.lr0 <= 0.0
            || !(settings.decay > 0.0 && settings.decay <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "batch size {}, lr0 {}, decay {} out of range",
                settings.batch_size, settings.lr0, settings.decay
            )));
        }
        if train.is_empty() {
            return Err(Error::DatasetEmpty("training split has no usable records".into()));
        }
        let opt = Adam::new(params.store.tensors());
        Ok(Self {
            params,
            opt,
            train,
            val,
            settings,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Epochs trained so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(self.settings.lr0, self.settings.decay, self.epoch)
    }

    /// One pass over the training set against `labels`; returns the mean
    /// per-image loss.
    pub fn run_epoch(&mut self, labels: &[BinaryMask]) -> Result<f64> {
        if labels.len() != self.train.len() {
            return Err(Error::shape(format!(
                "{} labels for {} images",
                labels.len(),
                self.train.len()
            )));
        }
        let lr = self.current_lr();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            self.settings.seed,
            "shuffle",
            self.epoch,
            0,
        )));
        let mut total = 0.0;
        for batch in order.chunks(self.settings.batch_size) {
            let results = par_map(batch, self.settings.workers, |&i| {
                let s = &self.train[i];
                if self.settings.augment {
                    let seed = mix(self.settings.seed, "augment", self.epoch, i);
                    let (img, label, parts) = augment(&s.image, &labels[i], &s.parts, seed)?;
                    loss_and_grads(&self.params, &img, &parts, &label, &self.settings.loss)
                } else {
                    loss_and_grads(&self.params, &s.image, &s.parts, &labels[i], &self.settings.loss)
                }
            });
            let mut sum: Option<Vec<Tensor>> = None;
            for (i, r) in batch.iter().zip(results) {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::NumericFailure(m) => Error::NumericFailure(format!(
                        "{m} on `{}` at epoch {} (lr {lr:e})",
                        self.train[*i].stem, self.epoch
                    )),
                    other => other,
                })?;
                total += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = sum
                .expect("non-empty batch")
                .iter()
                .map(|g| g.map(|v| v * scale))
                .collect();
            self.opt.update(self.params.store.tensors_mut(), &grads, lr)?;
        }
        self.epoch += 1;
        Ok(total / self.train.len() as f64)
    }

    pub fn evaluate_val(&self) -> Result<Metrics> {
        if self.val.is_empty() {
            return Err(Error::DatasetEmpty("validation split has no usable records".into()));
        }
        evaluate(&self.params, self.val, self.settings.workers)
    }

    pub fn train_labels(&self) -> Vec<BinaryMask> {
        self.train.iter().map(|s| s.label.clone()).collect()
    }

    pub fn train_bodies(&self) -> Vec<BinaryMask> {
        self.train.iter().map(|s| derive_body_mask(&s.parts)).collect()
    }
}

impl RoundTrainer for ModelTrainer<'_> {
    type Snapshot = TrainerSnapshot;

    fn train_epoch(&mut self, labels: &[BinaryMask]) -> Result<f64> {
        self.run_epoch(labels)
    }

    fn attention_maps(&self) -> Result<Vec<SkinProbMap>> {
        Ok(predict_all(&self.params, self.train, self.settings.workers)?
            .into_iter()
            .map(|p| p.attention)
            .collect())
    }

    fn validate(&self) -> Result<f64> {
        Ok(self.evaluate_val()?.get(self.settings.monitor))
    }

    fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            params: self.params.clone(),
            opt: self.opt.clone(),
        }
    }

    fn restore(&mut self, s: TrainerSnapshot) {
        self.params = s.params;
        self.opt = s.opt;
    }
}
