//! Training loop, evaluation, checkpoints and the model-level gradient check.

mod checkpoint;
mod gradcheck;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_tensors, save_checkpoint, save_tensors, Checkpoint, TensorEntry,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use optim::{cosine_lr, AdamHyper, AdamState, ADAM_EPS, BETA1, BETA2};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{confusion_matrix, EvalReport};
use crate::model::{Cft, LossSetup, ModelConfig};
use crate::objective::{voting_fuse, LossWeights, VotingRule};
use crate::parallel::par_map;
use crate::param::{Gradients, ParamStore};
use crate::synth::{augment, AugmentConfig, Dataset, PairedSample};
use crate::tensor::{Float, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub precision: Precision,
    pub use_cf_loss: bool,
    pub use_if_loss: bool,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub train_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            lambda: 0.6,
            seed: 0,
            precision: Precision::F32,
            use_cf_loss: true,
            use_if_loss: true,
            augment: true,
            augmentation: AugmentConfig::default(),
            train_frac: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(
                "train.base_lr",
                "must be finite and positive",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "train.weight_decay",
                "must be finite and non-negative",
            ));
        }
        LossWeights::new(self.lambda)?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config(
                "train.train_frac",
                format!("{} is outside (0, 1)", self.train_frac),
            ));
        }
        let a = &self.augmentation;
        if !(a.min_crop > 0.0 && a.min_crop <= 1.0) {
            return Err(Error::config(
                "train.augmentation.min_crop",
                "must be in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&a.flip_prob) {
            return Err(Error::config(
                "train.augmentation.flip_prob",
                "must be in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn loss_setup(&self) -> LossSetup {
        LossSetup {
            weights: LossWeights {
                lambda: self.lambda,
            },
            use_cf_loss: self.use_cf_loss,
            use_if_loss: self.use_if_loss,
        }
    }
}

/// Anything that maps a sample to a class.
pub trait Predictor: Sync {
    fn k(&self) -> usize;
    fn predict(&self, sample: &PairedSample) -> Result<usize>;
}

/// A model under its own inference rule.
pub struct ModelPredictor<'a, T> {
    pub model: &'a Cft<T>,
    pub setup: LossSetup,
}

impl<T: Float> Predictor for ModelPredictor<'_, T> {
    fn k(&self) -> usize {
        self.model.config.k
    }

    fn predict(&self, sample: &PairedSample) -> Result<usize> {
        self.model.predict(sample, &self.setup)
    }
}

/// Decision-level fusion of two single-stream models.
pub struct VotingPredictor<'a, T> {
    pub cf: &'a Cft<T>,
    pub if_: &'a Cft<T>,
    pub rule: VotingRule,
}

impl<T: Float> Predictor for VotingPredictor<'_, T> {
    fn k(&self) -> usize {
        self.cf.config.k
    }

    fn predict(&self, sample: &PairedSample) -> Result<usize> {
        let setup = LossSetup::default();
        let p_cf = self.cf.probabilities(sample, &setup)?;
        let p_if = self.if_.probabilities(sample, &setup)?;
        voting_fuse(&p_cf, &p_if, self.rule)
    }
}

/// Metrics over `ds` without augmentation.
pub fn evaluate(predictor: &dyn Predictor, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let preds = par_map(&ds.samples, |s| predictor.predict(s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_confusion(confusion_matrix(&ds.labels(), &preds, predictor.k())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<T> {
    pub epoch: usize,
    pub report: EvalReport,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Cft<T>,
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best: Option<BestSnapshot<T>>,
    pub history: Vec<EpochRecord>,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

impl<T: Float> TrainState<T> {
    pub fn new(model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Cft::new(model_cfg, cfg.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM),
            best: None,
            history: Vec::new(),
        })
    }

    /// Model with the best validation kappa seen so far, or the current one.
    pub fn best_model(&self) -> Cft<T> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.params = b.params.clone();
        }
        m
    }
}

/// Loss value and parameter gradients of one sample.
pub fn sample_gradients<T: Float>(
    model: &Cft<T>,
    sample: &PairedSample,
    setup: &LossSetup,
) -> Result<(f64, Gradients<T>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.cfp.cast(), &sample.ifp.cast())?;
    let losses = model.losses(&mut g, &out, sample.label, setup)?;
    let loss = g.value(losses.total).data()[0].as_f64();
    Ok((loss, g.gradients(losses.total)?))
}

/// Mean loss and mean gradients over a batch. Per-sample work may run in
/// parallel; the reduction always runs in batch order.
pub fn batch_gradients<T: Float>(
    model: &Cft<T>,
    batch: &[PairedSample],
    setup: &LossSetup,
) -> Result<(f64, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let per_sample = par_map(batch, |s| sample_gradients(model, s, setup));
    let scale = T::of(1.0 / batch.len() as f64);
    let mut total = Gradients::empty(model.params.len());
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add_scaled(&g, scale);
    }
    Ok((loss / batch.len() as f64, total))
}

/// Runs one epoch of shuffled mini-batch training followed by validation.
pub fn train_epoch<T: Float>(
    state: &mut TrainState<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<EpochRecord> {
    if train.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if state.epoch >= cfg.epochs {
        return Err(Error::config(
            "train.epochs",
            format!("already completed {} of {} epochs", state.epoch, cfg.epochs),
        ));
    }
    let setup = cfg.loss_setup();
    let lr = cosine_lr(state.epoch, cfg.epochs, cfg.base_lr)?;
    let hyper = AdamHyper {
        lr,
        weight_decay: cfg.weight_decay,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.rng);

    let mut loss_sum = 0.0;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch = chunk
            .iter()
            .map(|&i| {
                let s = &train.samples[i];
                if cfg.augment {
                    augment(s, &cfg.augmentation, &mut state.rng)
                } else {
                    Ok(s.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_gradients(&state.model, &batch, &setup)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch + 1,
                step,
                detail: format!("batch loss {loss} over samples {chunk:?}"),
            });
        }
        loss_sum += loss * batch.len() as f64;
        state.model.params.zero_grads();
        state.model.params.accumulate(&grads);
        state.adam.step(&mut state.model.params, hyper)?;
    }
    // Gradients are per-batch scratch; clearing them makes an epoch boundary
    // identical to a state reloaded from a checkpoint.
    state.model.params.zero_grads();
    state.epoch += 1;

    let val_report = evaluate(
        &ModelPredictor {
            model: &state.model,
            setup,
        },
        val,
    )?;
    if state
        .best
        .as_ref()
        .is_none_or(|b| val_report.kappa > b.report.kappa)
    {
        state.best = Some(BestSnapshot {
            epoch: state.epoch,
            report: val_report.clone(),
            params: state.model.params.clone(),
        });
    }
    let record = EpochRecord {
        epoch: state.epoch,
        lr,
        train_loss: loss_sum / train.len() as f64,
        val: val_report,
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Trains from `state` until `cfg.epochs` epochs are complete.
pub fn continue_training<T: Float>(
    state: &mut TrainState<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    cfg.validate()?;
    while state.epoch < cfg.epochs {
        let rec = train_epoch(state, train, val, cfg)?;
        on_epoch(&rec);
    }
    Ok(())
}

pub fn train<T: Float>(
    train: &Dataset,
    val: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(model_cfg, cfg)?;
    continue_training(&mut state, train, val, cfg, |_| {})?;
    Ok(state)
}
