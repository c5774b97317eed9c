//! Batching, the optimisation step, epochs and evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::loss::{BatchTargets, LossValues, Objective, N_TERMS};
use crate::metrics::{classification_metrics, regression_metrics, ClassificationMetrics};
use crate::model::{LevelPredictions, Mlgl};
use crate::optim::{AdamW, AdamWConfig};
use crate::real::Real;
use crate::rng::{RngState, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub objective: Objective,
    /// Decision threshold for event accuracy and F1.
    pub threshold: f64,
    /// Validation runs every this many epochs (the last epoch always runs).
    pub report_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            epochs: 400,
            seed: 0,
            optimizer: AdamWConfig::default(),
            objective: Objective::default(),
            threshold: 0.5,
            report_every: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be at least 1".into()));
        }
        if self.report_every == 0 {
            return Err(Error::Input("report_every must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Input("optimizer needs lr > 0 and betas in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Input("optimizer needs eps > 0 and weight_decay >= 0".into()));
        }
        self.objective.validate()
    }
}

/// One clip: a `[frames, mels]` log-mel matrix and its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub features: Tensor<T>,
    pub labels: LabelSet,
}

/// Stacks clips into `[N, 1, frames, mels]`. Clips are cropped or padded
/// (with their own minimum value) to the most common frame count; ties go to
/// the shorter length.
pub fn assemble_batch<T: Real>(examples: &[&Example<T>]) -> Result<(Tensor<T>, BatchTargets<T>)> {
    let first = examples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let shape = first.features.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("clip features must be [frames, mels], got {shape:?}")));
    }
    let mels = shape[1];
    let mut lengths: Vec<usize> = Vec::with_capacity(examples.len());
    for e in examples {
        let s = e.features.shape();
        if s.len() != 2 || s[1] != mels {
            return Err(Error::shape("assemble_batch", shape, s));
        }
        lengths.push(s[0]);
    }
    let frames = modal_length(&lengths);
    let mut data = Vec::with_capacity(examples.len() * frames * mels);
    for e in examples {
        let src = e.features.data();
        let have = e.features.shape()[0].min(frames);
        data.extend_from_slice(&src[..have * mels]);
        if have < frames {
            let floor = src.iter().copied().fold(T::infinity(), T::min);
            data.extend(std::iter::repeat_n(floor, (frames - have) * mels));
        }
    }
    let x = Tensor::new([examples.len(), 1, frames, mels], data)?;
    Ok((x, BatchTargets::from_labels(examples.iter().map(|e| &e.labels))))
}

fn modal_length(lengths: &[usize]) -> usize {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let (mut best, mut best_count) = (sorted[0], 0);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&l| l == sorted[i]).count();
        if j > best_count {
            best = sorted[i];
            best_count = j;
        }
        i += j;
    }
    best
}

/// Visit order of `n` clips in `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = SeededRng::with_stream(seed, 0x5348_0000 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Sample-weighted means over the epoch.
    pub losses: LossValues,
}

pub struct Trainer<T> {
    model: Mlgl<T>,
    optimizer: AdamW<T>,
    config: TrainingConfig,
    dropout_rng: SeededRng,
    epoch: usize,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Mlgl<T>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer, model.store());
        let dropout_rng = SeededRng::with_stream(config.seed, 0xd0);
        Ok(Trainer {
            model,
            optimizer,
            config,
            dropout_rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Resumes from saved state.
    pub fn resume(
        model: Mlgl<T>,
        optimizer: AdamW<T>,
        config: TrainingConfig,
        rng: RngState,
        epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            step: optimizer.steps(),
            model,
            optimizer,
            config,
            dropout_rng: SeededRng::from_state(rng),
            epoch,
        })
    }

    pub fn model(&self) -> &Mlgl<T> {
        &self.model
    }

    pub fn into_model(self) -> Mlgl<T> {
        self.model
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn rng_state(&self) -> RngState {
        self.dropout_rng.state()
    }

    /// One forward/backward/update on `batch`. On a non-finite loss the
    /// parameters are left untouched and [`Error::Diverged`] is returned.
    pub fn step(&mut self, batch: &[&Example<T>]) -> Result<LossValues> {
        let (x, targets) = assemble_batch(batch)?;
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let out = {
            let mut mode = Mode::Train(&mut self.dropout_rng);
            self.model.forward(&mut tape, input, &mut mode)
        };
        let out = out?;
        let loss_vars = match self.config.objective.record(&mut tape, &out, &targets) {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: f64::NAN,
                })
            }
            other => other?,
        };
        let losses = LossValues::read(&tape, &loss_vars);
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: losses.total,
            });
        }
        let grads = tape.backward(loss_vars.total)?;
        let bn = tape.take_bn_updates();
        let store = self.model.store_mut();
        store.zero_grad();
        store.accumulate(&grads)?;
        self.optimizer.step(store)?;
        self.model.apply_bn_updates(&bn);
        self.step += 1;
        Ok(losses)
    }

    /// One pass over `data` in the seeded order for the current epoch.
    /// `on_step` sees every step's losses.
    pub fn train_epoch(
        &mut self,
        data: &[Example<T>],
        mut on_step: impl FnMut(u64, &LossValues),
    ) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let order = epoch_order(self.config.seed, self.epoch, data.len());
        let mut sums = [0.0; N_TERMS];
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let l = self.step(&batch)?;
            on_step(self.step, &l);
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip(l.terms) {
                *s += w * v;
            }
            total += w * l.total;
            steps += 1;
        }
        let n = data.len() as f64;
        self.epoch += 1;
        Ok(EpochSummary {
            epoch: self.epoch,
            steps,
            losses: LossValues {
                terms: sums.map(|s| s / n),
                total: total / n,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LevelMetrics {
    pub fae: ClassificationMetrics,
    pub cae: ClassificationMetrics,
    pub ar_mse: f64,
    pub ar_mae: f64,
    /// `None` when the targets have no variance.
    pub ar_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub losses: LossValues,
    pub levels: [LevelMetrics; 3],
}

impl Evaluation {
    /// Model-selection order: lower level-3 annoyance MSE, then higher
    /// level-3 fine-event AUC.
    pub fn better_than(&self, other: &Evaluation) -> bool {
        let (a, b) = (&self.levels[2], &other.levels[2]);
        if a.ar_mse != b.ar_mse {
            return a.ar_mse < b.ar_mse;
        }
        a.fae.auc.unwrap_or(0.0) > b.fae.auc.unwrap_or(0.0)
    }
}

/// Evaluation-mode predictions for every clip, in order.
pub fn predict_all<T: Real>(model: &Mlgl<T>, data: &[Example<T>], batch_size: usize) -> Result<LevelPredictions> {
    let mut preds = LevelPredictions::empty();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Example<T>> = chunk.iter().collect();
        let (x, _) = assemble_batch(&batch)?;
        preds.extend(&model.predict(&x)?);
    }
    Ok(preds)
}

/// Losses and per-level metrics of `model` on `data`.
pub fn evaluate<T: Real>(
    model: &Mlgl<T>,
    data: &[Example<T>],
    batch_size: usize,
    objective: &Objective,
    threshold: f64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let mut sums = [0.0; N_TERMS];
    let mut total = 0.0;
    let mut preds = LevelPredictions::empty();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Example<T>> = chunk.iter().collect();
        let (x, targets) = assemble_batch(&batch)?;
        let mut tape = Tape::inference();
        let input = tape.constant(x);
        let out = model.forward(&mut tape, input, &mut Mode::Eval)?;
        let vars = objective.record(&mut tape, &out, &targets)?;
        let l = LossValues::read(&tape, &vars);
        let w = chunk.len() as f64;
        for (s, v) in sums.iter_mut().zip(l.terms) {
            *s += w * v;
        }
        total += w * l.total;
        preds.extend(&LevelPredictions::read(&tape, &out));
    }
    let n = data.len() as f64;
    let labels: Vec<&LabelSet> = data.iter().map(|e| &e.labels).collect();
    let fae_y: Vec<bool> = labels.iter().flat_map(|l| l.fae.iter().copied()).collect();
    let cae_y: Vec<bool> = labels.iter().flat_map(|l| l.cae.iter().copied()).collect();
    let ar_y: Vec<f64> = labels.iter().map(|l| l.ar).collect();
    let n_fae = model.config().n_fae;
    let n_cae = model.config().n_cae;
    let mut levels = Vec::with_capacity(3);
    for level in &preds.levels {
        let fae = classification_metrics(&level.fae, &fae_y, n_fae, threshold)?;
        let cae = classification_metrics(&level.cae, &cae_y, n_cae, threshold)?;
        let (ar_mse, ar_mae) = mse_mae(&level.ar, &ar_y);
        let ar_r2 = match regression_metrics(&level.ar, &ar_y) {
            Ok(r) => Some(r.r2),
            Err(Error::Undefined(_)) | Err(Error::Input(_)) => None,
            Err(e) => return Err(e),
        };
        levels.push(LevelMetrics {
            fae,
            cae,
            ar_mse,
            ar_mae,
            ar_r2,
        });
    }
    Ok(Evaluation {
        losses: LossValues {
            terms: sums.map(|s| s / n),
            total: total / n,
        },
        levels: levels.try_into().expect("three levels"),
    })
}

fn mse_mae(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    (se / n, ae / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modal_length_prefers_shorter_on_tie() {
        assert_eq!(modal_length(&[5, 7, 7, 5]), 5);
        assert_eq!(modal_length(&[9, 7, 9]), 9);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(3, 0, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 20));
        assert_ne!(a, epoch_order(3, 1, 20));
        assert_ne!(a, epoch_order(4, 0, 20));
    }
}
