//! ε-prediction training for [`NeuralDenoiser`].

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::{NeuralDenoiser, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schedule::{TimePoint, T_MAX, T_MIN};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Fraction of the dataset held out for validation.
    pub holdout: f64,
    /// Random azimuth rotation of each training image.
    pub augment_roll: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 8,
            learning_rate: 0.02,
            momentum: 0.9,
            clip_norm: 1.0,
            holdout: 0.1,
            augment_roll: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(
                "batch and learning_rate must be positive, momentum in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout) || self.clip_norm < 0.0 {
            return Err(Error::InvalidArgument("holdout must be in [0, 1), clip_norm ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Mean training loss per epoch (one pass over the training split).
    pub epoch_losses: Vec<f64>,
    /// Global step counter after training, including any resumed steps.
    pub step: u64,
}

/// Number of noise draws per held-out image in the validation loss.
const HOLDOUT_DRAWS: u64 = 4;
const HOLDOUT_STREAM: u64 = u64::MAX;

/// Mean ε-loss over a fixed set of `(x0, t, ε)` draws.
pub fn epsilon_loss(model: &NeuralDenoiser, data: &[Tensor], seed: u64) -> Result<f64> {
    let schedule = model.schedule();
    let mut rng = stream(seed, HOLDOUT_STREAM);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scratch = vec![0.0; model.num_params()];
    for x0 in data {
        for _ in 0..HOLDOUT_DRAWS {
            let (xt, t, eps) = draw_example(x0, &schedule, &mut rng)?;
            total += model.loss_and_grad(&xt, t, &eps, 0.0, &mut scratch)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

fn draw_example<R: Rng + ?Sized>(
    x0: &Tensor,
    schedule: &crate::schedule::NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, TimePoint, Tensor)> {
    let t = TimePoint::clamped(rng.random_range(T_MIN..=T_MAX));
    let eps = Tensor::randn(x0.shape(), rng);
    let xt = schedule.forward_noise(x0, t, &eps)?;
    Ok((xt, t, eps))
}

fn roll_width(x: &Tensor, shift: usize) -> Tensor {
    let w = x.width();
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(x.data().chunks_exact(w)) {
        dst[shift..].copy_from_slice(&src[..w - shift]);
        dst[..shift].copy_from_slice(&src[w - shift..]);
    }
    out
}

/// Splits the dataset into `(train, holdout)`; the last images are held out.
fn split(dataset: &[Tensor], holdout: f64) -> (&[Tensor], &[Tensor]) {
    if dataset.len() < 2 || holdout == 0.0 {
        return (dataset, dataset);
    }
    let n_hold = ((dataset.len() as f64 * holdout).ceil() as usize).clamp(1, dataset.len() - 1);
    dataset.split_at(dataset.len() - n_hold)
}

/// Trains `model` in place for `cfg.steps` steps of momentum SGD on the
/// uniform-in-time ε-prediction loss.
///
/// `start_step` offsets the per-step random streams so a resumed run draws
/// the same examples it would have drawn uninterrupted. `on_epoch` receives
/// `(epoch, mean training loss)`.
pub fn train_denoiser(
    model: &mut NeuralDenoiser,
    dataset: &[Tensor],
    cfg: &TrainConfig,
    start_step: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::InsufficientData("training set is empty".into()))?;
    if dataset.iter().any(|x| x.shape() != first.shape()) {
        return Err(Error::InvalidArgument("training images differ in shape".into()));
    }
    model.architecture().check_input(first.shape())?;
    let (train, holdout) = split(dataset, cfg.holdout);
    let schedule = model.schedule();

    let initial = epsilon_loss(model, holdout, cfg.seed)?;
    let mut velocity = vec![0.0; model.num_params()];
    let mut grads = vec![0.0; model.num_params()];
    let steps_per_epoch = train.len().div_ceil(cfg.batch).max(1);
    let mut epoch_losses = Vec::new();
    let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);

    for k in 0..cfg.steps {
        let step = start_step + k as u64;
        let mut rng = stream(cfg.seed, step);
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let x0 = &train[rng.random_range(0..train.len())];
            let x0 = if cfg.augment_roll {
                roll_width(x0, rng.random_range(0..x0.width()))
            } else {
                x0.clone()
            };
            let (xt, t, eps) = draw_example(&x0, &schedule, &mut rng)?;
            batch_loss += model.loss_and_grad(&xt, t, &eps, 1.0 / cfg.batch as f64, &mut grads)?;
        }
        batch_loss /= cfg.batch as f64;
        let gnorm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !batch_loss.is_finite() || !gnorm.is_finite() {
            return Err(Error::TrainingFailure(step as usize));
        }
        let clip = if cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm {
            cfg.clip_norm / gnorm
        } else {
            1.0
        };
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
            *v = cfg.momentum * *v + clip * g;
            *p -= cfg.learning_rate * *v;
        }

        epoch_sum += batch_loss;
        epoch_n += 1;
        if epoch_n == steps_per_epoch || k + 1 == cfg.steps {
            let mean = epoch_sum / epoch_n as f64;
            on_epoch(epoch_losses.len(), mean);
            epoch_losses.push(mean);
            epoch_sum = 0.0;
            epoch_n = 0;
        }
    }

    let final_loss = if cfg.steps == 0 {
        initial
    } else {
        epsilon_loss(model, holdout, cfg.seed)?
    };
    if !final_loss.is_finite() {
        return Err(Error::TrainingFailure(start_step as usize + cfg.steps));
    }
    Ok(TrainReport {
        initial_holdout_loss: initial,
        final_holdout_loss: final_loss,
        epoch_losses,
        step: start_step + cfg.steps as u64,
    })
}
