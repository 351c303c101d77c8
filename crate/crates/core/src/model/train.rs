//! Training loop for the fusion classifier.
//!
//! Mini-batch gradient descent on softmax cross-entropy. The default
//! optimizer is RMSprop with momentum; plain SGD with momentum is available
//! as a fallback. One tracked binding serves a whole batch: per-sample
//! losses are averaged into one scalar, a single backward pass leaves
//! batch-mean gradients on the bound weights, and the optimizer folds them
//! back into the plain buffers.

use crate::dataset::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax, FusionNet};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::{cross_entropy, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    RmsProp,
    Sgd,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f32,
    /// Squared-gradient decay of RMSprop; unused by SGD.
    pub alpha: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy(seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::RmsProp,
            learning_rate: 1e-4,
            alpha: 0.99,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 16,
            epochs: 30,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Model(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Model(format!(
                "momentum {} and alpha {} must lie in [0,1)",
                self.momentum, self.alpha
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Model("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Model("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean loss over the split before the first update.
    pub initial_loss: f32,
    /// Running mean of batch losses per epoch, in epoch order. Batches are
    /// measured before their update, so this trails the post-epoch loss.
    pub epoch_losses: Vec<f32>,
    /// Mean loss over the split after the last update.
    pub final_loss: f32,
    pub final_train_accuracy: f32,
}

pub(crate) struct OptState {
    sq: Vec<f32>,
    buf: Vec<f32>,
}

impl OptState {
    /// Fresh zeroed slots matching a network's parameter list, in
    /// `for_each_param` order.
    pub(crate) fn for_net(net: &FusionNet) -> Vec<OptState> {
        let mut states = Vec::new();
        net.for_each_param(|_, p| {
            states.push(OptState {
                sq: vec![0.0; p.numel()],
                buf: vec![0.0; p.numel()],
            })
        });
        states
    }
}

const RMS_EPS: f32 = 1e-8;

/// Train in place, returning the loss history.
pub fn train(
    net: &mut FusionNet,
    data: &Dataset,
    stats: &ChannelStats,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Model("cannot train on an empty split".into()));
    }

    let prepared: Vec<(Tensor, Tensor, usize)> = data
        .samples
        .iter()
        .map(|s| {
            let (x_rgb, x_depth) = s.preprocess(stats)?;
            Ok((x_rgb, x_depth, s.label))
        })
        .collect::<Result<_>>()?;

    let initial_loss = mean_loss(net, &prepared)?;
    if !initial_loss.is_finite() {
        return Err(Error::Model(format!(
            "initial loss is {initial_loss}; the weights are unusable"
        )));
    }

    let mut states = OptState::for_net(net);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded_rng(derive_seed(cfg.seed, 0xE90C + epoch as u64)));

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = net.bind(true);
            let mut total: Option<Tensor> = None;
            for &idx in chunk {
                let (x_rgb, x_depth, label) = &prepared[idx];
                let record = tape.forward(x_rgb, x_depth)?;
                let loss = cross_entropy(&record.scores, *label)?;
                total = Some(match total {
                    Some(t) => t.add(&loss)?,
                    None => loss,
                });
            }
            let batch_loss = total
                .expect("chunks are nonempty")
                .mul_scalar(1.0 / chunk.len() as f32);
            let loss_value = batch_loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Model(format!(
                    "training diverged at epoch {epoch}: batch loss {loss_value}; \
                     lower the learning rate"
                )));
            }
            loss_sum += loss_value as f64 * chunk.len() as f64;
            batch_loss.backward()?;
            let grads = tape.grads();
            apply_update(net, &mut states, &grads, cfg);
        }
        epoch_losses.push((loss_sum / prepared.len() as f64) as f32);
    }

    let mut correct = 0usize;
    for (x_rgb, x_depth, label) in &prepared {
        let record = net.forward(x_rgb, x_depth)?;
        if argmax(record.scores.data()) == *label {
            correct += 1;
        }
    }

    Ok(TrainReport {
        initial_loss,
        epoch_losses,
        final_loss: mean_loss(net, &prepared)?,
        final_train_accuracy: correct as f32 / prepared.len() as f32,
    })
}

pub(crate) fn mean_loss(net: &FusionNet, prepared: &[(Tensor, Tensor, usize)]) -> Result<f32> {
    let tape = net.bind(false);
    let mut total = 0.0f64;
    for (x_rgb, x_depth, label) in prepared {
        let record = tape.forward(x_rgb, x_depth)?;
        total += cross_entropy(&record.scores, *label)?.item()? as f64;
    }
    Ok((total / prepared.len() as f64) as f32)
}

pub(crate) fn apply_update(
    net: &mut FusionNet,
    states: &mut [OptState],
    grads: &[Vec<f32>],
    cfg: &TrainConfig,
) {
    let mut i = 0;
    net.for_each_param_mut(|_, param| {
        let state = &mut states[i];
        let grad = &grads[i];
        for j in 0..param.data.len() {
            let g = grad[j] + cfg.weight_decay * param.data[j];
            match cfg.optimizer {
                Optimizer::RmsProp => {
                    state.sq[j] = cfg.alpha * state.sq[j] + (1.0 - cfg.alpha) * g * g;
                    state.buf[j] =
                        cfg.momentum * state.buf[j] + g / (state.sq[j].sqrt() + RMS_EPS);
                    param.data[j] -= cfg.learning_rate * state.buf[j];
                }
                Optimizer::Sgd => {
                    state.buf[j] = cfg.momentum * state.buf[j] + g;
                    param.data[j] -= cfg.learning_rate * state.buf[j];
                }
            }
        }
        i += 1;
    });
}
