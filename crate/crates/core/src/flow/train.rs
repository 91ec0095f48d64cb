//! Rectified-flow training: straight-path targets `x(1) - x(0)` regressed by
//! the velocity network with plain stochastic gradient descent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::VelocityNet;
use super::sampler::interpolate;
use crate::error::{Error, Result};
use crate::layout::{standardize, DatasetStats, Layout, TokenMatrix};

/// Batch items per gradient chunk. Chunk gradients are summed in chunk
/// order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain stochastic gradient descent.
    #[default]
    Sgd,
    /// Adam with the usual moment decays (0.9, 0.999) and epsilon 1e-8.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 0.0005,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A flow-space target `x(1)` with its prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub target: TokenMatrix,
    pub prompt: Vec<f64>,
}

impl TrainingSample {
    pub fn from_layout(layout: &Layout, stats: &DatasetStats, prompt: Vec<f64>) -> Self {
        Self { target: standardize(layout, stats), prompt }
    }
}

/// Noise and time drawn for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub noise: TokenMatrix,
    pub t: f64,
}

impl FlowDraw {
    pub fn sample(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let t = rng.random_range(0.0..1.0);
        let noise = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Self { noise: TokenMatrix::from_vec(rows, cols, noise), t }
    }
}

/// Summed squared error `sum_j ||x1 - x0 - v_j||^2` for one item.
pub fn flow_loss(target: &TokenMatrix, noise: &TokenMatrix, velocity: &TokenMatrix) -> f64 {
    target
        .data
        .iter()
        .zip(&noise.data)
        .zip(&velocity.data)
        .map(|((x1, x0), v)| {
            let r = x1 - x0 - v;
            r * r
        })
        .sum()
}

/// Mean-over-batch loss and its gradient with respect to every parameter.
pub fn loss_and_grad(net: &VelocityNet, batch: &[&TrainingSample], draws: &[FlowDraw]) -> Result<(f64, Vec<f64>)> {
    assert_eq!(batch.len(), draws.len(), "one draw per batch item");
    let scale = 1.0 / batch.len() as f64;
    let n_params = net.parameter_count();
    let chunks: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .zip(draws.par_chunks(GRAD_CHUNK))
        .map(|(items, ds)| {
            let mut grads = vec![0.0; n_params];
            let mut loss = 0.0;
            for (item, draw) in items.iter().zip(ds) {
                let xt = TokenMatrix::from_vec(
                    item.target.rows,
                    item.target.cols,
                    interpolate(&draw.noise.data, &item.target.data, draw.t),
                );
                let (v, cache) = net.forward_cached(&xt, draw.t, &item.prompt)?;
                loss += flow_loss(&item.target, &draw.noise, &v);
                let dv = item
                    .target
                    .data
                    .iter()
                    .zip(&draw.noise.data)
                    .zip(&v.data)
                    .map(|((x1, x0), vv)| -2.0 * (x1 - x0 - vv) * scale)
                    .collect();
                net.backward(&cache, &TokenMatrix::from_vec(v.rows, v.cols, dv), &mut grads);
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = vec![0.0; n_params];
    for chunk in chunks {
        let (l, g) = chunk?;
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub epoch: usize,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Owns the optimizer state and the noise stream.
pub struct Trainer {
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    adam: Option<AdamState>,
    total_steps: Option<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, rng, step: 0, adam: None, total_steps: None })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer update on `batch`. Fresh noise and times are drawn for every
    /// item. Returns the loss before the update.
    pub fn train_step(&mut self, net: &mut VelocityNet, batch: &[&TrainingSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let draws: Vec<FlowDraw> =
            batch.iter().map(|s| FlowDraw::sample(s.target.rows, s.target.cols, &mut self.rng)).collect();
        let (loss, grads) = loss_and_grad(net, batch, &draws)?;
        self.step += 1;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let max_param = net.params().values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("loss {loss}, max |param| {max_param:.3e}, batch of {}", batch.len()),
            });
        }
        let lr = self.learning_rate_at(self.step - 1);
        let params = &mut net.params_mut().values;
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                let n = params.len();
                let state = self.adam.get_or_insert_with(|| AdamState { m: vec![0.0; n], v: vec![0.0; n] });
                let c1 = 1.0 - B1.powi(self.step as i32);
                let c2 = 1.0 - B2.powi(self.step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
        Ok(loss)
    }

    /// Rate used for the update after `completed` earlier updates.
    pub fn learning_rate_at(&self, completed: usize) -> f64 {
        let base = self.config.learning_rate;
        match (self.config.schedule, self.total_steps) {
            (Schedule::Cosine, Some(total)) if total > 0 => {
                let frac = (completed as f64 / total as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => base,
        }
    }

    /// Runs one epoch over a fresh permutation of `data`.
    pub fn train_epoch(
        &mut self,
        net: &mut VelocityNet,
        data: &[TrainingSample],
        epoch: usize,
        log: &mut dyn FnMut(StepLog),
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(net, &batch)?;
            log(StepLog { step: self.step, loss, epoch });
            sum += loss;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { sum / batches as f64 })
    }

    /// Runs `config.epochs` epochs; returns the mean loss of each epoch.
    pub fn fit(
        &mut self,
        net: &mut VelocityNet,
        data: &[TrainingSample],
        log: &mut dyn FnMut(StepLog),
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per_epoch = data.len().div_ceil(self.config.batch_size);
        self.total_steps = Some(self.step + per_epoch * self.config.epochs);
        (0..self.config.epochs).map(|e| self.train_epoch(net, data, e, log)).collect()
    }
}
