//! Noise-prediction training on paired (source, target) slices.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::q_sample;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::slice::Slice;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::net::{time_features, SmallNet};
use super::Precision;

/// Whether every batch item gets its own timestep or the batch shares one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepDraw {
    #[default]
    PerItem,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    pub timestep_draw: TimestepDraw,
    /// Compute per-item gradients on the rayon pool. The reduction order is
    /// fixed, so results are identical to the sequential path.
    pub parallel: bool,
    /// Decay of an exponential moving average of the weights; the returned
    /// network carries the average. 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            iterations: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            precision: Precision::F32,
            timestep_draw: TimestepDraw::PerItem,
            parallel: false,
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam moment decays must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(invalid("Adam eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("EMA decay must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One training example: source slice `condition`, target-contrast slice
/// `target`, the timestep and the forward noise.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub condition: &'a Slice,
    pub target: &'a Slice,
    pub t: usize,
    pub epsilon: Slice,
}

/// Per-pixel mean of `(ε − ε_θ(b ⊕ x_t, t))²` with
/// `x_t = √ᾱ_t b̂ + √(1 − ᾱ_t) ε`.
pub fn training_loss(
    net: &SmallNet,
    condition: &Slice,
    target: &Slice,
    t: usize,
    epsilon: &Slice,
    sched: &NoiseSchedule,
) -> Result<f64> {
    condition.ensure_same_shape(target, "training target")?;
    let xt = q_sample(target, t, epsilon, sched)?;
    let pred = net.predict_slice(condition, &xt, time_features(sched, t))?;
    Ok(mean_sq_diff(pred.data(), epsilon.data()))
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn item_gradient(net: &SmallNet, item: &BatchItem<'_>, sched: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
    item.condition.ensure_same_shape(item.target, "training target")?;
    let xt = q_sample(item.target, item.t, &item.epsilon, sched)?;
    let cache = net.forward(item.condition, &xt, time_features(sched, item.t))?;
    let n = xt.len() as f64;
    let out = cache.output();
    let loss = mean_sq_diff(out, item.epsilon.data());
    let d_out: Vec<f64> = out
        .iter()
        .zip(item.epsilon.data())
        .map(|(o, e)| 2.0 * (o - e) / n)
        .collect();
    let mut grad = vec![0.0; net.params().len()];
    net.backward(&cache, &d_out, &mut grad)?;
    Ok((loss, grad))
}

/// Batch-mean loss and its gradient with respect to every network weight.
pub fn loss_gradient(
    net: &SmallNet,
    batch: &[BatchItem<'_>],
    sched: &NoiseSchedule,
    parallel: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let per_item: Vec<(f64, Vec<f64>)> = if parallel {
        batch
            .par_iter()
            .map(|item| item_gradient(net, item, sched))
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .map(|item| item_gradient(net, item, sched))
            .collect::<Result<_>>()?
    };
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    for g in &mut grad {
        *g *= scale;
    }
    loss *= scale;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFailure("non-finite loss or gradient".into()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SmallNet,
    /// Batch loss of every iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

pub fn train(
    net: SmallNet,
    pairs: &[(Slice, Slice)],
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(net, pairs, sched, config, |_, _| {})
}

/// Like [`train`], calling `progress(iteration, loss)` after every update.
pub fn train_with_progress(
    mut net: SmallNet,
    pairs: &[(Slice, Slice)],
    sched: &NoiseSchedule,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (first_src, _) = pairs.first().ok_or_else(|| invalid("no training pairs"))?;
    let shape = first_src.shape();
    if let Some(i) = pairs
        .iter()
        .position(|(b, bh)| b.shape() != shape || bh.shape() != shape)
    {
        return Err(invalid(format!("training pair {i} does not have shape {shape:?}")));
    }
    net.set_geometry(Some(shape));
    for p in net.params_mut() {
        *p = config.precision.round(*p);
    }

    let adam = config.adam();
    let mut state = AdamState::new(net.params().len());
    let mut rng = rng::stream(config.seed);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut ema = (config.ema_decay > 0.0).then(|| net.params().to_vec());
    let steps = sched.steps();
    let (h, w) = shape;

    for iteration in 1..=config.iterations {
        let shared_t = rng.random_range(1..=steps);
        let batch: Vec<BatchItem<'_>> = (0..config.batch_size)
            .map(|_| {
                let (b, bh) = &pairs[rng.random_range(0..pairs.len())];
                let t = match config.timestep_draw {
                    TimestepDraw::PerItem => rng.random_range(1..=steps),
                    TimestepDraw::PerBatch => shared_t,
                };
                BatchItem {
                    condition: b,
                    target: bh,
                    t,
                    epsilon: rng::gaussian_slice(&mut rng, h, w),
                }
            })
            .collect();
        let (loss, grad) = loss_gradient(&net, &batch, sched, config.parallel).map_err(|e| {
            Error::NumericFailure(format!("training diverged at iteration {iteration}: {e}"))
        })?;
        adam_step(net.params_mut(), &grad, &mut state, &adam)?;
        for p in net.params_mut() {
            *p = config.precision.round(*p);
        }
        if let Some(avg) = ema.as_mut() {
            // Short warm-up so early weights do not dominate the average.
            let d = config.ema_decay.min((1 + iteration) as f64 / (10 + iteration) as f64);
            for (a, &p) in avg.iter_mut().zip(net.params()) {
                *a = d * *a + (1.0 - d) * p;
            }
        }
        losses.push(loss);
        progress(iteration, loss);
    }
    if let Some(avg) = ema {
        for (p, a) in net.params_mut().iter_mut().zip(avg) {
            *p = config.precision.round(a);
        }
    }
    Ok(TrainOutcome { net, losses })
}
