use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;

use super::float::FloatModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Learning rate multiplier applied after every epoch.
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    /// Random horizontal flips and 4-pixel padded crops.
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub execution: Execution,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn lr_decay() -> f64 {
        1.0
    }
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            momentum: defaults::momentum(),
            weight_decay: 0.0,
            lr_decay: defaults::lr_decay(),
            augment: false,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch.
    pub loss: f64,
    /// Mean regularization penalty per batch.
    pub penalty: f64,
    pub train_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
}

/// Hooks for constrained training.
pub(crate) trait Regularizer {
    fn before_batch(&mut self, model: &FloatModel);
    /// Adds the penalty gradient to `grads` and returns the penalty value.
    fn penalty(&self, model: &FloatModel, grads: &mut [Vec<f64>]) -> f64;
    fn is_frozen(&self, layer: usize, index: usize) -> bool;
    fn after_epoch(&mut self, model: &mut FloatModel);
}

/// Plain cross-entropy training on the dataset's labels.
pub fn train_victim(arch: &Arch, data: &Dataset, config: &TrainConfig) -> Result<(FloatModel, TrainReport)> {
    let mut model = FloatModel::init(arch, config.seed)?;
    let report = train_loop(&mut model, data, config, None)?;
    Ok((model, report))
}

pub(crate) fn train_loop(
    model: &mut FloatModel,
    data: &Dataset,
    config: &TrainConfig,
    mut reg: Option<&mut dyn Regularizer>,
) -> Result<TrainReport> {
    config.validate()?;
    if !data.is_labeled() || data.is_empty() {
        return Err(Error::validation("training needs a non-empty labeled dataset"));
    }
    if data.image_len() != model.input_len() {
        return Err(Error::shape(format!("{} pixels", model.input_len()), data.image_len()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::validation(format!(
            "dataset has {} classes, model {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let images: Vec<Vec<f64>> = (0..data.len()).map(|i| data.image_f64(i)).collect();
    let mut velocity: Vec<Vec<f64>> = model.all_weights().iter().map(|w| vec![0.0; w.len()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = config.learning_rate;
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut penalty_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<(Vec<f64>, usize)> = batch
                .iter()
                .map(|&i| {
                    let x = if config.augment {
                        augment(&images[i], data.image_shape, &mut rng)
                    } else {
                        images[i].clone()
                    };
                    (x, data.label(i))
                })
                .collect();
            if let Some(r) = reg.as_deref_mut() {
                r.before_batch(model);
            }
            let (mut grads, loss, hits) = batch_gradients(model, &inputs, config.execution)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss;
            correct += hits;
            if let Some(r) = reg.as_deref() {
                penalty_sum += r.penalty(model, &mut grads);
            }
            batches += 1;
            step(model, &mut velocity, &grads, lr, config, reg.as_deref());
        }
        if let Some(r) = reg.as_deref_mut() {
            r.after_epoch(model);
        }
        report.curve.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            penalty: penalty_sum / batches.max(1) as f64,
            train_accuracy: 100.0 * correct as f64 / data.len() as f64,
            learning_rate: lr,
        });
        lr *= config.lr_decay;
    }
    Ok(report)
}

/// Mean gradient over a batch, total loss and number of correct predictions.
fn batch_gradients(
    model: &FloatModel,
    batch: &[(Vec<f64>, usize)],
    exec: Execution,
) -> Result<(Vec<Vec<f64>>, f64, usize)> {
    let scale = 1.0 / batch.len() as f64;
    let chunk = batch.len().div_ceil(exec.workers());
    let parts = exec.map_range(batch.len().div_ceil(chunk), |c| -> Result<(Vec<Vec<f64>>, f64, usize)> {
        let mut acc: Vec<Vec<f64>> = model.all_weights().iter().map(|w| vec![0.0; w.len()]).collect();
        let (mut loss, mut hits) = (0.0, 0);
        for (x, y) in &batch[c * chunk..((c + 1) * chunk).min(batch.len())] {
            let (l, predicted) = model.accumulate_grad(x, *y, scale, &mut acc, None)?;
            loss += l;
            hits += usize::from(predicted == *y);
        }
        Ok((acc, loss, hits))
    });
    let mut parts = parts.into_iter();
    let (mut grads, mut loss, mut hits) = parts.next().expect("non-empty batch")?;
    for p in parts {
        let (g, l, h) = p?;
        for (a, b) in grads.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        loss += l;
        hits += h;
    }
    Ok((grads, loss, hits))
}

fn step(
    model: &mut FloatModel,
    velocity: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    lr: f64,
    config: &TrainConfig,
    reg: Option<&dyn Regularizer>,
) {
    for (l, (v, g)) in velocity.iter_mut().zip(grads).enumerate() {
        let w = model.weights_mut(l);
        for i in 0..w.len() {
            if reg.is_some_and(|r| r.is_frozen(l, i)) {
                continue;
            }
            v[i] = config.momentum * v[i] - lr * (g[i] + config.weight_decay * w[i]);
            w[i] += v[i];
        }
    }
}

fn augment<R: Rng>(x: &[f64], [c, h, w]: [usize; 3], rng: &mut R) -> Vec<f64> {
    const PADDING: i64 = 4;
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(-PADDING..=PADDING);
    let dx = rng.gen_range(-PADDING..=PADDING);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for xx in 0..w {
                let col = if flip { w - 1 - xx } else { xx };
                let sx = col as i64 + dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[ch * h * w + y * w + xx] = x[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}
