//! Mini-batch AdamW training of the CRF NLL.
//!
//! Two learning-rate groups: the emission map (weights and bias) and the CRF
//! tables (transitions, start, end). Weight decay is decoupled and applies to
//! the emission weights only. Parameters start at zero, so the seed only
//! controls batch order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CrfModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub emission_lr: f64,
    pub crf_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Accumulate per-sample gradients on the rayon pool. The reduction
    /// order is fixed, so results are identical to the serial path.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            emission_lr: 1e-3,
            crf_lr: 5e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: CrfModel,
    pub initial_loss: f64,
    /// Mean NLL over the whole set after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

pub fn train(data: &[Example], labels: usize, config: &TrainConfig) -> Result<TrainReport> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let dim = first
        .features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyInput("training example with no tokens".into()))?;
    for ex in data {
        if ex.features.is_empty() {
            return Err(Error::EmptyInput("training example with no tokens".into()));
        }
        if let Some(bad) = ex.features.iter().find(|f| f.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                found: bad.len(),
                key: None,
            });
        }
    }
    if config.batch_size == 0 {
        return Err(Error::Config {
            field: "train.batch_size".into(),
            message: "must be positive".into(),
        });
    }

    let mut model = CrfModel::zeros(labels, dim);
    let initial_loss = mean_loss(&model, data, config.parallel)?;
    check_finite(initial_loss, 0)?;

    let p = model.params().len();
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = batch_gradient(&model, data, batch, config.parallel)?;
            check_finite(loss, epoch)?;
            step += 1;
            let bc1 = 1.0 - config.beta1.powi(step);
            let bc2 = 1.0 - config.beta2.powi(step);
            for k in 0..p {
                let g = grad[k];
                m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * g;
                m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * g * g;
                let lr = if model.is_emission_param(k) {
                    config.emission_lr
                } else {
                    config.crf_lr
                };
                let decay = if model.is_emission_weight(k) {
                    config.weight_decay * model.params()[k]
                } else {
                    0.0
                };
                let update = (m1[k] / bc1) / ((m2[k] / bc2).sqrt() + config.eps) + decay;
                model.params_mut()[k] -= lr * update;
            }
        }
        let loss = mean_loss(&model, data, config.parallel)?;
        check_finite(loss, epoch)?;
        log::debug!("epoch {epoch}: mean nll {loss:.6}");
        epoch_losses.push(loss);
    }

    Ok(TrainReport {
        model,
        initial_loss,
        epoch_losses,
    })
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

fn batch_gradient(model: &CrfModel, data: &[Example], batch: &[usize], parallel: bool) -> Result<(f64, Vec<f64>)> {
    let one = |&i: &usize| model.nll_and_gradient(&data[i].features, &data[i].labels);
    let parts: Vec<_> = if parallel {
        batch.par_iter().map(one).collect::<Result<_>>()?
    } else {
        batch.iter().map(one).collect::<Result<_>>()?
    };
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g.0) {
            *acc += v;
        }
    }
    for v in &mut grad {
        *v *= scale;
    }
    Ok((loss * scale, grad))
}

pub(crate) fn mean_loss(model: &CrfModel, data: &[Example], parallel: bool) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let one = |&i: &usize| -> Result<f64> {
        let ex = &data[i];
        Ok(model.log_partition(&ex.features)? - model.score(&ex.features, &ex.labels)?)
    };
    let losses: Vec<f64> = if parallel {
        all.par_iter().map(one).collect::<Result<_>>()?
    } else {
        all.iter().map(one).collect::<Result<_>>()?
    };
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}
