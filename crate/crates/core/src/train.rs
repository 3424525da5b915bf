//! Mini-batch ADAM training loop shared by all network roles.

use std::io::Write;
use std::path::Path;

use fbpose_tensor::{AdamConfig, AdamState, ChaCha8Rng, Mode, Network, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            decay: 0.95,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            decay: self.decay,
            ..AdamConfig::default()
        }
    }

    pub fn with_epochs(&self, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss,eval_metric")?;
    for r in rows {
        writeln!(f, "{},{:.9e},{:.9e}", r.epoch, r.loss, r.metric)?;
    }
    Ok(())
}

/// A supervised objective over `len()` items.
pub trait Objective {
    fn len(&self) -> usize;

    /// Network input for the given items, `[batch, ...]`.
    fn batch(&mut self, items: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>>;

    /// Summed loss over the batch and the gradient of that sum with respect
    /// to the network output.
    fn loss(&mut self, items: &[usize], out: &Tensor<f32>) -> Result<(f64, Tensor<f32>)>;

    /// Hook after each completed epoch (1-based).
    fn end_epoch(&mut self, _epoch: usize, _net: &Network<f32>, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// Items visited in one epoch; defaults to every item once.
    fn epoch_items(&mut self, _rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch ADAM. `metric` is
/// evaluated after each epoch for the log. Non-finite losses or gradients
/// abort with the stage name and epoch.
pub fn fit<O: Objective>(
    net: &mut Network<f32>,
    obj: &mut O,
    cfg: &TrainConfig,
    stage: &str,
    mut metric: impl FnMut(&Network<f32>) -> Result<f64>,
) -> Result<Vec<EpochLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam(), net.params().iter().flatten());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let diverged = || CoreError::Diverged {
            stage: stage.to_string(),
            epoch,
        };
        let mut items = obj.epoch_items(&mut rng);
        items.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in items.chunks(cfg.batch_size.max(1)) {
            let x = obj.batch(chunk, &mut rng)?;
            let trace = net.forward(&x, &mut Mode::Train(&mut rng)).map_err(|e| match e {
                TensorError::NonFiniteActivation { .. } => diverged(),
                e => e.into(),
            })?;
            let out = net.trace_output(&trace);
            let (loss, mut grad) = obj.loss(chunk, &out)?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            total += loss;
            let scale = 1.0 / chunk.len() as f32;
            grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            if !grad.all_finite() {
                return Err(diverged());
            }
            let grads = net.backward(&trace, &grad)?;
            adam.step(net.params_mut().iter_mut().flatten(), grads.flat());
        }
        adam.end_epoch();
        obj.end_epoch(epoch, net, &mut rng)?;
        let m = metric(net)?;
        log.push(EpochLog {
            epoch,
            loss: total / items.len().max(1) as f64,
            metric: m,
        });
    }
    Ok(log)
}

/// Batched inference over `n` items built by `input`.
pub fn predict_all(net: &Network<f32>, n: usize, batch: usize, mut input: impl FnMut(&[usize]) -> Result<Tensor<f32>>) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let y = net.predict(&input(chunk)?)?;
        let per = y.len() / chunk.len();
        out.extend(y.data().chunks_exact(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Stacks per-item flat inputs into a `[batch, shape...]` tensor.
pub fn stack_inputs(rows: &[&[f32]], shape: &[usize]) -> Result<Tensor<f32>> {
    let mut full = vec![rows.len()];
    full.extend_from_slice(shape);
    let mut data = Vec::with_capacity(rows.len() * shape.iter().product::<usize>());
    for r in rows {
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(&full, data)?)
}

/// Squared-error objective against fixed targets.
pub struct Regression<'a> {
    pub inputs: &'a [Vec<f32>],
    pub input_shape: Vec<usize>,
    pub targets: &'a [Vec<f32>],
    /// Per-item loss weight.
    pub weight: f32,
}

impl Objective for Regression<'_> {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&mut self, items: &[usize], _rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let rows: Vec<&[f32]> = items.iter().map(|i| self.inputs[*i].as_slice()).collect();
        stack_inputs(&rows, &self.input_shape)
    }

    fn loss(&mut self, items: &[usize], out: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        let per = out.len() / items.len();
        let mut grad = vec![0f32; out.len()];
        let mut loss = 0.0;
        for (b, i) in items.iter().enumerate() {
            let t = &self.targets[*i];
            for k in 0..per {
                let d = out.data()[b * per + k] - t[k];
                loss += self.weight as f64 * (d as f64).powi(2);
                grad[b * per + k] = 2.0 * self.weight * d;
            }
        }
        Ok((loss, Tensor::from_vec(out.shape(), grad)?))
    }
}
