//! Normal-only training and alignment-map calibration.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::model::{init_model, LossBreakdown, ModelConfig, ModelState};
use crate::raster::ImageTile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Where the command-line front end writes the checkpoint by default.
    pub checkpoint_path: Option<PathBuf>,
    /// Emit a progress line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-4,
            seed: 0,
            checkpoint_path: None,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VqadError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(VqadError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Maps raw quantization residuals to comparable alignment scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmNormalizer {
    pub scale: f64,
    pub percentile_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

impl TrainingLog {
    /// CSV with header `step,rec,cb,com,total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,rec,cb,com,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss.reconstruction, r.loss.codebook, r.loss.commitment, r.loss.total
            ));
        }
        out
    }

    pub fn reconstruction_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss.reconstruction).collect()
    }
}

/// First- and second-moment state for Adam over all model tensors.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(model: &ModelState, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, model: &mut ModelState, grads: &[Vec<f32>]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

fn check_dataset(tiles: &[ImageTile]) -> Result<()> {
    let first = tiles
        .first()
        .ok_or_else(|| VqadError::Data("training set is empty".into()))?;
    if let Some(bad) = tiles.iter().position(|t| !t.same_shape(first)) {
        return Err(VqadError::Shape(format!(
            "tile {bad} has shape {:?}, expected {:?}",
            tiles[bad].shape(),
            first.shape()
        )));
    }
    Ok(())
}

/// Trains a fresh model on normal tiles only.
///
/// Tiles are reshuffled every epoch by a generator seeded from
/// `train_cfg.seed`; the run is bit-reproducible for a fixed seed and
/// dataset order regardless of the worker count.
pub fn train(
    normal_tiles: &[ImageTile],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelState, TrainingLog)> {
    train_cfg.validate()?;
    check_dataset(normal_tiles)?;
    let mut model = init_model(model_cfg.clone())?;
    model.latent_shape(normal_tiles[0].height(), normal_tiles[0].width())?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = Adam::new(&model, train_cfg.learning_rate);
    let mut order: Vec<usize> = (0..normal_tiles.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&ImageTile> = chunk.iter().map(|&i| &normal_tiles[i]).collect();
            let (loss, grads) = model.batch_loss_and_grads(&batch)?;
            adam.step(&mut model, &grads.tensors);
            let step = log.steps.len();
            if train_cfg.log_every > 0 && step % train_cfg.log_every == 0 {
                log::info!(
                    "epoch {epoch} step {step}: rec {:.5} cb {:.5} com {:.5} total {:.5}",
                    loss.reconstruction,
                    loss.codebook,
                    loss.commitment,
                    loss.total
                );
            }
            log.steps.push(StepRecord { step, loss });
        }
    }
    Ok((model, log))
}

/// Linear-interpolation percentile with inclusive bounds (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Normalizer from an explicit residual population.
pub fn normalizer_from_residuals(residuals: &[f64], percentile_q: f64) -> Result<AmNormalizer> {
    if !(percentile_q > 0.0 && percentile_q <= 100.0) {
        return Err(VqadError::Config(format!(
            "calibration percentile must lie in (0, 100], got {percentile_q}"
        )));
    }
    let p = percentile(residuals, percentile_q)
        .ok_or_else(|| VqadError::Data("no residuals to calibrate on".into()))?;
    let max = residuals.iter().copied().fold(0.0, f64::max);
    let scale = if p > 0.0 {
        p
    } else if max > 0.0 {
        max
    } else {
        1.0
    };
    Ok(AmNormalizer {
        scale,
        percentile_q,
    })
}

/// Calibrates the alignment-map scale as the `q`-th percentile of all latent
/// quantization residuals over a set of normal tiles.
pub fn calibrate_am(model: &ModelState, normal_tiles: &[ImageTile], percentile_q: f64) -> Result<AmNormalizer> {
    if normal_tiles.is_empty() {
        return Err(VqadError::Data("calibration set is empty".into()));
    }
    let per_tile: Vec<Result<Vec<f64>>> = normal_tiles
        .par_iter()
        .map(|t| {
            let z = model.encode(t)?;
            let q = model.quantize(&z)?;
            Ok(q.residuals.iter().map(|&r| r as f64).collect())
        })
        .collect();
    let mut residuals = Vec::new();
    for r in per_tile {
        residuals.extend(r?);
    }
    normalizer_from_residuals(&residuals, percentile_q)
}
