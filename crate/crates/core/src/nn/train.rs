//! Mini-batch training with per-epoch validation.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::optim::{lr_schedule, Optimizer, OptimizerConfig};
use super::tensor::Tensor;
use super::unet::{ParamSet, UNet, UNetConfig};
use super::NnError;
use crate::dataset::Sample;
use crate::raster::Grid2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub arch: UNetConfig,
    pub optimizer: OptimizerConfig,
    /// drives weight initialization and the per-epoch shuffles
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// lowest validation RMSE; the initialization when no epoch ran
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// A failed run together with the epochs that completed before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: NnError,
    pub history: Vec<EpochRecord>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} completed epochs)", self.error, self.history.len())
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<NnError> for TrainFailure {
    fn from(error: NnError) -> Self {
        Self {
            error,
            history: Vec::new(),
        }
    }
}

pub fn grid_tensor(g: &Grid2<f32>) -> Tensor<f32> {
    Tensor::from_vec(&[1, g.height(), g.width()], g.as_slice().to_vec()).expect("grid length")
}

/// Mean of per-sample gradients over `batch`, summed in batch order.
pub fn batch_gradient(
    net: &UNet<f32>,
    samples: &[Sample],
    batch: &[usize],
) -> Result<(f64, ParamSet<f32>), NnError> {
    let per_sample: Vec<Result<(f64, ParamSet<f32>), NnError>> = batch
        .par_iter()
        .map(|&i| net.loss_and_grad(&grid_tensor(&samples[i].input), &grid_tensor(&samples[i].target)))
        .collect();
    let mut total = net.params.zeros_like();
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    total.scale(1.0 / batch.len() as f32);
    Ok((loss / batch.len() as f64, total))
}

/// RMSE over the union of pixels of `indices` (equal-sized rasters).
pub fn dataset_rmse(net: &UNet<f32>, samples: &[Sample], indices: &[usize]) -> Result<f64, NnError> {
    let mse: Vec<Result<f64, NnError>> = indices
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let out = net.forward(&grid_tensor(&s.input))?;
            let n = out.len() as f64;
            Ok(out
                .data()
                .iter()
                .zip(s.target.iter())
                .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
                .sum::<f64>()
                / n)
        })
        .collect();
    let mut sum = 0.0;
    for m in mse {
        sum += m?;
    }
    Ok((sum / indices.len() as f64).sqrt())
}

fn check_inputs(samples: &[Sample], train_idx: &[usize], val_idx: &[usize], cfg: &TrainConfig) -> Result<(), NnError> {
    cfg.arch.validate()?;
    cfg.optimizer.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(NnError::Config("training and validation sets must be non-empty".into()));
    }
    let first = &samples[train_idx[0]];
    let (h, w) = (first.height(), first.width());
    cfg.arch.bottleneck_size(h, w)?;
    for &i in train_idx.iter().chain(val_idx) {
        let s = samples
            .get(i)
            .ok_or_else(|| NnError::Config(format!("sample index {i} out of range ({} samples)", samples.len())))?;
        if (s.height(), s.width()) != (h, w) {
            return Err(NnError::Shape {
                op: "dataset",
                left: vec![h, w],
                right: vec![s.height(), s.width()],
            });
        }
    }
    Ok(())
}

/// Trains a fresh network on `train_idx`, validating on `val_idx` after
/// every epoch.
pub fn train(
    samples: &[Sample],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainFailure> {
    check_inputs(samples, train_idx, val_idx, cfg)?;
    let mut net = UNet::<f32>::new(cfg.arch, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, &net.params);
    let snapshot = |net: &UNet<f32>, opt: &Optimizer, epoch| Checkpoint {
        config: cfg.arch,
        params: net.params.clone(),
        optimizer: Some(opt.clone()),
        seed: cfg.seed,
        epoch,
    };
    let mut best = snapshot(&net, &opt, 0);
    let mut best_val = f64::INFINITY;
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train_idx.to_vec();
    let batch_size = cfg.optimizer.batch_size();

    for epoch in 0..cfg.optimizer.epochs() {
        let lr = lr_schedule(&cfg.optimizer, epoch);
        order.copy_from_slice(train_idx);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let diverged = |loss| TrainFailure {
                error: NnError::Diverged { epoch, batch: b, loss },
                history: history.clone(),
            };
            let (loss, grads) = match batch_gradient(&net, samples, batch) {
                Ok(r) => r,
                Err(NnError::Diverged { loss, .. }) => return Err(diverged(loss)),
                Err(e) => return Err(e.into()),
            };
            opt.apply(&mut net.params, &grads, lr);
            if !net.params.all_finite() {
                return Err(diverged(f64::NAN));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_rmse = (loss_sum / order.len() as f64).sqrt();
        let val_rmse = dataset_rmse(&net, samples, val_idx).map_err(|error| TrainFailure {
            error,
            history: history.clone(),
        })?;
        log::info!("epoch {epoch}: train rmse {train_rmse:.5}, val rmse {val_rmse:.5}, lr {lr:e}");
        history.push(EpochRecord {
            epoch,
            train_rmse,
            val_rmse,
            lr,
        });
        if val_rmse < best_val {
            best_val = val_rmse;
            best = snapshot(&net, &opt, epoch + 1);
        }
    }
    let last = snapshot(&net, &opt, history.len());
    Ok(TrainOutcome { last, best, history })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_rmse,val_rmse,lr\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_rmse, r.val_rmse, r.lr));
    }
    s
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<(), NnError> {
    let io = |source| NnError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(history_csv(history).as_bytes()).map_err(io)
}
