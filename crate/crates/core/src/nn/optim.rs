//! SGD with momentum and Adam, both with step-decay learning rates.

use std::fmt;
use std::str::FromStr;

use super::tensor::{Scalar, Tensor};
use super::unet::ParamSet;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub drop_factor: f64,
    pub drop_period_epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr0: f64,
    pub drop_factor: f64,
    pub drop_period_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

pub const PRESET_NAMES: [&str; 4] = ["sgd-3t", "adam-3t", "sgd-7t", "adam-7t"];

impl OptimizerConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let cfg = match name {
            "sgd-3t" => Self::Sgd(SgdConfig {
                lr0: 0.1,
                drop_factor: 0.1,
                drop_period_epochs: 15,
                momentum: 0.925,
                batch_size: 1,
                epochs: 30,
            }),
            "adam-3t" => Self::Adam(AdamConfig {
                lr0: 1e-4,
                drop_factor: 0.1,
                drop_period_epochs: 5,
                beta1: 0.95,
                beta2: 0.9,
                epsilon: 1e-4,
                batch_size: 1,
                epochs: 6,
            }),
            "sgd-7t" => Self::Sgd(SgdConfig {
                lr0: 0.1,
                drop_factor: 0.1,
                drop_period_epochs: 4,
                momentum: 0.95,
                batch_size: 4,
                epochs: 30,
            }),
            "adam-7t" => Self::Adam(AdamConfig {
                lr0: 1e-4,
                drop_factor: 0.1,
                drop_period_epochs: 5,
                beta1: 0.8,
                beta2: 0.995,
                epsilon: 1e-6,
                batch_size: 16,
                epochs: 6,
            }),
            _ => return None,
        };
        Some(cfg)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        let (lr0, drop, period, batch) = match self {
            Self::Sgd(c) => {
                if !(0.0..1.0).contains(&c.momentum) {
                    return bad("momentum must be in [0, 1)");
                }
                (c.lr0, c.drop_factor, c.drop_period_epochs, c.batch_size)
            }
            Self::Adam(c) => {
                if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) {
                    return bad("beta1 and beta2 must be in [0, 1)");
                }
                if !(c.epsilon > 0.0) {
                    return bad("epsilon must be positive");
                }
                (c.lr0, c.drop_factor, c.drop_period_epochs, c.batch_size)
            }
        };
        if !(lr0 > 0.0) || !lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(drop > 0.0 && drop <= 1.0) {
            return bad("drop_factor must be in (0, 1]");
        }
        if period == 0 {
            return bad("drop_period_epochs must be at least 1");
        }
        if batch == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        match self {
            Self::Sgd(c) => c.epochs,
            Self::Adam(c) => c.epochs,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Self::Sgd(c) => c.batch_size,
            Self::Adam(c) => c.batch_size,
        }
    }

    fn schedule(&self) -> (f64, f64, usize) {
        match self {
            Self::Sgd(c) => (c.lr0, c.drop_factor, c.drop_period_epochs),
            Self::Adam(c) => (c.lr0, c.drop_factor, c.drop_period_epochs),
        }
    }

    /// Runs for `epochs` epochs, stretching the drop period by the same
    /// factor (rounded, at least 1) so the decay happens at the same
    /// fraction of training.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let (e0, p0) = match self {
            Self::Sgd(c) => (c.epochs, c.drop_period_epochs),
            Self::Adam(c) => (c.epochs, c.drop_period_epochs),
        };
        let period = if e0 == 0 {
            p0
        } else {
            ((p0 * epochs) as f64 / e0 as f64).round().max(1.0) as usize
        };
        match &mut self {
            Self::Sgd(c) => {
                c.epochs = epochs;
                c.drop_period_epochs = period;
            }
            Self::Adam(c) => {
                c.epochs = epochs;
                c.drop_period_epochs = period;
            }
        }
        self
    }

    pub fn with_batch_size(mut self, batch: usize) -> Self {
        match &mut self {
            Self::Sgd(c) => c.batch_size = batch,
            Self::Adam(c) => c.batch_size = batch,
        }
        self
    }

    /// `(key, value)` pairs for manifests.
    pub fn describe(&self) -> Vec<(&'static str, String)> {
        match self {
            Self::Sgd(c) => vec![
                ("optimizer", "sgd".into()),
                ("lr0", c.lr0.to_string()),
                ("drop_factor", c.drop_factor.to_string()),
                ("drop_period_epochs", c.drop_period_epochs.to_string()),
                ("momentum", c.momentum.to_string()),
                ("batch_size", c.batch_size.to_string()),
                ("epochs", c.epochs.to_string()),
            ],
            Self::Adam(c) => vec![
                ("optimizer", "adam".into()),
                ("lr0", c.lr0.to_string()),
                ("drop_factor", c.drop_factor.to_string()),
                ("drop_period_epochs", c.drop_period_epochs.to_string()),
                ("beta1", c.beta1.to_string()),
                ("beta2", c.beta2.to_string()),
                ("epsilon", c.epsilon.to_string()),
                ("batch_size", c.batch_size.to_string()),
                ("epochs", c.epochs.to_string()),
            ],
        }
    }
}

impl FromStr for OptimizerConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::preset(s).ok_or_else(|| format!("unknown preset {s:?}; expected one of {}", PRESET_NAMES.join(", ")))
    }
}

/// `lr0 · drop^floor(epoch / period)`.
pub fn lr_schedule(config: &OptimizerConfig, epoch: usize) -> f64 {
    let (lr0, drop, period) = config.schedule();
    lr0 * drop.powi((epoch / period) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd = 0,
    Adam = 1,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Optimizer state: SGD keeps one velocity per parameter, Adam two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub slots: Vec<ParamSet<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet<f32>) -> Self {
        let n = match config {
            OptimizerConfig::Sgd(_) => 1,
            OptimizerConfig::Adam(_) => 2,
        };
        Self {
            config,
            step: 0,
            slots: vec![params.zeros_like(); n],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.config {
            OptimizerConfig::Sgd(_) => OptimizerKind::Sgd,
            OptimizerConfig::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd(c) => {
                for i in 0..params.len() {
                    sgd_step(
                        params.tensor_mut(i),
                        self.slots[0].tensor_mut(i),
                        grads.tensor(i),
                        lr,
                        c.momentum,
                    );
                }
            }
            OptimizerConfig::Adam(c) => {
                let (m, v) = self.slots.split_at_mut(1);
                for i in 0..params.len() {
                    adam_step(
                        params.tensor_mut(i),
                        m[0].tensor_mut(i),
                        v[0].tensor_mut(i),
                        grads.tensor(i),
                        lr,
                        &c,
                        self.step,
                    );
                }
            }
        }
    }
}

/// `v ← μ·v − lr·g; w ← w + v`.
pub fn sgd_step<T: Scalar>(w: &mut Tensor<T>, v: &mut Tensor<T>, g: &Tensor<T>, lr: f64, momentum: f64) {
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for ((w, v), &g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *v = mu * *v - lr * g;
        *w = *w + *v;
    }
}

/// Bias-corrected Adam update at 1-based step `t`.
pub fn adam_step<T: Scalar>(
    w: &mut Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
    c: &AdamConfig,
    t: u64,
) {
    let c1 = 1.0 - c.beta1.powi(t as i32);
    let c2 = 1.0 - c.beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one, eps, lr) = (T::one(), T::from_f64(c.epsilon), T::from_f64(lr));
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    for (((w, m), v), &g) in w
        .data_mut()
        .iter_mut()
        .zip(m.data_mut())
        .zip(v.data_mut())
        .zip(g.data())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *w = *w - lr * mh / (vh.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in PRESET_NAMES {
            let c: OptimizerConfig = name.parse().unwrap();
            c.validate().unwrap();
        }
        assert!("sgd-9t".parse::<OptimizerConfig>().is_err());
    }

    #[test]
    fn epoch_scaling_keeps_decay_fraction() {
        let c = OptimizerConfig::preset("adam-3t").unwrap().with_epochs(24);
        assert_eq!(c.epochs(), 24);
        assert_eq!(lr_schedule(&c, 19), 1e-4);
        assert!((lr_schedule(&c, 20) - 1e-5).abs() < 1e-18);
        let same = OptimizerConfig::preset("sgd-3t").unwrap().with_epochs(30);
        assert_eq!(same, OptimizerConfig::preset("sgd-3t").unwrap());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = OptimizerConfig::preset("sgd-3t").unwrap();
        if let OptimizerConfig::Sgd(s) = &mut c {
            s.momentum = 1.0;
        }
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::preset("adam-7t").unwrap().with_batch_size(0).validate().is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let c = OptimizerConfig::preset("sgd-7t").unwrap();
        for e in 0..40 {
            assert!(lr_schedule(&c, e + 1) <= lr_schedule(&c, e));
        }
    }
}
