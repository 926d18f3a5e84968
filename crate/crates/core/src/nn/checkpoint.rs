//! `SARW` weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! size    field
//! 4       magic "SARW"
//! 2       version (u16, currently 1)
//! 4       depth (u32)
//! 4       base_channels (u32)
//! 8       seed (u64)
//! 4       epoch (u32, epochs completed)
//! 4       tensor_count (u32)
//! per tensor:
//!   2       name length n (u16)
//!   n       name (UTF-8)
//!   1       rank r (u8)
//!   4·r     extents (u32 each)
//!   4·len   values (f32, row-major)
//! 1       optimizer kind (u8: 0 = SGD, 1 = Adam, 255 = none)
//! if an optimizer is present:
//!   8       step count (u64)
//!   8       lr0 (f64)
//!   8       drop_factor (f64)
//!   4       drop_period_epochs (u32)
//!   SGD:  8 momentum (f64)
//!   Adam: 8 beta1, 8 beta2, 8 epsilon (f64)
//!   4       batch_size (u32)
//!   4       epochs (u32)
//!   then 1 (SGD: velocity) or 2 (Adam: first, second moment) state sets,
//!   each holding the values of every parameter tensor in order (f32)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::optim::{AdamConfig, Optimizer, OptimizerConfig, SgdConfig};
use super::tensor::Tensor;
use super::unet::{ParamSet, UNet, UNetConfig};
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SARW";
pub const CHECKPOINT_VERSION: u16 = 1;
const NO_OPTIMIZER: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub params: ParamSet<f32>,
    pub optimizer: Option<Optimizer>,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn model(&self) -> Result<UNet<f32>, NnError> {
        UNet::from_params(self.config, self.params.clone())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), NnError> {
    let v = u32::try_from(v).map_err(|_| NnError::Config(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, NnError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, ckpt.config.depth, "depth")?;
    put_u32(&mut out, ckpt.config.base_channels, "base_channels")?;
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    put_u32(&mut out, ckpt.epoch, "epoch")?;
    put_u32(&mut out, ckpt.params.len(), "tensor count")?;
    for (name, t) in ckpt.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| NnError::Config(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d, "extent")?;
        }
        put_values(&mut out, t);
    }
    match &ckpt.optimizer {
        None => out.push(NO_OPTIMIZER),
        Some(opt) => {
            out.push(opt.kind() as u8);
            out.extend_from_slice(&opt.step.to_le_bytes());
            let (lr0, drop, period, batch, epochs) = match opt.config {
                OptimizerConfig::Sgd(c) => (c.lr0, c.drop_factor, c.drop_period_epochs, c.batch_size, c.epochs),
                OptimizerConfig::Adam(c) => (c.lr0, c.drop_factor, c.drop_period_epochs, c.batch_size, c.epochs),
            };
            out.extend_from_slice(&lr0.to_le_bytes());
            out.extend_from_slice(&drop.to_le_bytes());
            put_u32(&mut out, period, "drop period")?;
            match opt.config {
                OptimizerConfig::Sgd(c) => out.extend_from_slice(&c.momentum.to_le_bytes()),
                OptimizerConfig::Adam(c) => {
                    out.extend_from_slice(&c.beta1.to_le_bytes());
                    out.extend_from_slice(&c.beta2.to_le_bytes());
                    out.extend_from_slice(&c.epsilon.to_le_bytes());
                }
            }
            put_u32(&mut out, batch, "batch size")?;
            put_u32(&mut out, epochs, "epochs")?;
            for slot in &opt.slots {
                if !slot.mismatches(&ckpt.params).is_empty() {
                    return Err(NnError::Config("optimizer state does not match parameters".into()));
                }
                for (_, t) in slot.iter() {
                    put_values(&mut out, t);
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, what: &str) -> Result<Vec<f32>, NnError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn err(&self, reason: &str) -> NnError {
        NnError::Format {
            offset: self.pos,
            reason: reason.into(),
        }
    }
}

/// Parses a checkpoint; shape agreement with the architecture is checked
/// and every mismatched tensor is listed.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(NnError::Format {
            offset: 0,
            reason: "bad magic, expected SARW".into(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let config = UNetConfig {
        depth: r.u32("depth")?,
        base_channels: r.u32("base_channels")?,
    };
    config.validate().map_err(|e| NnError::Format {
        offset: 6,
        reason: e.to_string(),
    })?;
    let seed = r.u64("seed")?;
    let epoch = r.u32("epoch")?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| r.err("name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err("tensor size overflow"))?;
        let data = r.values(len, "tensor values")?;
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    let params = ParamSet::new(entries).map_err(|e| r.err(&e.to_string()))?;
    let mismatched = ParamSet::<f32>::zeros(&config).mismatches(&params);
    if !mismatched.is_empty() {
        return Err(NnError::Incompatible { mismatched });
    }

    let kind_at = r.pos;
    let kind = r.u8("optimizer kind")?;
    let optimizer = if kind == NO_OPTIMIZER {
        None
    } else {
        let step = r.u64("step")?;
        let lr0 = r.f64("lr0")?;
        let drop_factor = r.f64("drop factor")?;
        let drop_period_epochs = r.u32("drop period")?;
        let config = match kind {
            0 => {
                let momentum = r.f64("momentum")?;
                OptimizerConfig::Sgd(SgdConfig {
                    lr0,
                    drop_factor,
                    drop_period_epochs,
                    momentum,
                    batch_size: r.u32("batch size")?,
                    epochs: r.u32("epochs")?,
                })
            }
            1 => {
                let (beta1, beta2, epsilon) = (r.f64("beta1")?, r.f64("beta2")?, r.f64("epsilon")?);
                OptimizerConfig::Adam(AdamConfig {
                    lr0,
                    drop_factor,
                    drop_period_epochs,
                    beta1,
                    beta2,
                    epsilon,
                    batch_size: r.u32("batch size")?,
                    epochs: r.u32("epochs")?,
                })
            }
            k => {
                return Err(NnError::Format {
                    offset: kind_at,
                    reason: format!("unknown optimizer kind {k}"),
                })
            }
        };
        let mut opt = Optimizer::new(config, &params);
        opt.step = step;
        for slot in &mut opt.slots {
            for (_, t) in slot.iter_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&r.values(n, "optimizer state")?);
            }
        }
        Some(opt)
    };
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        seed,
        epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), NnError> {
    let bytes = encode_checkpoint(ckpt)?;
    let io = |source| NnError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
