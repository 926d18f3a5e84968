//! Paired (input, target) samples, the train/validation/test split, and the
//! `SARD` binary container.
//!
//! File layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SARD"
//! 4       2     version (u16, currently 1)
//! 6       4     sample_count (u32)
//! 10      4     height H (u32)
//! 14      4     width W (u32)
//! 18      ...   sample_count records:
//!                 8  offset_x (f64, meters)
//!                 8  offset_y (f64, meters)
//!                 1  field tag (u8: 0 = 3T, 1 = 7T)
//!                 8  phantom_seed (u64)
//!                 8  norm_factor (f64, W/kg)
//!                 4·H·W  input raster (f32, row-major)
//!                 4·H·W  target raster (f32, row-major)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::emfield::FieldSolution;
use crate::phantom::{rasterize_mask, FieldStrength, TissueGrid};
use crate::raster::Grid2;
use crate::sarmap::SarMap;

pub const DATASET_MAGIC: &[u8; 4] = b"SARD";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 18;
const META_LEN: usize = 33;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub offset_x: f64,
    pub offset_y: f64,
    pub field: FieldStrength,
    pub phantom_seed: u64,
    /// W/kg represented by a target value of 1
    pub norm_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// tissue mask × unloaded B1, scaled to max 1
    pub input: Grid2<f32>,
    /// 1g-averaged SAR scaled to max 1
    pub target: Grid2<f32>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.input.height()
    }

    pub fn width(&self) -> usize {
        self.input.width()
    }

    /// Target back in W/kg.
    pub fn denormalized_target(&self) -> Grid2<f64> {
        self.target.map(|&v| v as f64 * self.meta.norm_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("no SAR deposited (all-zero target)")]
    NoSarDeposited,
    #[error("no tissue in the input raster")]
    EmptyInput,
    #[error("field, SAR and tissue rasters differ in shape")]
    ShapeMismatch,
}

/// Builds a normalized sample from a placed phantom and its solved fields.
pub fn build_sample(
    placed: &TissueGrid,
    solution: &FieldSolution,
    sar: &SarMap,
    field: FieldStrength,
    phantom_seed: u64,
) -> Result<Sample, RejectReason> {
    let mask = rasterize_mask(placed);
    if !mask.same_shape(&solution.b1_unloaded) || !mask.same_shape(&sar.averaged_1g) {
        return Err(RejectReason::ShapeMismatch);
    }
    let weighted: Vec<f64> = mask
        .iter()
        .zip(solution.b1_unloaded.iter())
        .map(|(&m, &b)| if m == 0 { 0.0 } else { b })
        .collect();
    let in_max = weighted.iter().copied().fold(0.0, f64::max);
    if in_max <= 0.0 {
        return Err(RejectReason::EmptyInput);
    }
    let t_max = sar.averaged_1g.iter().copied().fold(0.0, f64::max);
    if t_max <= 0.0 {
        return Err(RejectReason::NoSarDeposited);
    }
    let (w, h) = (mask.width(), mask.height());
    let input = Grid2::from_vec(w, h, weighted.iter().map(|&v| (v / in_max) as f32).collect()).unwrap();
    let target = sar.averaged_1g.map(|&v| (v / t_max) as f32);
    Ok(Sample {
        input,
        target,
        meta: SampleMeta {
            offset_x: solution.placement.offset_x,
            offset_y: solution.placement.offset_y,
            field,
            phantom_seed,
            norm_factor: t_max,
        },
    })
}

/// Split proportions as exact fractions `(numerator, denominator)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitFractions {
    pub train: (u64, u64),
    pub val: (u64, u64),
}

impl Default for SplitFractions {
    /// 16,320 / 4,080 / remainder out of 22,848.
    fn default() -> Self {
        Self {
            train: (5, 7),
            val: (4080, 22848),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `floor(n·f_train)` and `floor(n·f_val)` indices from a seeded shuffle;
/// the rest go to test. Each list is returned in ascending order.
pub fn split(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitIndex, DatasetError> {
    if n < 3 {
        return Err(DatasetError::InvalidSplit(format!("need at least 3 samples, got {n}")));
    }
    let (tn, td) = fractions.train;
    let (vn, vd) = fractions.val;
    if td == 0 || vd == 0 {
        return Err(DatasetError::InvalidSplit("zero denominator".into()));
    }
    let n_train = (n as u128 * tn as u128 / td as u128) as usize;
    let n_val = (n as u128 * vn as u128 / vd as u128) as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DatasetError::InvalidSplit(format!(
            "{n} samples give {n_train} train / {n_val} val / {} test",
            n.saturating_sub(n_train + n_val)
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndex { train, val, test })
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>, DatasetError> {
    let first = samples
        .first()
        .ok_or_else(|| DatasetError::Invalid("no samples to write".into()))?;
    let (h, w) = (first.height(), first.width());
    for (i, s) in samples.iter().enumerate() {
        if s.height() != h || s.width() != w || s.target.height() != h || s.target.width() != w {
            return Err(DatasetError::Invalid(format!(
                "sample {i} is {}x{}, expected {h}x{w}",
                s.height(),
                s.width()
            )));
        }
    }
    let count = u32::try_from(samples.len()).map_err(|_| DatasetError::Invalid("too many samples".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + samples.len() * (META_LEN + 8 * h * w));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.meta.offset_x.to_le_bytes());
        buf.extend_from_slice(&s.meta.offset_y.to_le_bytes());
        buf.push(s.meta.field.tag());
        buf.extend_from_slice(&s.meta.phantom_seed.to_le_bytes());
        buf.extend_from_slice(&s.meta.norm_factor.to_le_bytes());
        for v in s.input.iter().chain(s.target.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<(), DatasetError> {
    let bytes = encode_dataset(samples)?;
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    f.write_all(&bytes).map_err(io)?;
    f.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.bytes.len() - self.pos < n {
            return Err(DatasetError::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DatasetError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>, DatasetError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DatasetError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = u16::from_le_bytes(c.array("version")?);
    if version != DATASET_VERSION {
        return Err(DatasetError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes(c.array("sample count")?) as usize;
    let h = u32::from_le_bytes(c.array("height")?) as usize;
    let w = u32::from_le_bytes(c.array("width")?) as usize;
    if h == 0 || w == 0 {
        return Err(DatasetError::Format {
            offset: 10,
            reason: format!("empty raster size {h}x{w}"),
        });
    }
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let offset_x = f64::from_le_bytes(c.array("offset_x")?);
        let offset_y = f64::from_le_bytes(c.array("offset_y")?);
        let tag_pos = c.pos;
        let tag = c.array::<1>("field tag")?[0];
        let field = FieldStrength::from_tag(tag).ok_or_else(|| DatasetError::Format {
            offset: tag_pos,
            reason: format!("sample {i}: unknown field tag {tag}"),
        })?;
        let phantom_seed = u64::from_le_bytes(c.array("phantom seed")?);
        let norm_factor = f64::from_le_bytes(c.array("norm factor")?);
        let mut raster = |what: &str| -> Result<Grid2<f32>, DatasetError> {
            let raw = c.take(4 * h * w, what)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Grid2::from_vec(w, h, data).unwrap())
        };
        let input = raster("input raster")?;
        let target = raster("target raster")?;
        samples.push(Sample {
            input,
            target,
            meta: SampleMeta {
                offset_x,
                offset_y,
                field,
                phantom_seed,
                norm_factor,
            },
        });
    }
    if c.pos != bytes.len() {
        return Err(DatasetError::Format {
            offset: c.pos,
            reason: format!(
                "{} trailing bytes after the declared {count} samples",
                bytes.len() - c.pos
            ),
        });
    }
    Ok(samples)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, salt: u32) -> Sample {
        Sample {
            input: Grid2::from_fn(w, h, |x, y| ((x * 7 + y * 3 + salt as usize) % 11) as f32 / 10.0),
            target: Grid2::from_fn(w, h, |x, y| ((x + 2 * y) as f32 * 0.013 + salt as f32).fract()),
            meta: SampleMeta {
                offset_x: 0.01 * salt as f64,
                offset_y: -0.02,
                field: if salt % 2 == 0 { FieldStrength::ThreeT } else { FieldStrength::SevenT },
                phantom_seed: u64::MAX - salt as u64,
                norm_factor: 3.5e-3,
            },
        }
    }

    #[test]
    fn paper_split_counts() {
        let s = split(22_848, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16_320, 4_080, 2_448));
    }

    #[test]
    fn seven_samples_split_five_one_one() {
        let s = split(7, SplitFractions::default(), 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let a = split(100, SplitFractions::default(), 42).unwrap();
        assert_eq!(a, split(100, SplitFractions::default(), 42).unwrap());
        assert_ne!(a, split(100, SplitFractions::default(), 43).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_split_rejected() {
        assert!(split(2, SplitFractions::default(), 0).is_err());
        // 3 samples: floor(15/7)=2 train, floor(3*4080/22848)=0 val
        assert!(matches!(split(3, SplitFractions::default(), 0), Err(DatasetError::InvalidSplit(_))));
    }

    proptest! {
        #[test]
        fn split_fraction_bounds(n in 6usize..5000, seed in any::<u64>()) {
            if let Ok(s) = split(n, SplitFractions::default(), seed) {
                let f = s.train.len() as f64 / n as f64;
                prop_assert!(f <= 5.0 / 7.0 + 1e-12);
                prop_assert!(f >= 5.0 / 7.0 - 1.0 / n as f64 - 1e-12);
                prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            }
        }

        #[test]
        fn encode_decode_identity(h in 1usize..6, w in 1usize..6, n in 1usize..4, salt in 0u32..50) {
            let samples: Vec<Sample> = (0..n).map(|i| sample(h, w, salt + i as u32)).collect();
            let bytes = encode_dataset(&samples).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + n * (META_LEN + 8 * h * w));
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sard");
        let samples: Vec<Sample> = (0..3).map(|i| sample(4, 5, i)).collect();
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert!(a.input.iter().zip(b.input.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.target.iter().zip(b.target.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.meta.norm_factor.to_bits(), b.meta.norm_factor.to_bits());
            assert_eq!(a.meta, b.meta);
        }
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let samples: Vec<Sample> = (0..2).map(|i| sample(3, 3, i)).collect();
        let good = encode_dataset(&samples).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(DatasetError::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(DatasetError::Format { offset: 4, .. })));
    }

    #[test]
    fn count_mismatch_detected() {
        let samples: Vec<Sample> = (0..2).map(|i| sample(3, 3, i)).collect();
        let good = encode_dataset(&samples).unwrap();
        let record = META_LEN + 8 * 9;

        let mut more = good.clone();
        more[6..10].copy_from_slice(&3u32.to_le_bytes());
        match decode_dataset(&more) {
            Err(DatasetError::Format { offset, .. }) => assert_eq!(offset, HEADER_LEN + 2 * record),
            other => panic!("{other:?}"),
        }

        let mut fewer = good.clone();
        fewer[6..10].copy_from_slice(&1u32.to_le_bytes());
        match decode_dataset(&fewer) {
            Err(DatasetError::Format { offset, .. }) => assert_eq!(offset, HEADER_LEN + record),
            other => panic!("{other:?}"),
        }

        let truncated = &good[..good.len() - 5];
        assert!(matches!(decode_dataset(truncated), Err(DatasetError::Format { .. })));
    }

    #[test]
    fn mixed_sizes_rejected_on_write() {
        let samples = vec![sample(3, 3, 0), sample(4, 3, 1)];
        assert!(matches!(encode_dataset(&samples), Err(DatasetError::Invalid(_))));
        assert!(encode_dataset(&[]).is_err());
    }
}
