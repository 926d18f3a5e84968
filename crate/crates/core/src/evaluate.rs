//! Percent RMSE and SSIM between predicted and simulated SAR maps, plus
//! CSV reports and PGM triptychs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Sample;
use crate::raster::Grid2;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const RMSE_BAND_PCT: f64 = 11.0;
pub const SSIM_BAND: f64 = 0.84;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("metric undefined: ground truth is all zero")]
    ZeroTruth,
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("nothing to evaluate: the test split is empty")]
    EmptySplit,
    #[error("prediction failed for sample {id}: {reason}")]
    Predictor { id: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_same<T, U>(a: &Grid2<T>, b: &Grid2<U>) -> Result<(), MetricError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricError::ShapeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

/// `100 · sqrt(mean((pred − truth)²)) / max(truth)` over the whole raster.
pub fn rmse_pct(pred: &Grid2<f64>, truth: &Grid2<f64>) -> Result<f64, MetricError> {
    rmse_pct_masked(pred, truth, None)
}

/// As [`rmse_pct`], restricted to cells where `mask` is set.
pub fn rmse_pct_masked(pred: &Grid2<f64>, truth: &Grid2<f64>, mask: Option<&Grid2<bool>>) -> Result<f64, MetricError> {
    check_same(pred, truth)?;
    if let Some(m) = mask {
        check_same(m, truth)?;
    }
    let keep = |i: usize| mask.is_none_or(|m| m.as_slice()[i]);
    let peak = (0..truth.len())
        .filter(|&i| keep(i))
        .map(|i| truth.as_slice()[i])
        .fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(MetricError::ZeroTruth);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in (0..truth.len()).filter(|&i| keep(i)) {
        sum += (pred.as_slice()[i] - truth.as_slice()[i]).powi(2);
        n += 1;
    }
    Ok(100.0 * (sum / n as f64).sqrt() / peak)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM with dynamic range `L = max(truth)`.
pub fn ssim(pred: &Grid2<f64>, truth: &Grid2<f64>) -> Result<f64, MetricError> {
    let l = truth.iter().copied().fold(0.0, f64::max);
    if !(l > 0.0) {
        return Err(MetricError::ZeroTruth);
    }
    ssim_with_range(pred, truth, l)
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5)
/// with `C1 = (0.01 L)²`, `C2 = (0.03 L)²`.
pub fn ssim_with_range(x: &Grid2<f64>, y: &Grid2<f64>, l: f64) -> Result<f64, MetricError> {
    check_same(x, y)?;
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall(w, h));
    }
    let g = gaussian_window();
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);

    // separable filtering of x, y, x², y², xy: horizontal pass then vertical
    let fields: [Box<dyn Fn(usize) -> f64 + Sync>; 5] = [
        Box::new(|i| x.as_slice()[i]),
        Box::new(|i| y.as_slice()[i]),
        Box::new(|i| x.as_slice()[i] * x.as_slice()[i]),
        Box::new(|i| y.as_slice()[i] * y.as_slice()[i]),
        Box::new(|i| x.as_slice()[i] * y.as_slice()[i]),
    ];
    let filtered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            let mut horiz = vec![0.0; ow * h];
            for yy in 0..h {
                for xx in 0..ow {
                    horiz[yy * ow + xx] = (0..SSIM_WINDOW).map(|k| g[k] * f(yy * w + xx + k)).sum();
                }
            }
            let mut out = vec![0.0; ow * oh];
            for yy in 0..oh {
                for xx in 0..ow {
                    out[yy * ow + xx] = (0..SSIM_WINDOW).map(|k| g[k] * horiz[(yy + k) * ow + xx]).sum();
                }
            }
            out
        })
        .collect();
    let [mx, my, sxx, syy, sxy] = [&filtered[0], &filtered[1], &filtered[2], &filtered[3], &filtered[4]];
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Source of predictions for dataset samples.
pub trait Predictor: Sync {
    fn predict(&self, sample: &Sample) -> Result<Grid2<f32>, String>;
}

/// Returns the ground truth; a stand-in for tests and sanity runs.
pub struct PerfectPredictor;

impl Predictor for PerfectPredictor {
    fn predict(&self, sample: &Sample) -> Result<Grid2<f32>, String> {
        Ok(sample.target.clone())
    }
}

impl Predictor for crate::nn::UNet<f32> {
    fn predict(&self, sample: &Sample) -> Result<Grid2<f32>, String> {
        crate::nn::UNet::predict(self, &sample.input).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub rmse_pct: f64,
    pub ssim: f64,
    /// prediction or truth had non-finite values, or the truth was empty
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<SampleMetrics>,
    pub mean_rmse_pct: f64,
    pub max_rmse_pct: f64,
    pub mean_ssim: f64,
    pub min_ssim: f64,
    pub mask_only: bool,
}

impl MetricsReport {
    pub fn from_records(records: Vec<SampleMetrics>, mask_only: bool) -> Self {
        let n = records.len() as f64;
        Self {
            mean_rmse_pct: records.iter().map(|r| r.rmse_pct).sum::<f64>() / n,
            max_rmse_pct: records.iter().map(|r| r.rmse_pct).fold(f64::NEG_INFINITY, f64::max),
            mean_ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
            min_ssim: records.iter().map(|r| r.ssim).fold(f64::INFINITY, f64::min),
            records,
            mask_only,
        }
    }

    pub fn rmse_within_band(&self) -> bool {
        self.mean_rmse_pct < RMSE_BAND_PCT
    }

    pub fn ssim_within_band(&self) -> bool {
        self.mean_ssim > SSIM_BAND
    }

    pub fn passes(&self) -> bool {
        self.rmse_within_band() && self.ssim_within_band()
    }

    pub fn banner(&self) -> String {
        format!(
            "{}: mean rmse {:.3}% (band < {RMSE_BAND_PCT}%), mean ssim {:.4} (band > {SSIM_BAND}) over {} samples",
            if self.passes() { "PASS" } else { "FAIL" },
            self.mean_rmse_pct,
            self.mean_ssim,
            self.records.len()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,rmse_pct,ssim,flagged\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.sample_id, r.rmse_pct, r.ssim, r.flagged as u8);
        }
        s
    }
}

fn widen(g: &Grid2<f32>) -> Grid2<f64> {
    g.map(|&v| v as f64)
}

/// Metrics for one sample; the prediction is clamped to `[0, 1]` first.
pub fn sample_metrics(id: usize, sample: &Sample, pred: &Grid2<f32>, mask_only: bool) -> Result<SampleMetrics, MetricError> {
    let truth = widen(&sample.target);
    let pred = pred.map(|&v| (v as f64).clamp(0.0, 1.0));
    check_same(&pred, &truth)?;
    let finite = pred.iter().all(|v| v.is_finite()) && truth.iter().all(|v| v.is_finite());
    let mask = mask_only.then(|| sample.input.map(|&v| v > 0.0));
    let rmse = rmse_pct_masked(&pred, &truth, mask.as_ref());
    let s = if mask_only {
        // zero the background of both images so only tissue structure counts
        let m = mask.as_ref().unwrap();
        let keep = |g: &Grid2<f64>| Grid2::from_fn(g.width(), g.height(), |x, y| if m[(x, y)] { g[(x, y)] } else { 0.0 });
        ssim(&keep(&pred), &keep(&truth))
    } else {
        ssim(&pred, &truth)
    };
    match (rmse, s) {
        (Ok(r), Ok(s)) => Ok(SampleMetrics {
            sample_id: id,
            rmse_pct: r,
            ssim: s,
            flagged: !finite,
        }),
        (Err(MetricError::ZeroTruth), _) | (_, Err(MetricError::ZeroTruth)) => Ok(SampleMetrics {
            sample_id: id,
            rmse_pct: 0.0,
            ssim: 1.0,
            flagged: true,
        }),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Metrics over `indices`, in the order given.
pub fn evaluate_split(
    predictor: &dyn Predictor,
    samples: &[Sample],
    indices: &[usize],
    mask_only: bool,
) -> Result<MetricsReport, MetricError> {
    if indices.is_empty() {
        return Err(MetricError::EmptySplit);
    }
    let records: Result<Vec<_>, _> = indices
        .par_iter()
        .map(|&id| {
            let sample = samples.get(id).ok_or_else(|| MetricError::Predictor {
                id,
                reason: format!("index out of range ({} samples)", samples.len()),
            })?;
            let pred = predictor
                .predict(sample)
                .map_err(|reason| MetricError::Predictor { id, reason })?;
            sample_metrics(id, sample, &pred, mask_only)
        })
        .collect();
    Ok(MetricsReport::from_records(records?, mask_only))
}

/// Binary PGM (P5), 8-bit, scaled so that `scale_max` maps to 255.
pub fn encode_pgm(g: &Grid2<f64>, scale_max: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.iter().map(|&v| {
        if scale_max > 0.0 {
            (v / scale_max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Parses a P5 raster written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Option<Grid2<u8>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    if data.len() != w * h {
        return None;
    }
    Grid2::from_vec(w, h, data.to_vec())
}

/// Writes `report.csv` and, for each sample in `triptych_ids`,
/// `sample_<id>_{input,truth,pred}.pgm`.
pub fn emit_report(
    report: &MetricsReport,
    samples: &[Sample],
    predictor: &dyn Predictor,
    triptych_ids: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, MetricError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| MetricError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    let csv = out_dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(io(&csv))?;
    written.push(csv);
    for &id in triptych_ids {
        let sample = samples.get(id).ok_or_else(|| MetricError::Predictor {
            id,
            reason: "index out of range".into(),
        })?;
        let pred = predictor
            .predict(sample)
            .map_err(|reason| MetricError::Predictor { id, reason })?
            .map(|&v| (v as f64).clamp(0.0, 1.0));
        let truth = widen(&sample.target);
        let l = truth.iter().copied().fold(0.0, f64::max);
        let input = widen(&sample.input);
        let in_max = input.iter().copied().fold(0.0, f64::max);
        for (tag, img, scale) in [("input", &input, in_max), ("truth", &truth, l), ("pred", &pred, l)] {
            let p = out_dir.join(format!("sample_{id}_{tag}.pgm"));
            fs::write(&p, encode_pgm(img, scale)).map_err(io(&p))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let g = Grid2::from_fn(13, 12, |x, y| (x * y) as f64 / 132.0);
        let back = decode_pgm(&encode_pgm(&g, 1.0)).unwrap();
        assert_eq!((back.width(), back.height()), (13, 12));
        assert_eq!(back[(12, 11)], 255);
        assert_eq!(back[(0, 5)], 0);
    }

    #[test]
    fn report_aggregates() {
        let recs = vec![
            SampleMetrics {
                sample_id: 3,
                rmse_pct: 4.0,
                ssim: 0.9,
                flagged: false,
            },
            SampleMetrics {
                sample_id: 8,
                rmse_pct: 12.0,
                ssim: 0.8,
                flagged: false,
            },
        ];
        let r = MetricsReport::from_records(recs, false);
        assert_eq!(r.mean_rmse_pct, 8.0);
        assert_eq!(r.max_rmse_pct, 12.0);
        assert!((r.mean_ssim - 0.85).abs() < 1e-15);
        assert_eq!(r.min_ssim, 0.8);
        assert!(r.passes());
        assert!(r.to_csv().starts_with("sample_id,rmse_pct,ssim,flagged\n3,4,0.9,0\n"));
    }
}
