use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::{mae_detail, psnr, rmse_percent, ssim_with, Psnr, SsimMode, MAE_EPSILON};
use super::suv::{suv_mean, SuvParams, VoiMask};
use crate::data::{as_single_plane, denormalize, read_tensor_file, DatasetManifest, ImagePair};
use crate::error::{Error, Result};
use crate::model::{augment_channels, collapse_channels, TcinnModel};
use crate::tensor::{Real, Tensor};

pub const REPORT_HEADER: &str = "pair_id,psnr_db,ssim,rmse_pct,mae_pct,suv_ref,suv_hat";

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Peak value for PSNR.
    pub max_val: f64,
    pub mae_eps: f64,
    pub ssim_mode: SsimMode,
    pub suv: Option<SuvParams>,
    /// Mask used for every pair; otherwise each pair's own mask, if any.
    pub voi: Option<VoiMask>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_val: 1.0,
            mae_eps: MAE_EPSILON,
            ssim_mode: SsimMode::Windowed,
            suv: None,
            voi: None,
        }
    }
}

/// Where the predicted target images come from.
pub enum Predictions<'a, T> {
    /// Run the forward map on each source.
    Model(&'a TcinnModel<T>),
    /// One file per pair, named like the pair's target file.
    Dir(&'a Path),
    /// In memory, indexed like the manifest.
    Tensors(&'a [Tensor<T>]),
}

/// Prediction file for a manifest entry inside `dir`.
pub fn prediction_path(manifest: &DatasetManifest, index: usize, dir: &Path) -> Result<PathBuf> {
    let e = manifest
        .entries
        .get(index)
        .ok_or_else(|| Error::invalid(format!("manifest has no entry {index}")))?;
    let name = e
        .target
        .file_name()
        .ok_or_else(|| Error::invalid(format!("target path {} has no file name", e.target.display())))?;
    Ok(dir.join(name))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub pair_id: usize,
    pub psnr: Psnr,
    pub ssim: f64,
    pub rmse_pct: f64,
    pub mae_pct: f64,
    /// Share of pixels below the relative-error threshold.
    pub mae_excluded: f64,
    pub suv_ref: Option<f64>,
    pub suv_hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFailure {
    pub pair_id: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl ColumnStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let first = *values.first()?;
        let n = values.len() as f64;
        let (lo, hi) = values.iter().fold((first, first), |(a, b), &v| (a.min(v), b.max(v)));
        // shifted sums keep a constant column exact and the mean inside its range
        let mean = (first + values.iter().map(|v| v - first).sum::<f64>() / n).clamp(lo, hi);
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    /// Over finite values only; `None` when every pair is infinite.
    pub psnr: Option<ColumnStats>,
    pub psnr_infinite: usize,
    pub ssim: ColumnStats,
    pub rmse_pct: ColumnStats,
    pub mae_pct: ColumnStats,
    pub suv_ref: Option<ColumnStats>,
    pub suv_hat: Option<ColumnStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub failures: Vec<PairFailure>,
    pub mae_eps: f64,
}

impl MetricsReport {
    pub fn summary(&self) -> Option<Summary> {
        if self.pairs.is_empty() {
            return None;
        }
        let col = |f: fn(&PairMetrics) -> f64| ColumnStats::of(&self.pairs.iter().map(f).collect::<Vec<_>>());
        let opt = |f: fn(&PairMetrics) -> Option<f64>| ColumnStats::of(&self.pairs.iter().filter_map(f).collect::<Vec<_>>());
        Some(Summary {
            psnr: opt(|p| p.psnr.value()),
            psnr_infinite: self.pairs.iter().filter(|p| p.psnr.is_infinite()).count(),
            ssim: col(|p| p.ssim)?,
            rmse_pct: col(|p| p.rmse_pct)?,
            mae_pct: col(|p| p.mae_pct)?,
            suv_ref: opt(|p| p.suv_ref),
            suv_hat: opt(|p| p.suv_hat),
        })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{REPORT_HEADER}\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.pair_id,
                p.psnr,
                p.ssim,
                p.rmse_pct,
                p.mae_pct,
                opt(p.suv_ref),
                opt(p.suv_hat)
            ));
        }
        if let Some(s) = self.summary() {
            let psnr_mean = match s.psnr {
                Some(c) => c.mean.to_string(),
                None => "inf".into(),
            };
            let mean = |c: Option<ColumnStats>| opt(c.map(|c| c.mean));
            let std = |c: Option<ColumnStats>| opt(c.map(|c| c.std));
            out.push_str(&format!(
                "mean,{psnr_mean},{},{},{},{},{}\n",
                s.ssim.mean,
                s.rmse_pct.mean,
                s.mae_pct.mean,
                mean(s.suv_ref),
                mean(s.suv_hat)
            ));
            out.push_str(&format!(
                "std,{},{},{},{},{},{}\n",
                std(s.psnr),
                s.ssim.std,
                s.rmse_pct.std,
                s.mae_pct.std,
                std(s.suv_ref),
                std(s.suv_hat)
            ));
            if s.psnr_infinite > 0 {
                out.push_str(&format!(
                    "# psnr summary excludes {} identical pair(s) reported as inf\n",
                    s.psnr_infinite
                ));
            }
            let excluded = ColumnStats::of(&self.pairs.iter().map(|p| p.mae_excluded).collect::<Vec<_>>());
            if let Some(e) = excluded {
                out.push_str(&format!(
                    "# mae_pct skips reference pixels below {}; mean excluded fraction {}\n",
                    self.mae_eps, e.mean
                ));
            }
        }
        for f in &self.failures {
            out.push_str(&format!("# pair {} failed: {}\n", f.pair_id, f.message.replace('\n', " ")));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn predict<T: Real>(manifest: &DatasetManifest, pair: &ImagePair<T>, preds: &Predictions<'_, T>) -> Result<Tensor<T>> {
    let shape = pair.target.shape().to_vec();
    let pred = match preds {
        Predictions::Model(model) => {
            let (h, w) = (shape[1], shape[2]);
            let x = augment_channels(&pair.source.clone().reshape(vec![1, 1, h, w])?, model.config().channels)?;
            collapse_channels(&model.forward(&x)?)?.reshape(shape.clone())?
        }
        Predictions::Dir(dir) => {
            let path = prediction_path(manifest, pair.index, dir)?;
            as_single_plane(read_tensor_file(&path)?.into_real::<T>(), &path)?
        }
        Predictions::Tensors(ts) => {
            let t = ts
                .get(pair.index)
                .ok_or_else(|| Error::invalid(format!("no prediction for pair {}", pair.index)))?;
            t.clone().reshape(shape.clone()).map_err(|_| {
                Error::shape("evaluate_pairs", format!("prediction {:?} vs target {shape:?}", t.shape()))
            })?
        }
    };
    if pred.shape() != shape.as_slice() {
        return Err(Error::shape("evaluate_pairs", format!("prediction {:?} vs target {shape:?}", pred.shape())));
    }
    if !pred.all_finite() {
        return Err(Error::NonFinite(format!("prediction for pair {}", pair.index)));
    }
    Ok(pred)
}

fn evaluate_one<T: Real>(
    manifest: &DatasetManifest,
    index: usize,
    preds: &Predictions<'_, T>,
    opts: &EvalOptions,
) -> Result<PairMetrics> {
    let pair = manifest.load_pair::<T>(index)?;
    let pred = predict(manifest, &pair, preds)?;
    let y = &pair.target;
    let mae = mae_detail(y, &pred, opts.mae_eps)?;
    let own_mask;
    let mask = match (&opts.voi, &pair.mask) {
        (Some(m), _) => Some(m),
        (None, Some(t)) => {
            own_mask = VoiMask::from_tensor(t, 1.0)?;
            Some(&own_mask)
        }
        (None, None) => None,
    };
    let (suv_ref, suv_hat) = match (opts.suv.as_ref(), mask) {
        (Some(p), Some(m)) => (
            Some(suv_mean(&denormalize(y, &pair.target_scale), m, p)?),
            Some(suv_mean(&denormalize(&pred, &pair.target_scale), m, p)?),
        ),
        _ => (None, None),
    };
    Ok(PairMetrics {
        pair_id: index,
        psnr: psnr(y, &pred, opts.max_val)?,
        ssim: ssim_with(y, &pred, opts.ssim_mode)?,
        rmse_pct: rmse_percent(y, &pred)?,
        mae_pct: mae.percent,
        mae_excluded: mae.excluded_fraction,
        suv_ref,
        suv_hat,
    })
}

/// Scores every manifest pair. A pair that fails is recorded and skipped.
pub fn evaluate_pairs<T: Real>(
    manifest: &DatasetManifest,
    preds: Predictions<'_, T>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if let Some(p) = &opts.suv {
        p.validate()?;
    }
    if !(opts.max_val > 0.0 && opts.mae_eps > 0.0) {
        return Err(Error::invalid("peak value and mae threshold must be positive"));
    }
    let results: Vec<Result<PairMetrics>> = (0..manifest.len())
        .into_par_iter()
        .map(|i| evaluate_one(manifest, i, &preds, opts))
        .collect();
    let mut report = MetricsReport {
        pairs: Vec::new(),
        failures: Vec::new(),
        mae_eps: opts.mae_eps,
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => report.pairs.push(p),
            Err(e) => {
                log::warn!("pair {i}: {e}");
                report.failures.push(PairFailure {
                    pair_id: i,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(report)
}
