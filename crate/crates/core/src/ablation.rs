//! Channel-count comparison: one training run per augmentation width,
//! each scored on a held-out manifest.

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, EvalOptions, MetricsReport, Predictions};
use crate::model::ModelConfig;
use crate::tensor::{Real, Tensor};
use crate::train::{train_from, BatchReport, Checkpoint, LossCurve, TrainConfig};

pub const ABLATION_HEADER: &str =
    "channels,loss_first,loss_final,loss_ratio,psnr_db,baseline_psnr_db,psnr_gain_db,ssim,rmse_pct,mae_pct";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub channels: usize,
    pub loss_first: f64,
    pub loss_final: f64,
    pub psnr_db: f64,
    /// Source scored directly against the target.
    pub baseline_psnr_db: f64,
    pub ssim: f64,
    pub rmse_pct: f64,
    pub mae_pct: f64,
}

impl AblationRow {
    pub fn loss_ratio(&self) -> f64 {
        self.loss_final / self.loss_first
    }

    pub fn psnr_gain(&self) -> f64 {
        self.psnr_db - self.baseline_psnr_db
    }

    /// Builds a row from a finished run and its held-out reports.
    pub fn from_run(channels: usize, curve: &LossCurve, model: &MetricsReport, baseline: &MetricsReport) -> Result<Self> {
        let (first, last) = match (curve.first(), curve.last()) {
            (Some(a), Some(b)) => (a.total, b.total),
            _ => return Err(Error::invalid("loss curve is empty")),
        };
        let m = model
            .summary()
            .ok_or_else(|| Error::invalid("no held-out pair could be scored"))?;
        let b = baseline
            .summary()
            .ok_or_else(|| Error::invalid("no held-out pair could be scored"))?;
        let finite = |s: &crate::metrics::Summary| {
            s.psnr
                .map(|c| c.mean)
                .ok_or_else(|| Error::invalid("held-out psnr is infinite for every pair"))
        };
        Ok(Self {
            channels,
            loss_first: first,
            loss_final: last,
            psnr_db: finite(&m)?,
            baseline_psnr_db: finite(&b)?,
            ssim: m.ssim.mean,
            rmse_pct: m.rmse_pct.mean,
            mae_pct: m.mae_pct.mean,
        })
    }
}

/// Comma-separated comparison with one row per channel count.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.channels,
            r.loss_first,
            r.loss_final,
            r.loss_ratio(),
            r.psnr_db,
            r.baseline_psnr_db,
            r.psnr_gain(),
            r.ssim,
            r.rmse_pct,
            r.mae_pct
        ));
    }
    out
}

/// Identity-map scores: every held-out source taken as its own prediction.
pub fn baseline_report<T: Real>(heldout: &DatasetManifest, opts: &EvalOptions) -> Result<MetricsReport> {
    let sources: Vec<Tensor<T>> = (0..heldout.len())
        .map(|i| heldout.load_pair::<T>(i).map(|p| p.source))
        .collect::<Result<_>>()?;
    evaluate_pairs(heldout, Predictions::Tensors(&sources), opts)
}

/// Finished run of one channel count.
pub struct AblationRun<T> {
    pub row: AblationRow,
    pub checkpoint: Checkpoint<T>,
    pub curve: LossCurve,
    pub report: MetricsReport,
}

/// Trains `base` once per channel count, keeping every other setting, and
/// scores each model on `heldout`.
pub fn run_ablation<T: Real>(
    train_set: &DatasetManifest,
    heldout: &DatasetManifest,
    base: &TrainConfig,
    channels: &[usize],
    opts: &EvalOptions,
    mut on_batch: impl FnMut(usize, &BatchReport),
) -> Result<Vec<AblationRun<T>>> {
    let baseline = baseline_report::<T>(heldout, opts)?;
    let mut runs = Vec::with_capacity(channels.len());
    for &c in channels {
        let mut cfg = base.clone();
        let mut model = ModelConfig::new(c);
        model.blocks = base.model.blocks;
        model.dense_layers = base.model.dense_layers;
        model.growth = base.model.growth;
        model.clamp = base.model.clamp;
        model.actnorm = base.model.actnorm;
        cfg.model = model;
        log::info!("ablation: training with {c} channels");
        let (checkpoint, curve) = train_from::<T>(train_set, &cfg, None, |r| on_batch(c, r))?;
        let report = evaluate_pairs(heldout, Predictions::Model(&checkpoint.model()?), opts)?;
        let row = AblationRow::from_run(c, &curve, &report, &baseline)?;
        runs.push(AblationRun {
            row,
            checkpoint,
            curve,
            report,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_dataset, PhantomConfig};
    use crate::tensor::DType;

    #[test]
    fn table_has_one_row_per_run() {
        let row = |c| AblationRow {
            channels: c,
            loss_first: 1.0,
            loss_final: 0.25,
            psnr_db: 30.0,
            baseline_psnr_db: 24.0,
            ssim: 0.9,
            rmse_pct: 3.0,
            mae_pct: 2.0,
        };
        let t = ablation_table(&[row(3), row(6), row(9)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(lines[2], "6,1,0.25,0.25,30,24,6,0.9,3,2");
    }

    #[test]
    fn tiny_ablation_runs_every_width() {
        let dir = tempfile::tempdir().unwrap();
        let small = |seed, pairs| PhantomConfig {
            seed,
            size: 16,
            pairs,
            dtype: DType::F64,
            ..Default::default()
        };
        let train_set = generate_phantom_dataset(&small(1, 4), dir.path().join("train")).unwrap();
        let heldout = generate_phantom_dataset(&small(2, 2), dir.path().join("held")).unwrap();
        let mut base = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        base.model.blocks = 1;
        base.model.dense_layers = 2;
        base.model.growth = 4;
        let opts = EvalOptions {
            ssim_mode: crate::metrics::SsimMode::Global,
            ..Default::default()
        };
        let mut seen = Vec::new();
        let runs = run_ablation::<f64>(&train_set, &heldout, &base, &[3, 6, 9], &opts, |c, _| seen.push(c)).unwrap();
        assert_eq!(runs.iter().map(|r| r.row.channels).collect::<Vec<_>>(), vec![3, 6, 9]);
        assert_eq!(seen.len(), 3 * 2 * 2);
        for r in &runs {
            assert_eq!(r.checkpoint.config.channels, r.row.channels);
            assert_eq!(r.curve.len(), 2);
            assert!(r.row.loss_first.is_finite() && r.row.psnr_db.is_finite());
        }
        assert_eq!(ablation_table(&runs.iter().map(|r| r.row.clone()).collect::<Vec<_>>()).lines().count(), 4);
    }
}
