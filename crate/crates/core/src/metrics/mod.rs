//! Image-quality scores, mean SUV over a volume of interest and per-dataset
//! reports.

mod image;
mod report;
mod suv;

pub use image::{
    gaussian_window, mae_detail, mae_percent, psnr, rmse_percent, ssim, ssim_with, MaeValue, Psnr, SsimMode,
    MAE_EPSILON, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{
    evaluate_pairs, prediction_path, ColumnStats, EvalOptions, MetricsReport, PairFailure, PairMetrics, Predictions,
    Summary, REPORT_HEADER,
};
pub use suv::{suv_mean, SuvParams, VoiMask};
