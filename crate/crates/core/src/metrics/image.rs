use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Reference pixels below this value are left out of the relative error.
pub const MAE_EPSILON: f64 = 0.01;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio; identical images have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn value(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        self == Psnr::Infinite
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsimMode {
    /// Gaussian 11 x 11 windows over the valid region.
    #[default]
    Windowed,
    /// One window covering the whole image.
    Global,
}

impl std::str::FromStr for SsimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "windowed" => Ok(SsimMode::Windowed),
            "global" => Ok(SsimMode::Global),
            other => Err(Error::invalid(format!("unknown ssim mode {other:?} (expected windowed or global)"))),
        }
    }
}

/// Relative error together with the share of pixels it ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaeValue {
    pub percent: f64,
    pub excluded_fraction: f64,
}

fn pixels<'a, T: Real>(a: &'a Tensor<T>, b: &'a Tensor<T>, op: &'static str) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    a.expect_same_shape(b, op)?;
    if a.numel() == 0 {
        return Err(Error::shape(op, "empty image"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&p, &q)| (p.as_f64(), q.as_f64())))
}

fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<f64> {
    let n = a.numel() as f64;
    Ok(pixels(a, b, op)?.map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// `20 log10(max_val / rmse)`.
pub fn psnr<T: Real>(y_ref: &Tensor<T>, y_hat: &Tensor<T>, max_val: f64) -> Result<Psnr> {
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::invalid(format!("psnr peak value must be positive, got {max_val}")));
    }
    let rmse = mse(y_ref, y_hat, "psnr")?.sqrt();
    if rmse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(20.0 * (max_val / rmse).log10()))
}

/// Root mean squared difference as a percentage of the unit range.
pub fn rmse_percent<T: Real>(y_ref: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    Ok(100.0 * mse(y_ref, y_hat, "rmse_percent")?.sqrt())
}

/// Mean of `|y - y_hat| / y` over reference pixels `>= eps`, in percent.
pub fn mae_percent<T: Real>(y_ref: &Tensor<T>, y_hat: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(mae_detail(y_ref, y_hat, eps)?.percent)
}

pub fn mae_detail<T: Real>(y_ref: &Tensor<T>, y_hat: &Tensor<T>, eps: f64) -> Result<MaeValue> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("mae threshold must be positive, got {eps}")));
    }
    let (mut sum, mut kept) = (0.0, 0usize);
    for (y, h) in pixels(y_ref, y_hat, "mae_percent")? {
        if y >= eps {
            sum += (y - h).abs() / y;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::EmptySupport { threshold: eps });
    }
    let n = y_ref.numel();
    Ok(MaeValue {
        percent: 100.0 * sum / kept as f64,
        excluded_fraction: (n - kept) as f64 / n as f64,
    })
}

/// Windowed SSIM averaged over every window and plane.
pub fn ssim<T: Real>(y_ref: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    ssim_with(y_ref, y_hat, SsimMode::Windowed)
}

/// SSIM over the last two axes; leading axes are separate planes and the
/// result is the mean over planes.
pub fn ssim_with<T: Real>(y_ref: &Tensor<T>, y_hat: &Tensor<T>, mode: SsimMode) -> Result<f64> {
    y_ref.expect_same_shape(y_hat, "ssim")?;
    let shape = y_ref.shape();
    if shape.len() < 2 || y_ref.numel() == 0 {
        return Err(Error::shape("ssim", format!("need a non-empty image of at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if mode == SsimMode::Windowed && (h < SSIM_WINDOW || w < SSIM_WINDOW) {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window; use global mode"
        )));
    }
    let a: Vec<f64> = y_ref.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = y_hat.data().iter().map(|v| v.as_f64()).collect();
    let planes = a.len() / (h * w);
    let mut total = 0.0;
    for (pa, pb) in a.chunks(h * w).zip(b.chunks(h * w)) {
        total += match mode {
            SsimMode::Windowed => windowed_plane(pa, pb, h, w),
            SsimMode::Global => global_plane(pa, pb),
        };
    }
    // rounding can push a perfect score a hair past the bound
    Ok((total / planes as f64).clamp(-1.0, 1.0))
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

fn global_plane(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mx = a.iter().sum::<f64>() / n;
    let my = b.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mx, y - my);
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    ssim_formula(mx, my, vx / n, vy / n, cxy / n)
}

/// Normalised 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-region separable Gaussian filter of an `h x w` plane.
fn filter(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(j, k)| k * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, k)| k * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn windowed_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mx = filter(a, h, w, &g);
    let my = filter(b, h, w, &g);
    let exx = filter(&prod(|x, _| x * x), h, w, &g);
    let eyy = filter(&prod(|_, y| y * y), h, w, &g);
    let exy = filter(&prod(|x, y| x * y), h, w, &g);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        total += ssim_formula(ux, uy, exx[i] - ux * ux, eyy[i] - uy * uy, exy[i] - ux * uy);
    }
    total / n as f64
}
