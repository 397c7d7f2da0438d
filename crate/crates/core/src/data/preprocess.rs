use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Original intensity range of an image before it was scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleRecord {
    pub min: f64,
    pub max: f64,
}

impl ScaleRecord {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::invalid(format!("scale record needs max > min, got ({min}, {max})")));
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self { min: 0.0, max: 1.0 }
    }

    /// Sidecar path `<image>.scale`.
    pub fn sidecar_path(image: &Path) -> PathBuf {
        let mut s = image.as_os_str().to_owned();
        s.push(".scale");
        PathBuf::from(s)
    }

    pub fn to_line(&self) -> String {
        format!("{:.17e},{:.17e}\n", self.min, self.max)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let (a, b) = line
            .trim()
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("scale record {line:?} is not `min,max`")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number {s:?} in scale record")))
        };
        Self::new(parse(a)?, parse(b)?)
    }

    pub fn write_sidecar(&self, image: &Path) -> Result<()> {
        let path = Self::sidecar_path(image);
        fs::write(&path, self.to_line()).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(image: &Path) -> Result<Self> {
        let path = Self::sidecar_path(image);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

fn plane_dims<T: Real>(img: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least H x W, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((img.numel() / (h * w), h, w))
}

/// Centred `size x size` window over the trailing two axes. When the margin
/// is odd the extra row or column comes off the bottom or right.
pub fn center_crop<T: Real>(img: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(img, "center_crop")?;
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!("crop {size} does not fit a {h}x{w} image")));
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(planes * size * size);
    for plane in img.data().chunks(h * w) {
        for row in top..top + size {
            out.extend_from_slice(&plane[row * w + left..row * w + left + size]);
        }
    }
    let mut shape = img.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = size;
    shape[nd - 1] = size;
    Tensor::new(shape, out)
}

/// Linear map of the image onto `[0, 1]`, attaining both endpoints.
pub fn normalize_minmax<T: Real>(img: &Tensor<T>) -> Result<(Tensor<T>, ScaleRecord)> {
    if !img.all_finite() {
        return Err(Error::NonFinite("image passed to normalize_minmax".into()));
    }
    let (lo, hi) = img.min_max();
    if hi <= lo {
        return Err(Error::invalid("constant image has no valid [0, 1] scaling"));
    }
    let range = hi - lo;
    let rec = ScaleRecord::new(lo.as_f64(), hi.as_f64())?;
    Ok((img.map(|v| (v - lo) / range), rec))
}

pub fn denormalize<T: Real>(img01: &Tensor<T>, rec: &ScaleRecord) -> Tensor<T> {
    let (lo, range) = (T::lit(rec.min), T::lit(rec.max - rec.min));
    img01.map(|v| v * range + lo)
}
