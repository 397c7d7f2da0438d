use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Binary volume of interest over an `h x w` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiMask {
    h: usize,
    w: usize,
    active: Vec<bool>,
    /// Volume of one element in mL.
    pub voxel_volume: f64,
}

impl VoiMask {
    pub fn new(h: usize, w: usize, active: Vec<bool>, voxel_volume: f64) -> Result<Self> {
        if active.len() != h * w {
            return Err(Error::shape("voi_mask", format!("{} flags for a {h}x{w} plane", active.len())));
        }
        if !(voxel_volume > 0.0 && voxel_volume.is_finite()) {
            return Err(Error::invalid(format!("voxel volume must be positive, got {voxel_volume}")));
        }
        Ok(Self { h, w, active, voxel_volume })
    }

    /// Non-zero elements of a single-plane tensor are active.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, voxel_volume: f64) -> Result<Self> {
        let (h, w) = plane_dims(t, "voi_mask")?;
        Self::new(h, w, t.data().iter().map(|v| *v != T::zero()).collect(), voxel_volume)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Total masked volume in mL.
    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.voxel_volume
    }
}

/// Dose and weight that normalise an activity concentration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuvParams {
    /// Injected dose in mCi.
    pub injected_dose_mci: f64,
    /// Body weight in kg.
    pub body_weight_kg: f64,
}

impl SuvParams {
    pub fn new(injected_dose_mci: f64, body_weight_kg: f64) -> Result<Self> {
        let p = Self {
            injected_dose_mci,
            body_weight_kg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.injected_dose_mci) || !ok(self.body_weight_kg) {
            return Err(Error::invalid(format!(
                "injected dose and body weight must be positive, got {} mCi and {} kg",
                self.injected_dose_mci, self.body_weight_kg
            )));
        }
        Ok(())
    }
}

fn plane_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        ref other => Err(Error::shape(op, format!("expected a single H x W plane, got {other:?}"))),
    }
}

/// Mean activity in the mask (uCi/mL) over injected dose per gram of body
/// weight, taking tissue density as 1 g/mL.
pub fn suv_mean<T: Real>(activity: &Tensor<T>, mask: &VoiMask, p: &SuvParams) -> Result<f64> {
    p.validate()?;
    let dims = plane_dims(activity, "suv_mean")?;
    if dims != mask.dims() {
        return Err(Error::shape("suv_mean", format!("activity {dims:?} vs mask {:?}", mask.dims())));
    }
    let mut values = activity
        .data()
        .iter()
        .zip(mask.active())
        .filter(|(_, &a)| a)
        .map(|(v, _)| v.as_f64());
    let first = values.next().ok_or_else(|| Error::invalid("voi mask has no active element"))?;
    // shifted mean, exact for a constant region
    let (mut shift, mut n) = (0.0, 1usize);
    for v in values {
        shift += v - first;
        n += 1;
    }
    let mean = first + shift / n as f64;
    let weight_g = p.body_weight_kg * 1000.0;
    let dose_uci = p.injected_dose_mci * 1000.0;
    Ok(mean * weight_g / dose_uci)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(n: usize) -> VoiMask {
        let active = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - 2.0, (i % n) as f64 - 3.0);
                y * y + x * x < 4.0
            })
            .collect();
        VoiMask::new(n, n, active, 0.5).unwrap()
    }

    #[test]
    fn unit_conversion_example() {
        let a = Tensor::full(vec![1, 6, 6], 0.01).unwrap();
        let p = SuvParams::new(10.0, 70.0).unwrap();
        assert_eq!(suv_mean(&a, &disc(6), &p).unwrap(), 0.07);
        // activity equal to dose per weight
        let a = Tensor::full(vec![6, 6], 10_000.0 / 70_000.0).unwrap();
        assert!((suv_mean(&a, &disc(6), &p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_image_ignores_mask_shape() {
        let a = Tensor::full(vec![1, 6, 6], 0.37).unwrap();
        let p = SuvParams::new(8.0, 60.0).unwrap();
        let full = VoiMask::new(6, 6, vec![true; 36], 1.0).unwrap();
        assert_eq!(suv_mean(&a, &disc(6), &p).unwrap(), suv_mean(&a, &full, &p).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Tensor::full(vec![1, 6, 6], 0.1).unwrap();
        let empty = VoiMask::new(6, 6, vec![false; 36], 1.0).unwrap();
        let p = SuvParams::new(10.0, 70.0).unwrap();
        assert!(suv_mean(&a, &empty, &p).is_err());
        assert!(SuvParams::new(0.0, 70.0).is_err());
        assert!(SuvParams::new(10.0, -1.0).is_err());
        assert!(suv_mean(&a, &disc(5), &p).is_err());
        let m = VoiMask::from_tensor(&Tensor::<f64>::from_f64(vec![1, 2, 2], &[0.0, 1.0, 2.0, 0.0]).unwrap(), 2.0).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.volume(), 4.0);
    }
}
