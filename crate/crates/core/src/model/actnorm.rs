use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Per-channel invertible affine layer `y = scale * x + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct Actnorm<T> {
    scale: Tensor<T>,
    shift: Tensor<T>,
}

fn check_scales<T: Real>(scale: &Tensor<T>) -> Result<()> {
    if scale.data().iter().any(|&s| s == T::zero() || !s.is_finite()) {
        return Err(Error::invalid("actnorm scales must be finite and nonzero"));
    }
    Ok(())
}

impl<T: Real> Actnorm<T> {
    pub fn new(scale: Tensor<T>, shift: Tensor<T>) -> Result<Self> {
        if scale.ndim() != 1 || scale.shape() != shift.shape() {
            return Err(Error::shape(
                "actnorm",
                format!("scale {:?} and shift {:?} must be matching vectors", scale.shape(), shift.shape()),
            ));
        }
        check_scales(&scale)?;
        Ok(Self { scale, shift })
    }

    pub fn identity(c: usize) -> Result<Self> {
        Self::new(Tensor::full(vec![c], T::one())?, Tensor::zeros(vec![c])?)
    }

    pub fn scale(&self) -> &Tensor<T> {
        &self.scale
    }

    pub fn shift(&self) -> &Tensor<T> {
        &self.shift
    }

    pub(crate) fn scale_mut_checked(&mut self, scale: Tensor<T>, shift: Tensor<T>) -> Result<()> {
        check_scales(&scale)?;
        self.scale = scale;
        self.shift = shift;
        Ok(())
    }

    /// Data-dependent initialisation: afterwards each channel of `x` maps to
    /// zero mean and unit variance. Channels with zero variance keep unit
    /// scale and are only centred.
    pub fn initialize_from(&mut self, x: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.scale.numel() {
            return Err(Error::shape("actnorm", format!("{} channels, batch has {c}", self.scale.numel())));
        }
        let count = (n * h * w) as f64;
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        for sample in x.data().chunks(c * plane) {
            for (m, row) in mean.iter_mut().zip(sample.chunks(plane)) {
                *m += row.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; c];
        for sample in x.data().chunks(c * plane) {
            for ((v, row), &m) in var.iter_mut().zip(sample.chunks(plane)).zip(&mean) {
                *v += row.iter().map(|x| (x.as_f64() - m).powi(2)).sum::<f64>();
            }
        }
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for (&m, &v) in mean.iter().zip(&var) {
            let std = (v / count).sqrt();
            let s = if std > 1e-12 { 1.0 / std } else { 1.0 };
            scale.push(T::lit(s));
            shift.push(T::lit(-m * s));
        }
        self.scale_mut_checked(Tensor::new(vec![c], scale)?, Tensor::new(vec![c], shift)?)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::channel_affine(x, self.scale.data(), self.shift.data())
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let inv: Vec<T> = self.scale.data().iter().map(|&s| T::one() / s).collect();
        let off: Vec<T> = self.shift.data().iter().zip(&inv).map(|(&b, &r)| -b * r).collect();
        kernels::channel_affine(y, &inv, &off)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_affine_examples() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 1, 1], &[3.0]).unwrap();
        let id = Actnorm::identity(1).unwrap();
        assert_eq!(id.forward(&x).unwrap(), x);

        let layer = Actnorm::new(
            Tensor::from_f64(vec![1], &[2.0]).unwrap(),
            Tensor::from_f64(vec![1], &[1.0]).unwrap(),
        )
        .unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(layer.inverse(&y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn zero_scale_rejected() {
        let err = Actnorm::<f64>::new(
            Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap(),
            Tensor::zeros(vec![2]).unwrap(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn data_init_standardises_channels() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 7 % 13) as f64) * 0.3 + (i / 16) as f64).collect();
        let x = Tensor::new(vec![2, 3, 4, 4], vals).unwrap();
        let mut layer = Actnorm::identity(3).unwrap();
        layer.initialize_from(&x).unwrap();
        let y = layer.forward(&x).unwrap();
        let plane = 16;
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| y.data()[(n * 3 + c) * plane..(n * 3 + c + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        let back = layer.inverse(&y).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }
}
