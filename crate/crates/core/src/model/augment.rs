use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Replicates a single-channel batch `N x 1 x H x W` into `C` identical channels.
pub fn augment_channels<T: Real>(img: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    if c != 1 {
        return Err(Error::shape("augment_channels", format!("expected 1 channel, got {c}")));
    }
    if channels < 2 {
        return Err(Error::invalid(format!(
            "channel augmentation needs at least 2 channels for the coupling split, got {channels}"
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * channels * plane);
    for sample in img.data().chunks(plane) {
        for _ in 0..channels {
            out.extend_from_slice(sample);
        }
    }
    Tensor::new(vec![n, channels, h, w], out)
}

/// Per-pixel channel mean, `N x C x H x W -> N x 1 x H x W`.
///
/// Computed as `x0 + mean(x_i - x0)` so that identical channels collapse to
/// exactly their common value.
pub fn collapse_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv_c = T::lit(1.0 / c as f64);
    let mut out = Vec::with_capacity(n * plane);
    for sample in x.data().chunks(c * plane) {
        let base = &sample[..plane];
        for (p, &b) in base.iter().enumerate() {
            let dev: T = (1..c).map(|ch| sample[ch * plane + p] - b).sum();
            out.push(b + dev * inv_c);
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicates_channels() {
        let img = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.7]).unwrap();
        let a3 = augment_channels(&img, 3).unwrap();
        assert_eq!(a3.shape(), &[1, 3, 2, 2]);
        for ch in a3.data().chunks(4) {
            assert_eq!(ch, img.data());
        }
        let a6 = augment_channels(&img, 6).unwrap();
        let a9 = augment_channels(&img, 9).unwrap();
        assert_eq!(&a9.data()[..24], a6.data());
        assert!(augment_channels(&img, 1).is_err());
    }

    #[test]
    fn collapse_inverts_augment_exactly() {
        let img = Tensor::<f64>::from_f64(vec![2, 1, 1, 3], &[0.1, 1.0 / 3.0, 0.7, 0.9, 1e-9, 0.123456789]).unwrap();
        for c in [2, 3, 6, 9, 7] {
            assert_eq!(collapse_channels(&augment_channels(&img, c).unwrap()).unwrap(), img);
        }
    }

    #[test]
    fn collapse_is_channel_mean() {
        let x = Tensor::<f64>::from_f64(vec![1, 3, 1, 1], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(collapse_channels(&x).unwrap().data(), &[2.0]);
        let single = Tensor::<f64>::from_f64(vec![1, 1, 1, 2], &[4.0, 5.0]).unwrap();
        assert_eq!(collapse_channels(&single).unwrap(), single);
    }
}
