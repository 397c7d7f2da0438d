use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

pub const MIN_ABS_DET: f64 = 1e-8;
pub const MAX_CONDITION: f64 = 1e8;

/// Learnable channel mixing by a square matrix, applied at every pixel.
///
/// The inverse is refreshed by LU whenever the weight changes, so the two
/// are always consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct Inv1x1<T> {
    weight: Tensor<T>,
    inverse: Tensor<T>,
}

fn to_matrix<T: Real>(t: &Tensor<T>, c: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(c, c, t.data().iter().map(|v| v.as_f64()))
}

fn from_matrix<T: Real>(m: &DMatrix<f64>) -> Tensor<T> {
    let c = m.nrows();
    let mut data = Vec::with_capacity(c * c);
    for i in 0..c {
        for j in 0..c {
            data.push(T::lit(m[(i, j)]));
        }
    }
    Tensor::from_parts(vec![c, c], data)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|col| col.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Random orthogonal matrix: Q of a Gaussian matrix's QR, with column signs
/// fixed so that R has a positive diagonal.
pub(crate) fn random_orthogonal<R: Rng>(c: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(c, c, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl<T: Real> Inv1x1<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        let inverse = Self::invert(&weight)?;
        Ok(Self { weight, inverse })
    }

    pub fn identity(c: usize) -> Result<Self> {
        Self::from_matrix(&DMatrix::identity(c, c))
    }

    pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(from_matrix(m))
    }

    fn invert(weight: &Tensor<T>) -> Result<Tensor<T>> {
        let c = match weight.shape() {
            &[r, c] if r == c => c,
            other => return Err(Error::shape("inv1x1", format!("weight must be square, got {other:?}"))),
        };
        let m = to_matrix(weight, c);
        let lu = m.clone().lu();
        let det = lu.determinant();
        if !det.is_finite() || det.abs() <= MIN_ABS_DET {
            return Err(Error::Singular {
                det,
                condition: f64::INFINITY,
            });
        }
        let inv = lu.try_inverse().ok_or(Error::Singular {
            det,
            condition: f64::INFINITY,
        })?;
        let condition = norm1(&m) * norm1(&inv);
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(Error::Singular { det, condition });
        }
        Ok(from_matrix(&inv))
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    /// Cached `W^-1`.
    pub fn inverse(&self) -> &Tensor<T> {
        &self.inverse
    }

    /// Replaces the weight, rejecting near-singular matrices. On error the
    /// previous weight and inverse are kept.
    pub fn set_weight(&mut self, weight: Tensor<T>) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::shape(
                "inv1x1",
                format!("weight {:?} replaced by {:?}", self.weight.shape(), weight.shape()),
            ));
        }
        let inverse = Self::invert(&weight)?;
        self.weight = weight;
        self.inverse = inverse;
        Ok(())
    }

    fn apply_matrix(&self, x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        let (_, xc, _, _) = x.dims4()?;
        if xc != c {
            return Err(Error::shape("inv1x1", format!("{c}x{c} matrix applied to {xc} channels")));
        }
        let k = m.clone().reshape(vec![c, c, 1, 1])?;
        kernels::conv2d_forward(x, &k, None, 1, 0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_matrix(x, &self.weight)
    }

    pub fn inverse_apply(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_matrix(y, &self.inverse)
    }
}
