use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Binder;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Negative slope of the activations between dense-block layers.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// A densely connected stack of 3x3 convolutions.
///
/// Layer `l` (zero-based) sees the block input concatenated with the
/// outputs of every earlier layer, so its input width is
/// `in_channels + l * growth`. All layers but the last are followed by a
/// leaky ReLU; the last layer is linear and emits `out_channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<T> {
    in_channels: usize,
    out_channels: usize,
    growth: usize,
    layers: Vec<ConvLayer<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct BoundDense {
    layers: Vec<(Var, Var)>,
}

impl<T: Real> DenseBlock<T> {
    /// He-scaled Gaussian kernels, zero biases, and a final layer drawn
    /// with standard deviation `final_std` (zero gives an all-zero output).
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        growth: usize,
        final_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || depth == 0 || (depth > 1 && growth == 0) {
            return Err(Error::invalid(format!(
                "dense block needs positive widths and depth (in {in_channels}, out {out_channels}, depth {depth}, growth {growth})"
            )));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = in_channels + l * growth;
            let last = l + 1 == depth;
            let cout = if last { out_channels } else { growth };
            let std = if last {
                final_std
            } else {
                (2.0 / (cin * 9) as f64).sqrt()
            };
            let kernel: Vec<T> = (0..cout * cin * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z * std)
                })
                .collect();
            layers.push(ConvLayer {
                kernel: Tensor::new(vec![cout, cin, 3, 3], kernel)?,
                bias: Tensor::zeros(vec![cout])?,
            });
        }
        Ok(Self {
            in_channels,
            out_channels,
            growth,
            layers,
        })
    }

    pub fn from_layers(in_channels: usize, growth: usize, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        let depth = layers.len();
        if depth == 0 {
            return Err(Error::invalid("dense block needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (cout, cin, kh, kw) = layer.kernel.dims4()?;
            let want_cin = in_channels + l * growth;
            if cin != want_cin || kh != 3 || kw != 3 || (l + 1 < depth && cout != growth) {
                return Err(Error::shape(
                    "dense_block",
                    format!("layer {l} kernel {:?} inconsistent with input {want_cin}, growth {growth}", layer.kernel.shape()),
                ));
            }
            if layer.bias.shape() != [cout] {
                return Err(Error::shape("dense_block", format!("layer {l} bias {:?}", layer.bias.shape())));
            }
        }
        let out_channels = layers[depth - 1].kernel.shape()[0];
        Ok(Self {
            in_channels,
            out_channels,
            growth,
            layers,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{l}.kernel"), &layer.kernel));
            out.push((format!("{prefix}.layer{l}.bias"), &layer.bias));
        }
    }

    pub(crate) fn load(&mut self, values: &mut dyn Iterator<Item = Tensor<T>>) -> Result<()> {
        for layer in &mut self.layers {
            super::replace_checked(&mut layer.kernel, values)?;
            super::replace_checked(&mut layer.bias, values)?;
        }
        Ok(())
    }

    pub(crate) fn bind(&self, binder: &mut Binder<'_, T>) -> Result<BoundDense> {
        let layers = self
            .layers
            .iter()
            .map(|layer| Ok((binder.bind(&layer.kernel)?, binder.bind(&layer.bias)?)))
            .collect::<Result<_>>()?;
        Ok(BoundDense { layers })
    }

    pub(crate) fn apply_graph(&self, tape: &mut Tape<T>, bound: &BoundDense, x: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "dense_block",
                format!("block expects {} channels, input has {c}", self.in_channels),
            ));
        }
        let depth = bound.layers.len();
        let mut features = x;
        for (l, &(kernel, bias)) in bound.layers.iter().enumerate() {
            let h = tape.conv2d(features, kernel, Some(bias), 1, 1)?;
            if l + 1 == depth {
                return Ok(h);
            }
            let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            features = tape.channel_concat(features, h)?;
        }
        unreachable!("dense block has at least one layer")
    }

    /// Evaluates the block on a plain tensor.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::constants(&mut tape);
        let bound = self.bind(&mut binder)?;
        let xv = tape.constant(x.clone());
        let out = self.apply_graph(&mut tape, &bound, xv)?;
        Ok(tape.into_value(out))
    }
}
