//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its output value
//! and the handles of its inputs. [`Tape::backward`] walks the nodes in
//! reverse execution order and accumulates adjoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Sub,
    Hadamard,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Pointwise {
        a: Var,
        b: Var,
        kind: Pointwise,
    },
    Scale {
        x: Var,
        c: T,
    },
    Exp {
        x: Var,
    },
    SoftClamp {
        x: Var,
        alpha: T,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    ChannelMix {
        x: Var,
        weight: Var,
    },
    ChannelUnmix {
        x: Var,
        weight: Var,
        inverse: Tensor<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelAffineInverse {
        x: Var,
        scale: Var,
        shift: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradient per parameter. Every parameter registered on the tape has an
/// entry; parameters the loss does not depend on get zeros.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.values_mut() {
            g.scale_in_place(c);
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a trainable leaf. Registering the same id twice is an error.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(&id) {
            return Err(Error::invalid(format!("parameter {id:?} registered twice")));
        }
        let v = self.push(value, Op::Param);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Cross-correlation; `bias` broadcasts over output channels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::invalid(format!("leaky relu slope {slope} outside [0, 1)")));
        }
        let slope = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        Ok(self.push(out, Op::LeakyRelu { x, slope }))
    }

    pub fn pointwise(&mut self, a: Var, b: Var, kind: Pointwise) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match kind {
            Pointwise::Add => va.zip_map(vb, "add", |x, y| x + y)?,
            Pointwise::Sub => va.zip_map(vb, "sub", |x, y| x - y)?,
            Pointwise::Hadamard => va.zip_map(vb, "hadamard", |x, y| x * y)?,
        };
        Ok(self.push(out, Op::Pointwise { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise(a, b, Pointwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise(a, b, Pointwise::Sub)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise(a, b, Pointwise::Hadamard)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp { x })
    }

    /// `alpha * (2 / pi) * atan(x / alpha)`, a smooth bijection onto `(-alpha, alpha)`.
    pub fn soft_clamp(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("clamp bound {alpha} must be positive")));
        }
        let alpha = T::lit(alpha);
        let gain = alpha * T::lit(2.0 / PI);
        let out = self.value(x).map(|v| gain * (v / alpha).atan());
        Ok(self.push(out, Op::SoftClamp { x, alpha }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(x), start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    /// Splits channels into `[0, d)` and `[d, C)`.
    pub fn channel_split(&mut self, x: Var, d: usize) -> Result<(Var, Var)> {
        let (_, c, _, _) = self.value(x).dims4()?;
        if d == 0 || d >= c {
            return Err(Error::invalid(format!("split index {d} outside 1..{c}")));
        }
        let first = self.slice_channels(x, 0, d)?;
        let second = self.slice_channels(x, d, c - d)?;
        Ok((first, second))
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mse")?;
        let n = T::lit(va.numel() as f64);
        let sum: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse { a, b }))
    }

    fn mix_kernel(&self, weight: Var, x: Var) -> Result<Tensor<T>> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let w = self.value(weight);
        if w.shape() != [c, c] {
            return Err(Error::shape(
                "channel_mix",
                format!("matrix {:?} for {c} channels", w.shape()),
            ));
        }
        w.clone().reshape(vec![c, c, 1, 1])
    }

    /// Applies the `C x C` matrix `weight` across channels at every pixel.
    pub fn channel_mix(&mut self, x: Var, weight: Var) -> Result<Var> {
        let k = self.mix_kernel(weight, x)?;
        let out = kernels::conv2d_forward(self.value(x), &k, None, 1, 0)?;
        Ok(self.push(out, Op::ChannelMix { x, weight }))
    }

    /// Applies `inverse`, which the caller guarantees equals `weight^-1`;
    /// the adjoint is taken with respect to `weight`.
    pub fn channel_unmix(&mut self, x: Var, weight: Var, inverse: &Tensor<T>) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let w = self.value(weight);
        if w.shape() != [c, c] || inverse.shape() != [c, c] {
            return Err(Error::shape(
                "channel_unmix",
                format!("matrices {:?}/{:?} for {c} channels", w.shape(), inverse.shape()),
            ));
        }
        let k = inverse.clone().reshape(vec![c, c, 1, 1])?;
        let out = kernels::conv2d_forward(self.value(x), &k, None, 1, 0)?;
        Ok(self.push(
            out,
            Op::ChannelUnmix {
                x,
                weight,
                inverse: inverse.clone(),
            },
        ))
    }

    fn affine_params(&self, x: Var, scale: Var, shift: Var) -> Result<()> {
        let (_, c, _, _) = self.value(x).dims4()?;
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(Error::shape("channel_affine", format!("parameters must have {c} entries")));
        }
        Ok(())
    }

    /// Per-channel `scale * x + shift`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.affine_params(x, scale, shift)?;
        let out = kernels::channel_affine(self.value(x), self.value(scale).data(), self.value(shift).data())?;
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }))
    }

    /// Per-channel `(x - shift) / scale`.
    pub fn channel_affine_inverse(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.affine_params(x, scale, shift)?;
        let inv: Vec<T> = self.value(scale).data().iter().map(|&s| T::one() / s).collect();
        let off: Vec<T> = self
            .value(shift)
            .data()
            .iter()
            .zip(&inv)
            .map(|(&b, &r)| -b * r)
            .collect();
        let out = kernels::channel_affine(self.value(x), &inv, &off)?;
        Ok(self.push(out, Op::ChannelAffineInverse { x, scale, shift }))
    }

    /// Propagates adjoints from the scalar `loss` back to every registered
    /// parameter.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    adj[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let need_input = self.requires_grad(*input);
                    let grads = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                    need_input,
                    )?;
                    if let Some(dx) = grads.input {
                        accumulate(&mut adj, *input, dx)?;
                    }
                    accumulate(&mut adj, *kernel, grads.kernel)?;
                    if let Some(b) = bias {
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut adj, *b, grads.bias.reshape(shape)?)?;
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = self
                        .value(*x)
                        .zip_map(&g, "leaky_relu", |v, gv| if v > T::zero() { gv } else { *slope * gv })?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Pointwise { a, b, kind } => match kind {
                    Pointwise::Add => {
                        accumulate(&mut adj, *a, g.clone())?;
                        accumulate(&mut adj, *b, g)?;
                    }
                    Pointwise::Sub => {
                        accumulate(&mut adj, *b, g.map(|v| -v))?;
                        accumulate(&mut adj, *a, g)?;
                    }
                    Pointwise::Hadamard => {
                        let da = g.zip_map(self.value(*b), "hadamard", |gv, bv| gv * bv)?;
                        let db = g.zip_map(self.value(*a), "hadamard", |gv, av| gv * av)?;
                        accumulate(&mut adj, *a, da)?;
                        accumulate(&mut adj, *b, db)?;
                    }
                },
                Op::Scale { x, c } => {
                    accumulate(&mut adj, *x, g.map(|v| v * *c))?;
                }
                Op::Exp { x } => {
                    let dx = g.zip_map(&node.value, "exp", |gv, y| gv * y)?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::SoftClamp { x, alpha } => {
                    let two_over_pi = T::lit(2.0 / PI);
                    let dx = self.value(*x).zip_map(&g, "soft_clamp", |v, gv| {
                        let u = v / *alpha;
                        gv * two_over_pi / (T::one() + u * u)
                    })?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::SliceChannels { x, start } => {
                    let src = self.value(*x);
                    let (n, c, h, w) = src.dims4()?;
                    let (_, len, _, _) = g.dims4()?;
                    let plane = h * w;
                    let mut dx = vec![T::zero(); src.numel()];
                    for (dst, gs) in dx.chunks_mut(c * plane).zip(g.data().chunks(len * plane)) {
                        dst[start * plane..(start + len) * plane].copy_from_slice(gs);
                    }
                    accumulate(&mut adj, *x, Tensor::from_parts(vec![n, c, h, w], dx))?;
                }
                Op::Concat { a, b } => {
                    let (_, ca, _, _) = self.value(*a).dims4()?;
                    let (_, cb, _, _) = self.value(*b).dims4()?;
                    accumulate(&mut adj, *a, kernels::slice_channels(&g, 0, ca)?)?;
                    accumulate(&mut adj, *b, kernels::slice_channels(&g, ca, cb)?)?;
                }
                Op::Mse { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let coef = g.item()? * T::lit(2.0) / T::lit(va.numel() as f64);
                    let da = va.zip_map(vb, "mse", |x, y| coef * (x - y))?;
                    accumulate(&mut adj, *b, da.map(|v| -v))?;
                    accumulate(&mut adj, *a, da)?;
                }
                Op::ChannelMix { x, weight } => {
                    let k = self.mix_kernel(*weight, *x)?;
                    let need_input = self.requires_grad(*x);
                    let grads = kernels::conv2d_backward(self.value(*x), &k, &g, 1, 0, need_input)?;
                    if let Some(dx) = grads.input {
                        accumulate(&mut adj, *x, dx)?;
                    }
                    let c = k.shape()[0];
                    accumulate(&mut adj, *weight, grads.kernel.reshape(vec![c, c])?)?;
                }
                Op::ChannelUnmix { x, weight, inverse } => {
                    let c = inverse.shape()[0];
                    let k = inverse.clone().reshape(vec![c, c, 1, 1])?;
                    let need_input = self.requires_grad(*x);
                    let grads = kernels::conv2d_backward(self.value(*x), &k, &g, 1, 0, need_input)?;
                    if let Some(dx) = grads.input {
                        accumulate(&mut adj, *x, dx)?;
                    }
                    // d(W^-1) = -W^-1 dW W^-1, so dL/dW = -A^T (dL/dA) A^T with A = W^-1.
                    let da = grads.kernel.reshape(vec![c, c])?;
                    let dw = neg_at_g_at(inverse, &da);
                    accumulate(&mut adj, *weight, dw)?;
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = self.value(*x);
                    let s = self.value(*scale);
                    let dshift = kernels::per_channel_sum(&g)?;
                    let gx = g.zip_map(xv, "channel_affine", |gv, v| gv * v)?;
                    let dscale = kernels::per_channel_sum(&gx)?;
                    let zeros = vec![T::zero(); s.numel()];
                    if self.requires_grad(*x) {
                        accumulate(&mut adj, *x, kernels::channel_affine(&g, s.data(), &zeros)?)?;
                    }
                    accumulate(&mut adj, *scale, Tensor::from_parts(s.shape().to_vec(), dscale))?;
                    accumulate(&mut adj, *shift, Tensor::from_parts(s.shape().to_vec(), dshift))?;
                }
                Op::ChannelAffineInverse { x, scale, shift } => {
                    // y = (x - b) / s: dy/dx = 1/s, dy/db = -1/s, dy/ds = -y/s.
                    let s = self.value(*scale);
                    let inv: Vec<T> = s.data().iter().map(|&v| T::one() / v).collect();
                    let zeros = vec![T::zero(); s.numel()];
                    let gx = kernels::channel_affine(&g, &inv, &zeros)?;
                    let dshift: Vec<T> = kernels::per_channel_sum(&gx)?.into_iter().map(|v| -v).collect();
                    let gy = g.zip_map(&node.value, "channel_affine_inverse", |gv, y| gv * y)?;
                    let dscale: Vec<T> = kernels::per_channel_sum(&gy)?
                        .into_iter()
                        .zip(&inv)
                        .map(|(v, &r)| -v * r)
                        .collect();
                    if self.requires_grad(*x) {
                        accumulate(&mut adj, *x, gx)?;
                    }
                    accumulate(&mut adj, *scale, Tensor::from_parts(s.shape().to_vec(), dscale))?;
                    accumulate(&mut adj, *shift, Tensor::from_parts(s.shape().to_vec(), dshift))?;
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (&id, &v) in &self.params {
            let g = match adj.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => self.value(v).zeros_like(),
            };
            grads.insert(id, g);
        }
        Ok(GradientMap { grads })
    }

    /// Constants never need adjoints; everything else might.
    fn requires_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `-A^T G A^T` for square `A`, `G`.
fn neg_at_g_at<T: Real>(a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let c = a.shape()[0];
    let mut tmp = vec![T::zero(); c * c];
    // tmp = A^T G
    T::gemm(c, c, c, T::one(), a.data(), 1, c, g.data(), c, 1, T::zero(), &mut tmp, c, 1);
    let mut out = vec![T::zero(); c * c];
    // out = -tmp A^T
    T::gemm(c, c, c, -T::one(), &tmp, c, 1, a.data(), 1, c, T::zero(), &mut out, c, 1);
    Tensor::from_parts(vec![c, c], out)
}
