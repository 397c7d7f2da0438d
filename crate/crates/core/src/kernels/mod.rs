//! Raw numeric kernels behind the differentiable ops.
//!
//! 3x3 same-size convolutions run a direct kernel; other geometries are
//! lowered to im2col + GEMM per sample. Samples are processed in parallel;
//! kernel gradients are reduced in sample order so results do not depend on
//! scheduling.

mod direct;
mod simd;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel
            .dims4()
            .map_err(|_| Error::shape("conv2d", format!("kernel must be 4-d, got {:?}", kernel.shape())))?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel extent {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_same3x3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.cout * self.out_pixels()
    }
}

/// Lay out every receptive field of one sample as a column:
/// `cols[(c, ky, kx), (oy, ox)]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input plane.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.numel(), g.cout),
            ));
        }
    }
    let kdata = kernel.data();
    let p = g.out_pixels();
    let mut out = vec![T::zero(); g.n * g.out_sample()];
    if g.is_same3x3() {
        let wide = direct::Wide::new(g.h, g.w);
        let wt = direct::pack_weights(kdata, g.cout, g.cin, false);
        out.par_chunks_mut(g.out_sample())
            .zip(input.data().par_chunks(g.in_sample()))
            .for_each(|(y, x)| {
                direct::with_buffers(&wide, [g.cin * wide.plane, 0, 0, g.cout * wide.qpad], |[xp, _, _, wout]| {
                    wide.pad_into(x, g.cin, xp);
                    direct::run(
                        &wide,
                        direct::Job::Forward {
                            xp,
                            cin: g.cin,
                            wt: &wt,
                            cout: g.cout,
                            out: wout,
                        },
                    );
                    wide.crop_into(wout, y);
                });
                if let Some(b) = bias {
                    for (row, &bv) in y.chunks_mut(p).zip(b.data()) {
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        return Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out));
    }
    out.par_chunks_mut(g.out_sample())
        .zip(input.data().par_chunks(g.in_sample()))
        .for_each(|(y, x)| {
            if let Some(b) = bias {
                for (row, &bv) in y.chunks_mut(p).zip(b.data()) {
                    row.fill(bv);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if g.is_pointwise() {
                T::gemm(g.cout, g.cin, p, T::one(), kdata, g.cin, 1, x, p, 1, beta, y, p, 1);
            } else {
                let mut cols = vec![T::zero(); g.patch() * p];
                im2col(x, &g, &mut cols);
                T::gemm(g.cout, g.patch(), p, T::one(), kdata, g.patch(), 1, &cols, p, 1, beta, y, p, 1);
            }
        });
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let kdata = kernel.data();
    let p = g.out_pixels();
    let kn = g.cout * g.patch();

    let direct_geom = g.is_same3x3().then(|| {
        let wide = direct::Wide::new(g.h, g.w);
        (wide, need_input.then(|| direct::pack_weights(kdata, g.cout, g.cin, true)))
    });
    // kernel gradient of one sample; the input gradient goes to `dx`, which starts zeroed
    let sample = |x: &[T], gy: &[T], dx: Option<&mut [T]>| -> Vec<T> {
        let mut dk = vec![T::zero(); kn];
        if let Some((wide, flipped)) = &direct_geom {
            let (dyp_len, out_len) = match dx {
                Some(_) => (g.cout * wide.plane, g.cin * wide.qpad),
                None => (0, 0),
            };
            direct::with_buffers(
                wide,
                [g.cin * wide.plane, g.cout * wide.qpad, dyp_len, out_len],
                |[xp, dyw, dyp, wout]| {
                    wide.pad_into(x, g.cin, xp);
                    wide.widen_into(gy, g.cout, dyw);
                    direct::run(
                        wide,
                        direct::Job::KernelGrad {
                            xp,
                            cin: g.cin,
                            dyw,
                            cout: g.cout,
                            dk: &mut dk,
                        },
                    );
                    if let (Some(dx), Some(wf)) = (dx, flipped) {
                        wide.pad_into(gy, g.cout, dyp);
                        direct::run(
                            wide,
                            direct::Job::Forward {
                                xp: dyp,
                                cin: g.cout,
                                wt: wf,
                                cout: g.cin,
                                out: wout,
                            },
                        );
                        wide.crop_into(wout, dx);
                    }
                },
            );
        } else if g.is_pointwise() {
            // dK = gy * x^T
            T::gemm(g.cout, p, g.cin, T::one(), gy, p, 1, x, 1, p, T::zero(), &mut dk, g.cin, 1);
            if let Some(dx) = dx {
                T::gemm(g.cin, g.cout, p, T::one(), kdata, 1, g.cin, gy, p, 1, T::zero(), dx, p, 1);
            }
        } else {
            let mut cols = vec![T::zero(); g.patch() * p];
            im2col(x, &g, &mut cols);
            T::gemm(g.cout, p, g.patch(), T::one(), gy, p, 1, &cols, 1, p, T::zero(), &mut dk, g.patch(), 1);
            if let Some(dx) = dx {
                T::gemm(
                    g.patch(),
                    g.cout,
                    p,
                    T::one(),
                    kdata,
                    1,
                    g.patch(),
                    gy,
                    p,
                    1,
                    T::zero(),
                    &mut cols,
                    p,
                    1,
                );
                col2im(&cols, &g, dx);
            }
        }
        dk
    };
    let xs = input.data().par_chunks(g.in_sample());
    let gys = grad_out.data().par_chunks(g.out_sample());
    let mut dinput = need_input.then(|| vec![T::zero(); input.numel()]);
    let per_sample: Vec<Vec<T>> = match dinput.as_mut() {
        Some(all) => all
            .par_chunks_mut(g.in_sample())
            .zip(xs.zip(gys))
            .map(|(dx, (x, gy))| sample(x, gy, Some(dx)))
            .collect(),
        None => xs.zip(gys).map(|(x, gy)| sample(x, gy, None)).collect(),
    };
    let mut dkernel = vec![T::zero(); kn];
    for dk in per_sample {
        for (acc, v) in dkernel.iter_mut().zip(dk) {
            *acc += v;
        }
    }

    let mut dbias = vec![T::zero(); g.cout];
    for sample in grad_out.data().chunks(g.out_sample()) {
        for (acc, row) in dbias.iter_mut().zip(sample.chunks(p)) {
            *acc += row.iter().copied().sum::<T>();
        }
    }

    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), dkernel),
        bias: Tensor::from_parts(vec![g.cout], dbias),
    })
}

/// Copy channels `[start, start + len)` of an N x C x H x W tensor.
pub(crate) fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if len == 0 || start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("channels {start}..{} out of range for {c}", start + len),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for sample in x.data().chunks(c * plane) {
        out.extend_from_slice(&sample[start * plane..(start + len) * plane]);
    }
    Ok(Tensor::from_parts(vec![n, len, h, w], out))
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (sa, sb) in a.data().chunks(ca * plane).zip(b.data().chunks(cb * plane)) {
        out.extend_from_slice(sa);
        out.extend_from_slice(sb);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], out))
}

/// Per-channel affine map `scale[c] * x + shift[c]`.
pub(crate) fn channel_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(
            "channel_affine",
            format!("{c} channels but {} scales and {} shifts", scale.len(), shift.len()),
        ));
    }
    let plane = h * w;
    let mut out = x.clone();
    for sample in out.data_mut().chunks_mut(c * plane) {
        for (ch, row) in sample.chunks_mut(plane).enumerate() {
            for v in row {
                *v = scale[ch] * *v + shift[ch];
            }
        }
    }
    Ok(out)
}

/// Sum over every axis except channels of an N x C x H x W tensor.
pub(crate) fn per_channel_sum<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (_, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut acc = vec![T::zero(); c];
    for sample in x.data().chunks(c * plane) {
        for (a, row) in acc.iter_mut().zip(sample.chunks(plane)) {
            *a += row.iter().copied().sum::<T>();
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line cross-correlation, no lowering.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kh, kw) = k.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for s in 0..n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * cin + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * cin + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((s * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, ho, wo], out).unwrap()
    }

    fn ramp(shape: Vec<usize>, a: f64, b: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|i| ((i as f64) * a + b).sin()).collect();
        Tensor::new(shape, vals).unwrap()
    }

    #[test]
    fn lowered_conv_matches_naive() {
        for &(stride, pad, kh) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 2, 5)] {
            let x = ramp(vec![2, 3, 7, 6], 0.37, 0.1);
            let k = ramp(vec![4, 3, kh, kh], 0.71, 0.3);
            let b = [0.1, -0.2, 0.3, 0.05];
            let bt = Tensor::new(vec![4], b.to_vec()).unwrap();
            let got = conv2d_forward(&x, &k, Some(&bt), stride, pad).unwrap();
            let want = naive_conv(&x, &k, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = ramp(vec![1, 2, 5, 4], 0.3, 0.2);
        let k = Tensor::<f64>::zeros(vec![1, 2, 3, 3]).unwrap();
        let g = ConvGeom::new(&x, &k, 2, 1).unwrap();
        let mut cols = vec![0.0; g.patch() * g.out_pixels()];
        im2col(x.data(), &g, &mut cols);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.13).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.numel()];
        col2im(&c, &g, &mut dx);
        let rhs: f64 = x.data().iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]).unwrap();
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]).unwrap();
        let err = conv2d_forward(&x, &k, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }
}
