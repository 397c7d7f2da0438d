//! Direct 3x3 convolution, stride 1, zero padding 1.
//!
//! Planes are zero padded to `(H + 2) x (W + 2)` and flattened. Output pixel
//! `(y, x)` is computed at `q = y * (W + 2) + x`, so tap `(ky, kx)` reads the
//! padded plane at `q + ky * (W + 2) + kx` and every tap is a contiguous
//! shifted run. Columns `x >= W` of this wide output grid are scratch.
//!
//! x86-64 uses the intrinsic loops in `simd`, picked at runtime by the
//! available features; other targets use plain array arithmetic.

#[cfg(target_arch = "x86_64")]
use super::simd;
use crate::tensor::{DType, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Wide {
    pub h: usize,
    pub w: usize,
    pub row: usize,
    /// Wide output positions rounded up to a whole number of tiles.
    pub qpad: usize,
    /// Stride between padded planes; leaves room for the last tile's reads.
    pub plane: usize,
}

/// Widest tile any code path uses, in elements.
const MAX_TILE: usize = 64;

impl Wide {
    pub fn new(h: usize, w: usize) -> Self {
        let row = w + 2;
        let qpad = (h * row).div_ceil(MAX_TILE) * MAX_TILE;
        let plane = ((h + 2) * row).max(qpad + 2 * row + 2);
        Self { h, w, row, qpad, plane }
    }

    /// Writes `c` planes of `h x w` into the interiors of padded planes.
    /// The border of `dst` is left as it is.
    pub fn pad_into<T: Real>(&self, src: &[T], c: usize, dst: &mut [T]) {
        for (d, s) in dst.chunks_mut(self.plane).zip(src.chunks(self.h * self.w)).take(c) {
            for y in 0..self.h {
                let o = (y + 1) * self.row + 1;
                d[o..o + self.w].copy_from_slice(&s[y * self.w..(y + 1) * self.w]);
            }
        }
    }

    /// Writes `c` planes onto the wide output grid. Scratch columns of
    /// `dst` are left as they are.
    pub fn widen_into<T: Real>(&self, src: &[T], c: usize, dst: &mut [T]) {
        for (d, s) in dst.chunks_mut(self.qpad).zip(src.chunks(self.h * self.w)).take(c) {
            for y in 0..self.h {
                d[y * self.row..y * self.row + self.w].copy_from_slice(&s[y * self.w..(y + 1) * self.w]);
            }
        }
    }

    /// Zero padded copy of `c` planes of `h x w`.
    #[cfg(test)]
    pub fn pad<T: Real>(&self, src: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); c * self.plane];
        self.pad_into(src, c, &mut out);
        out
    }

    /// Drops the scratch columns of wide output planes.
    pub fn crop_into<T: Real>(&self, wide: &[T], dst: &mut [T]) {
        for (d, s) in dst.chunks_mut(self.h * self.w).zip(wide.chunks(self.qpad)) {
            for y in 0..self.h {
                d[y * self.w..(y + 1) * self.w].copy_from_slice(&s[y * self.row..y * self.row + self.w]);
            }
        }
    }
}

/// Weights as `[c][tap][o]` from a `cout x cin x 3 x 3` kernel; with `flip`
/// the roles of `c` and `o` swap and taps are mirrored, which turns the
/// forward kernel into the input-gradient kernel.
pub(crate) fn pack_weights<T: Real>(k: &[T], cout: usize, cin: usize, flip: bool) -> Vec<T> {
    let mut out = vec![T::zero(); k.len()];
    for o in 0..cout {
        for c in 0..cin {
            for tap in 0..9 {
                let v = k[(o * cin + c) * 9 + tap];
                if flip {
                    out[(o * 9 + 8 - tap) * cin + c] = v;
                } else {
                    out[(c * 9 + tap) * cout + o] = v;
                }
            }
        }
    }
    out
}

#[inline(always)]
fn madd<T: Real, const FMA: bool>(a: T, b: T, c: T) -> T {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn fwd_block<T: Real, const PX: usize, const OB: usize, const FMA: bool>(
    xp: &[T],
    g: &Wide,
    cin: usize,
    wt: &[T],
    cout: usize,
    o0: usize,
    q0: usize,
) -> [[T; PX]; OB] {
    let mut acc = [[T::zero(); PX]; OB];
    for c in 0..cin {
        let base = c * g.plane + q0;
        for tap in 0..9 {
            let off = base + (tap / 3) * g.row + tap % 3;
            let src: &[T; PX] = xp[off..off + PX].try_into().expect("tile");
            let w0 = (c * 9 + tap) * cout + o0;
            let wv: &[T; OB] = wt[w0..w0 + OB].try_into().expect("weights");
            for o in 0..OB {
                for j in 0..PX {
                    acc[o][j] = madd::<T, FMA>(wv[o], src[j], acc[o][j]);
                }
            }
        }
    }
    acc
}

#[inline(always)]
fn fwd_body<T: Real, const PX: usize, const FMA: bool>(
    xp: &[T],
    g: &Wide,
    cin: usize,
    wt: &[T],
    cout: usize,
    out: &mut [T],
) {
    macro_rules! emit {
        ($ob:literal, $o0:expr, $q0:expr) => {{
            let acc = fwd_block::<T, PX, $ob, FMA>(xp, g, cin, wt, cout, $o0, $q0);
            for (o, a) in acc.iter().enumerate() {
                let s = ($o0 + o) * g.qpad + $q0;
                out[s..s + PX].copy_from_slice(a);
            }
        }};
    }
    for q0 in (0..g.qpad).step_by(PX) {
        let mut o0 = 0;
        while o0 + 4 <= cout {
            emit!(4, o0, q0);
            o0 += 4;
        }
        if o0 + 2 <= cout {
            emit!(2, o0, q0);
            o0 += 2;
        }
        if o0 < cout {
            emit!(1, o0, q0);
        }
    }
}

/// Kernel gradient for taps `(ky, 0..3)` of input channel `c` and output
/// channels `o0..o0 + OB`, accumulated lane-wise over the wide grid.
#[inline(always)]
fn grad_block<T: Real, const PX: usize, const OB: usize, const FMA: bool>(
    xp: &[T],
    g: &Wide,
    c: usize,
    ky: usize,
    dyw: &[T],
    o0: usize,
) -> [[T; 3]; OB] {
    let mut acc = [[[T::zero(); PX]; 3]; OB];
    let base = c * g.plane + ky * g.row;
    for t in 0..g.qpad / PX {
        let q0 = t * PX;
        let src: [&[T; PX]; 3] =
            std::array::from_fn(|kx| xp[base + q0 + kx..base + q0 + kx + PX].try_into().expect("tile"));
        let dy: [&[T; PX]; OB] = std::array::from_fn(|o| {
            let s = (o0 + o) * g.qpad + q0;
            dyw[s..s + PX].try_into().expect("tile")
        });
        for o in 0..OB {
            for kx in 0..3 {
                for j in 0..PX {
                    acc[o][kx][j] = madd::<T, FMA>(dy[o][j], src[kx][j], acc[o][kx][j]);
                }
            }
        }
    }
    lane_sums(&acc)
}

// Kept out of line so the lane-wise loop above is vectorised on its own.
#[inline(never)]
fn lane_sums<T: Real, const PX: usize, const OB: usize>(acc: &[[[T; PX]; 3]; OB]) -> [[T; 3]; OB] {
    let mut sums = [[T::zero(); 3]; OB];
    for o in 0..OB {
        for kx in 0..3 {
            sums[o][kx] = acc[o][kx].iter().copied().fold(T::zero(), |a, b| a + b);
        }
    }
    sums
}

#[inline(always)]
fn grad_body<T: Real, const PX: usize, const FMA: bool>(
    xp: &[T],
    g: &Wide,
    cin: usize,
    dyw: &[T],
    cout: usize,
    dk: &mut [T],
) {
    macro_rules! emit {
        ($ob:literal, $c:expr, $ky:expr, $o0:expr) => {{
            let s = grad_block::<T, PX, $ob, FMA>(xp, g, $c, $ky, dyw, $o0);
            for (o, taps) in s.iter().enumerate() {
                let at = (($o0 + o) * cin + $c) * 9 + $ky * 3;
                dk[at..at + 3].copy_from_slice(taps);
            }
        }};
    }
    for c in 0..cin {
        for ky in 0..3 {
            let mut o0 = 0;
            while o0 + 2 <= cout {
                emit!(2, c, ky, o0);
                o0 += 2;
            }
            if o0 < cout {
                emit!(1, c, ky, o0);
            }
        }
    }
}

/// One call into the vector code.
pub(crate) enum Job<'a, T> {
    /// `out` (cout x qpad) = conv of padded `xp` with packed `wt`.
    Forward {
        xp: &'a [T],
        cin: usize,
        wt: &'a [T],
        cout: usize,
        out: &'a mut [T],
    },
    /// `dk` (cout x cin x 9) = correlation of padded `xp` with wide `dyw`.
    KernelGrad {
        xp: &'a [T],
        cin: usize,
        dyw: &'a [T],
        cout: usize,
        dk: &'a mut [T],
    },
}

fn cast<T: Real, U: Real>(s: &[T]) -> &[U] {
    assert!(std::any::TypeId::of::<T>() == std::any::TypeId::of::<U>());
    // SAFETY: `T` and `U` are the same type.
    unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) }
}

fn cast_mut<T: Real, U: Real>(s: &mut [T]) -> &mut [U] {
    assert!(std::any::TypeId::of::<T>() == std::any::TypeId::of::<U>());
    // SAFETY: as in `cast`.
    unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) }
}

macro_rules! isa_variant {
    ($fwd:ident, $grad:ident, $feat:literal, $v32:ty, $r32:literal, $v64:ty, $r64:literal, $ob:literal) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $fwd<T: Real>(xp: &[T], g: &Wide, cin: usize, wt: &[T], cout: usize, out: &mut [T]) {
            match T::DTYPE {
                DType::F32 => simd::forward::<$v32, $r32>(cast(xp), g, cin, cast(wt), cout, cast_mut(out)),
                DType::F64 => simd::forward::<$v64, $r64>(cast(xp), g, cin, cast(wt), cout, cast_mut(out)),
            }
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $grad<T: Real>(xp: &[T], g: &Wide, cin: usize, dyw: &[T], cout: usize, dk: &mut [T]) {
            match T::DTYPE {
                DType::F32 => simd::kernel_grad::<$v32, $ob>(cast(xp), g, cin, cast(dyw), cout, cast_mut(dk)),
                DType::F64 => simd::kernel_grad::<$v64, $ob>(cast(xp), g, cin, cast(dyw), cout, cast_mut(dk)),
            }
        }
    };
}

isa_variant!(fwd_avx512, grad_avx512, "avx512f,fma", simd::F32x16, 4, simd::F64x8, 4, 8);
isa_variant!(fwd_avx2, grad_avx2, "avx2,fma", simd::F32x8, 2, simd::F64x4, 2, 2);

fn fwd_portable<T: Real>(xp: &[T], g: &Wide, cin: usize, wt: &[T], cout: usize, out: &mut [T]) {
    match T::DTYPE {
        DType::F32 => fwd_body::<T, 8, false>(xp, g, cin, wt, cout, out),
        DType::F64 => fwd_body::<T, 4, false>(xp, g, cin, wt, cout, out),
    }
}

fn grad_portable<T: Real>(xp: &[T], g: &Wide, cin: usize, dyw: &[T], cout: usize, dk: &mut [T]) {
    match T::DTYPE {
        DType::F32 => grad_body::<T, 4, false>(xp, g, cin, dyw, cout, dk),
        DType::F64 => grad_body::<T, 2, false>(xp, g, cin, dyw, cout, dk),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

fn detect() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
            return Isa::Avx512;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            return Isa::Avx2;
        }
    }
    Isa::Portable
}

fn run_on<T: Real>(isa: Isa, g: &Wide, job: Job<'_, T>) {
    match (isa, job) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: `Isa::Avx512` is only produced after the features were detected.
        (Isa::Avx512, Job::Forward { xp, cin, wt, cout, out }) => unsafe { fwd_avx512(xp, g, cin, wt, cout, out) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        (Isa::Avx512, Job::KernelGrad { xp, cin, dyw, cout, dk }) => unsafe { grad_avx512(xp, g, cin, dyw, cout, dk) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: `Isa::Avx2` is only produced after the features were detected.
        (Isa::Avx2, Job::Forward { xp, cin, wt, cout, out }) => unsafe { fwd_avx2(xp, g, cin, wt, cout, out) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        (Isa::Avx2, Job::KernelGrad { xp, cin, dyw, cout, dk }) => unsafe { grad_avx2(xp, g, cin, dyw, cout, dk) },
        (_, Job::Forward { xp, cin, wt, cout, out }) => fwd_portable(xp, g, cin, wt, cout, out),
        (_, Job::KernelGrad { xp, cin, dyw, cout, dk }) => grad_portable(xp, g, cin, dyw, cout, dk),
    }
}

pub(crate) fn run<T: Real>(g: &Wide, job: Job<'_, T>) {
    static ISA: std::sync::OnceLock<Isa> = std::sync::OnceLock::new();
    run_on(*ISA.get_or_init(detect), g, job)
}

/// Buffers handed out by [`with_buffers`].
pub(crate) const SLOTS: usize = 4;

#[derive(Default)]
struct Pool {
    grid: (usize, usize),
    f32: [Vec<f32>; SLOTS],
    f64: [Vec<f64>; SLOTS],
}

thread_local! {
    static POOL: std::cell::RefCell<Pool> = std::cell::RefCell::default();
}

/// Runs `f` with per-thread buffers of the given lengths, reused between
/// calls on the same grid size. New elements are zero and callers only ever
/// write interior positions through `pad_into` and `widen_into` or whole
/// planes through the kernels, so a slot used consistently keeps its zero
/// border. Each slot must be used for one layout only.
pub(crate) fn with_buffers<T: Real, R>(g: &Wide, lens: [usize; SLOTS], f: impl FnOnce([&mut [T]; SLOTS]) -> R) -> R {
    fn fit<U: Real, T: Real>(v: &mut Vec<U>, n: usize) -> &mut [T] {
        v.resize(n, U::zero());
        cast_mut::<U, T>(v)
    }
    fn take<U: Real, T: Real>(bufs: &mut [Vec<U>; SLOTS], lens: [usize; SLOTS]) -> [&mut [T]; SLOTS] {
        let [a, b, c, d] = bufs;
        [fit(a, lens[0]), fit(b, lens[1]), fit(c, lens[2]), fit(d, lens[3])]
    }
    let run = |pool: &mut Pool| {
        if pool.grid != (g.h, g.w) {
            *pool = Pool {
                grid: (g.h, g.w),
                ..Pool::default()
            };
        }
        match T::DTYPE {
            DType::F32 => f(take(&mut pool.f32, lens)),
            DType::F64 => f(take(&mut pool.f64, lens)),
        }
    };
    POOL.with(|cell| match cell.try_borrow_mut() {
        Ok(mut pool) => run(&mut pool),
        // a nested call on this thread gets buffers of its own
        Err(_) => run(&mut Pool::default()),
    })
}
