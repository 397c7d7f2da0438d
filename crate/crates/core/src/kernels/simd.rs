//! Hand-vectorised loops of the direct convolution for x86-64.
//!
//! The tiles match the portable code in `direct`: an `OB x R` register block
//! of output channels by pixel vectors for the forward pass, `OB x 3` vectors
//! per kernel row for the kernel gradient.

#![cfg(target_arch = "x86_64")]

use std::arch::x86_64::*;

use super::direct::Wide;

pub(crate) trait Vector: Copy {
    type Elem: Copy;
    const LANES: usize;
    unsafe fn zero() -> Self;
    unsafe fn splat(v: Self::Elem) -> Self;
    unsafe fn load(p: *const Self::Elem) -> Self;
    unsafe fn store(self, p: *mut Self::Elem);
    /// `a * b + self`
    unsafe fn fma(self, a: Self, b: Self) -> Self;
    /// Sum of lanes in index order.
    unsafe fn sum(self) -> Self::Elem;
}

macro_rules! vector {
    ($name:ident, $raw:ty, $elem:ty, $lanes:literal, $zero:ident, $splat:ident, $load:ident, $store:ident, $fma:ident) => {
        #[derive(Clone, Copy)]
        pub(crate) struct $name($raw);

        impl Vector for $name {
            type Elem = $elem;
            const LANES: usize = $lanes;

            #[inline(always)]
            unsafe fn zero() -> Self {
                Self($zero())
            }

            #[inline(always)]
            unsafe fn splat(v: $elem) -> Self {
                Self($splat(v))
            }

            #[inline(always)]
            unsafe fn load(p: *const $elem) -> Self {
                Self($load(p))
            }

            #[inline(always)]
            unsafe fn store(self, p: *mut $elem) {
                $store(p, self.0)
            }

            #[inline(always)]
            unsafe fn fma(self, a: Self, b: Self) -> Self {
                Self($fma(a.0, b.0, self.0))
            }

            #[inline(always)]
            unsafe fn sum(self) -> $elem {
                let mut lanes = [0 as $elem; $lanes];
                self.store(lanes.as_mut_ptr());
                lanes.iter().fold(0 as $elem, |a, &b| a + b)
            }
        }
    };
}

vector!(F32x16, __m512, f32, 16, _mm512_setzero_ps, _mm512_set1_ps, _mm512_loadu_ps, _mm512_storeu_ps, _mm512_fmadd_ps);
vector!(F64x8, __m512d, f64, 8, _mm512_setzero_pd, _mm512_set1_pd, _mm512_loadu_pd, _mm512_storeu_pd, _mm512_fmadd_pd);
vector!(F32x8, __m256, f32, 8, _mm256_setzero_ps, _mm256_set1_ps, _mm256_loadu_ps, _mm256_storeu_ps, _mm256_fmadd_ps);
vector!(F64x4, __m256d, f64, 4, _mm256_setzero_pd, _mm256_set1_pd, _mm256_loadu_pd, _mm256_storeu_pd, _mm256_fmadd_pd);

/// Checks that every tile load and store of the loops below stays inside
/// the buffers; the loops themselves index through raw pointers.
fn check_forward(g: &Wide, tile: usize, xp: usize, cin: usize, wt: usize, cout: usize, out: usize) {
    assert!(g.qpad.is_multiple_of(tile), "tile does not divide the wide grid");
    assert!(cin == 0 || xp >= (cin - 1) * g.plane + g.qpad + 2 * g.row + 2, "padded input too short");
    assert!(wt >= cin * 9 * cout && out >= cout * g.qpad, "weights or output too short");
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
unsafe fn fwd_block<V: Vector, const R: usize, const OB: usize>(
    xp: *const V::Elem,
    g: &Wide,
    cin: usize,
    wt: *const V::Elem,
    cout: usize,
    o0: usize,
    q0: usize,
    out: *mut V::Elem,
) {
    let mut acc = [[V::zero(); R]; OB];
    for c in 0..cin {
        let base = xp.add(c * g.plane + q0);
        let wc = wt.add(c * 9 * cout + o0);
        for tap in 0..9 {
            let src = base.add((tap / 3) * g.row + tap % 3);
            let mut x = [V::zero(); R];
            for (r, v) in x.iter_mut().enumerate() {
                *v = V::load(src.add(r * V::LANES));
            }
            for (o, row) in acc.iter_mut().enumerate() {
                let w = V::splat(*wc.add(tap * cout + o));
                for r in 0..R {
                    row[r] = row[r].fma(w, x[r]);
                }
            }
        }
    }
    for (o, row) in acc.iter().enumerate() {
        let dst = out.add((o0 + o) * g.qpad + q0);
        for (r, v) in row.iter().enumerate() {
            v.store(dst.add(r * V::LANES));
        }
    }
}

#[inline(always)]
pub(crate) unsafe fn forward<V: Vector, const R: usize>(
    xp: &[V::Elem],
    g: &Wide,
    cin: usize,
    wt: &[V::Elem],
    cout: usize,
    out: &mut [V::Elem],
) {
    let tile = R * V::LANES;
    check_forward(g, tile, xp.len(), cin, wt.len(), cout, out.len());
    let (xp, wt, op) = (xp.as_ptr(), wt.as_ptr(), out.as_mut_ptr());
    for q0 in (0..g.qpad).step_by(tile) {
        let mut o0 = 0;
        while o0 + 4 <= cout {
            fwd_block::<V, R, 4>(xp, g, cin, wt, cout, o0, q0, op);
            o0 += 4;
        }
        if o0 + 2 <= cout {
            fwd_block::<V, R, 2>(xp, g, cin, wt, cout, o0, q0, op);
            o0 += 2;
        }
        if o0 < cout {
            fwd_block::<V, R, 1>(xp, g, cin, wt, cout, o0, q0, op);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
unsafe fn grad_block<V: Vector, const OB: usize>(
    xp: *const V::Elem,
    g: &Wide,
    c: usize,
    ky: usize,
    dyw: *const V::Elem,
    o0: usize,
    cin: usize,
    dk: *mut V::Elem,
) {
    let mut acc = [[V::zero(); 3]; OB];
    let base = xp.add(c * g.plane + ky * g.row);
    for q0 in (0..g.qpad).step_by(V::LANES) {
        let x = [V::load(base.add(q0)), V::load(base.add(q0 + 1)), V::load(base.add(q0 + 2))];
        for (o, row) in acc.iter_mut().enumerate() {
            let dy = V::load(dyw.add((o0 + o) * g.qpad + q0));
            for kx in 0..3 {
                row[kx] = row[kx].fma(dy, x[kx]);
            }
        }
    }
    for (o, row) in acc.iter().enumerate() {
        let at = dk.add(((o0 + o) * cin + c) * 9 + ky * 3);
        for (kx, v) in row.iter().enumerate() {
            *at.add(kx) = v.sum();
        }
    }
}

#[inline(always)]
pub(crate) unsafe fn kernel_grad<V: Vector, const OB: usize>(
    xp: &[V::Elem],
    g: &Wide,
    cin: usize,
    dyw: &[V::Elem],
    cout: usize,
    dk: &mut [V::Elem],
) {
    assert!(g.qpad.is_multiple_of(V::LANES), "vector width does not divide the wide grid");
    assert!(cin == 0 || xp.len() >= (cin - 1) * g.plane + g.qpad + 2 * g.row + 2, "padded input too short");
    assert!(dyw.len() >= cout * g.qpad && dk.len() >= cout * cin * 9, "gradient buffers too short");
    let (xp, dyw, dkp) = (xp.as_ptr(), dyw.as_ptr(), dk.as_mut_ptr());
    for c in 0..cin {
        for ky in 0..3 {
            let mut o0 = 0;
            while o0 + OB <= cout {
                grad_block::<V, OB>(xp, g, c, ky, dyw, o0, cin, dkp);
                o0 += OB;
            }
            if OB > 4 && o0 + 4 <= cout {
                grad_block::<V, 4>(xp, g, c, ky, dyw, o0, cin, dkp);
                o0 += 4;
            }
            if OB > 2 && o0 + 2 <= cout {
                grad_block::<V, 2>(xp, g, c, ky, dyw, o0, cin, dkp);
                o0 += 2;
            }
            while o0 < cout {
                grad_block::<V, 1>(xp, g, c, ky, dyw, o0, cin, dkp);
                o0 += 1;
            }
        }
    }
}
