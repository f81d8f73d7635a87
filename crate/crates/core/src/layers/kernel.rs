//! Inner loops shared by the layer kernels. Every reduction uses a fixed
//! lane layout, so results never depend on how work is split across threads.

use crate::tensor::Real;

const LANES: usize = 8;

#[inline]
fn fold_lanes<T: Real>(l: [T; LANES]) -> T {
    ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7]))
}

/// Dot product accumulated over several slice pairs.
pub(crate) struct DotAcc<T> {
    lanes: [T; LANES],
    tail: T,
}

impl<T: Real> DotAcc<T> {
    pub(crate) fn new() -> Self {
        Self {
            lanes: [T::zero(); LANES],
            tail: T::zero(),
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, a: &[T], b: &[T]) {
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            let x: &[T; LANES] = x.try_into().expect("lane width");
            let y: &[T; LANES] = y.try_into().expect("lane width");
            for i in 0..LANES {
                self.lanes[i] += x[i] * y[i];
            }
        }
        for (&x, &y) in ra.iter().zip(rb) {
            self.tail += x * y;
        }
    }

    pub(crate) fn finish(self) -> T {
        fold_lanes(self.lanes) + self.tail
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    fold_lanes(lanes) + tail
}

/// Four dot products against a shared left operand.
#[inline]
pub(crate) fn dot4<T: Real>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let mut lanes = [[T::zero(); LANES]; 4];
    let full = a.len() / LANES * LANES;
    let mut i = 0;
    while i < full {
        let x: &[T; LANES] = a[i..i + LANES].try_into().expect("lane width");
        for (j, bj) in b.iter().enumerate() {
            let y: &[T; LANES] = bj[i..i + LANES].try_into().expect("lane width");
            for q in 0..LANES {
                lanes[j][q] += x[q] * y[q];
            }
        }
        i += LANES;
    }
    let mut out = [T::zero(); 4];
    for j in 0..4 {
        let mut tail = T::zero();
        for k in full..a.len() {
            tail += a[k] * b[j][k];
        }
        out[j] = fold_lanes(lanes[j]) + tail;
    }
    out
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for i in 0..LANES {
            lanes[i] += x[i];
        }
    }
    let mut tail = T::zero();
    for &x in r {
        tail += x;
    }
    fold_lanes(lanes) + tail
}

/// `dst += alpha * src`.
#[inline]
pub(crate) fn axpy<T: Real>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `out[r] = sum_k coef[k][r] * src[k]` over planes of length `hw`, where
/// `out` holds `rows` planes and `src` holds `coef.len()` planes. The sum
/// over `k` runs in index order for every output element.
pub(crate) fn combine_planes<T: Real>(out: &mut [T], hw: usize, src: &[T], coef: &[Vec<T>]) {
    let rows = out.len() / hw;
    let mut r = 0;
    while r + 4 <= rows {
        let w: Vec<[T; 4]> = coef
            .iter()
            .map(|c| [c[r], c[r + 1], c[r + 2], c[r + 3]])
            .collect();
        let mut p = 0;
        while p + LANES <= hw {
            let mut acc = [[T::zero(); LANES]; 4];
            for (k, wk) in w.iter().enumerate() {
                let s: &[T; LANES] = src[k * hw + p..k * hw + p + LANES]
                    .try_into()
                    .expect("lane width");
                for j in 0..4 {
                    for q in 0..LANES {
                        acc[j][q] += wk[j] * s[q];
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                out[(r + j) * hw + p..(r + j) * hw + p + LANES].copy_from_slice(a);
            }
            p += LANES;
        }
        for p in p..hw {
            for j in 0..4 {
                let mut acc = T::zero();
                for (k, wk) in w.iter().enumerate() {
                    acc += wk[j] * src[k * hw + p];
                }
                out[(r + j) * hw + p] = acc;
            }
        }
        r += 4;
    }
    for r in r..rows {
        let o = &mut out[r * hw..(r + 1) * hw];
        o.fill(T::zero());
        for (k, c) in coef.iter().enumerate() {
            axpy(o, c[r], &src[k * hw..(k + 1) * hw]);
        }
    }
}

/// `sum_i (a_i - mean)^2`.
#[inline]
pub(crate) fn sum_sq_dev<T: Real>(a: &[T], mean: T) -> T {
    let mut lanes = [T::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for i in 0..LANES {
            let d = x[i] - mean;
            lanes[i] += d * d;
        }
    }
    let mut tail = T::zero();
    for &x in r {
        tail += (x - mean) * (x - mean);
    }
    fold_lanes(lanes) + tail
}
