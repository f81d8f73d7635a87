//! Standard, depthwise and pointwise convolution kernels over `[N, C, H, W]`
//! activations with SAME zero padding.
//!
//! Filter layouts: standard `[k, k, in, out]`, depthwise `[k, k, C]` (or a
//! `[k, k, C, T]` stack read through a strided view), pointwise `[in, out]`.

use crate::error::{Error, Result};
use crate::exec::for_each_chunk;

use super::kernel::{axpy, combine_planes, dot, dot4, DotAcc};
use crate::tensor::{Real, Tensor};

/// Output extent for SAME padding: `ceil(len / stride)`.
pub fn same_out(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Output indices `o` in `[lo, hi)` whose input index `o * stride + offset`
/// lands inside `[0, in_len)`.
#[inline]
fn valid(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Range of input columns read by output columns `[lo, hi)` at stride 1.
#[inline]
fn shifted(lo: usize, hi: usize, shift: isize) -> std::ops::Range<usize> {
    (lo as isize + shift) as usize..(hi as isize + shift) as usize
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "stride must be 1 or 2, got {stride}"
        )))
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::InvalidShape(format!("kernel size {k} must be odd")))
    }
}

/// Borrowed `[k, k, in, out]` filter.
#[derive(Clone, Copy, Debug)]
pub struct StandardFilter<'a, T> {
    weights: &'a Tensor<T>,
    k: usize,
    cin: usize,
    cout: usize,
}

impl<'a, T: Real> StandardFilter<'a, T> {
    pub fn new(weights: &'a Tensor<T>) -> Result<Self> {
        match weights.shape()[..] {
            [kh, kw, cin, cout] if kh == kw => {
                check_kernel(kh)?;
                Ok(Self {
                    weights,
                    k: kh,
                    cin,
                    cout,
                })
            }
            _ => Err(Error::InvalidShape(format!(
                "standard filter must be [k, k, in, out], got {:?}",
                weights.shape()
            ))),
        }
    }

    pub fn kernel(&self) -> usize {
        self.k
    }
    pub fn in_channels(&self) -> usize {
        self.cin
    }
    pub fn out_channels(&self) -> usize {
        self.cout
    }
    pub fn tensor(&self) -> &'a Tensor<T> {
        self.weights
    }
}

/// Depthwise `[k, k, C]` filter, possibly one slot of a `[k, k, C, T]` stack.
/// Element `(i, j, c)` lives at `data[((i * k + j) * C + c) * step + offset]`.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseFilter<'a, T> {
    data: &'a [T],
    k: usize,
    channels: usize,
    step: usize,
    offset: usize,
}

impl<'a, T: Real> DepthwiseFilter<'a, T> {
    pub fn new(weights: &'a Tensor<T>) -> Result<Self> {
        match weights.shape()[..] {
            [kh, kw, c] if kh == kw => {
                check_kernel(kh)?;
                Ok(Self {
                    data: weights.data(),
                    k: kh,
                    channels: c,
                    step: 1,
                    offset: 0,
                })
            }
            _ => Err(Error::InvalidShape(format!(
                "depthwise filter must be [k, k, C], got {:?}",
                weights.shape()
            ))),
        }
    }

    /// View slot `d` of a stacked `[k, k, C, T]` tensor without copying.
    pub fn from_stack(stack: &'a Tensor<T>, d: usize) -> Result<Self> {
        match stack.shape()[..] {
            [kh, kw, c, t] if kh == kw => {
                check_kernel(kh)?;
                if d >= t {
                    return Err(Error::Registry(format!(
                        "depthwise stack has {t} slots, asked for {d}"
                    )));
                }
                Ok(Self {
                    data: stack.data(),
                    k: kh,
                    channels: c,
                    step: t,
                    offset: d,
                })
            }
            _ => Err(Error::InvalidShape(format!(
                "depthwise stack must be [k, k, C, T], got {:?}",
                stack.shape()
            ))),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> T {
        self.data[((i * self.k + j) * self.channels + c) * self.step + self.offset]
    }

    pub fn kernel(&self) -> usize {
        self.k
    }
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Owned `[k, k, C]` copy.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.k, self.k, self.channels]);
        let o = out.data_mut();
        for i in 0..self.k {
            for j in 0..self.k {
                for c in 0..self.channels {
                    o[(i * self.k + j) * self.channels + c] = self.get(i, j, c);
                }
            }
        }
        out
    }
}

/// Borrowed `[in, out]` filter.
#[derive(Clone, Copy, Debug)]
pub struct PointwiseFilter<'a, T> {
    weights: &'a Tensor<T>,
    cin: usize,
    cout: usize,
}

impl<'a, T: Real> PointwiseFilter<'a, T> {
    pub fn new(weights: &'a Tensor<T>) -> Result<Self> {
        let (cin, cout) = weights.dims2().map_err(|_| {
            Error::InvalidShape(format!(
                "pointwise filter must be [in, out], got {:?}",
                weights.shape()
            ))
        })?;
        Ok(Self { weights, cin, cout })
    }
    pub fn in_channels(&self) -> usize {
        self.cin
    }
    pub fn out_channels(&self) -> usize {
        self.cout
    }
    pub fn tensor(&self) -> &'a Tensor<T> {
        self.weights
    }
}

fn channel_mismatch(what: &str, filter: usize, input: usize) -> Error {
    Error::ShapeMismatch(format!(
        "{what} filter expects {filter} input channels, input has {input}"
    ))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    f: &StandardFilter<'_, T>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_stride(stride)?;
    let (n, m, h, w) = x.dims4()?;
    if m != f.cin {
        return Err(channel_mismatch("standard", f.cin, m));
    }
    let (k, co) = (f.k, f.cout);
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let xd = x.data();
    let wd = f.weights.data();
    // coef[(ic, ki, kj)][oc]
    let mut coef = vec![vec![T::zero(); co]; m * k * k];
    for ic in 0..m {
        for kk in 0..k * k {
            coef[ic * k * k + kk].copy_from_slice(&wd[(kk * m + ic) * co..(kk * m + ic + 1) * co]);
        }
    }
    for_each_chunk(out.data_mut(), co * ho * wo, |b, o| {
        let col = im2col(&xd[b * m * h * w..(b + 1) * m * h * w], m, h, w, k, stride);
        combine_planes(o, ho * wo, &col, &coef);
    });
    Ok(out)
}

/// Unfolds `m` planes of `h x w` into `[m * k * k, ho * wo]` patch rows,
/// ordered by `(channel, ki, kj)`, with zeros where the window leaves the
/// image.
fn im2col<T: Real>(src: &[T], m: usize, h: usize, w: usize, k: usize, stride: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    let mut col = vec![T::zero(); m * k * k * ho * wo];
    for ic in 0..m {
        let plane = &src[ic * h * w..(ic + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid(ho, h, stride, ki as isize - pad);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid(wo, w, stride, kj as isize - pad);
                if ow_lo == ow_hi {
                    continue;
                }
                let row = ((ic * k + ki) * k + kj) * ho * wo;
                for oh in oh_lo..oh_hi {
                    let ih = ((oh * stride + ki) as isize - pad) as usize;
                    let dst = &mut col[row + oh * wo..row + (oh + 1) * wo];
                    for ow in ow_lo..ow_hi {
                        dst[ow] = plane[ih * w + ((ow * stride + kj) as isize - pad) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Weight gradient `[rows, co]` of `sum_b cols_b^T G_b`, where every image
/// contributes `rows` planes of `hw` (in `cols`) and `co` gradient planes.
fn weight_grad<T: Real>(
    cols: &[T],
    gd: &[T],
    n: usize,
    rows: usize,
    co: usize,
    hw: usize,
) -> Vec<T> {
    let mut gw = vec![T::zero(); rows * co];
    for_each_chunk(&mut gw, co, |r, dst| {
        for b in 0..n {
            let x = &cols[(b * rows + r) * hw..(b * rows + r + 1) * hw];
            let g = |oc: usize| &gd[(b * co + oc) * hw..(b * co + oc + 1) * hw];
            let mut oc = 0;
            while oc + 4 <= co {
                let v = dot4(x, [g(oc), g(oc + 1), g(oc + 2), g(oc + 3)]);
                for j in 0..4 {
                    dst[oc + j] += v[j];
                }
                oc += 4;
            }
            for oc in oc..co {
                dst[oc] += dot(x, g(oc));
            }
        }
    });
    gw
}

/// Returns `(grad_input, grad_weights)`; either may be skipped.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    f: &StandardFilter<'_, T>,
    stride: usize,
    gy: &Tensor<T>,
    need_input: bool,
    need_weights: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, m, h, w) = x.dims4()?;
    let (k, co) = (f.k, f.cout);
    let pad = (k / 2) as isize;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    if gy.shape() != [n, co, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d upstream gradient {:?}, expected {:?}",
            gy.shape(),
            [n, co, ho, wo]
        )));
    }
    let xd = x.data();
    let gd = gy.data();
    let wd = f.weights.data();

    let gx = need_input.then(|| {
        let mut gx = Tensor::zeros(&[n, m, h, w]);
        for_each_chunk(gx.data_mut(), h * w, |plane, dst| {
            let (b, ic) = (plane / m, plane % m);
            for oc in 0..co {
                let g = &gd[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
                for ki in 0..k {
                    let (oh_lo, oh_hi) = valid(ho, h, stride, ki as isize - pad);
                    for kj in 0..k {
                        let wv = wd[((ki * k + kj) * m + ic) * co + oc];
                        let (ow_lo, ow_hi) = valid(wo, w, stride, kj as isize - pad);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * stride + ki) as isize - pad) as usize;
                            let grow = &g[oh * wo..(oh + 1) * wo];
                            let drow = &mut dst[ih * w..(ih + 1) * w];
                            if stride == 1 {
                                axpy(
                                    &mut drow[shifted(ow_lo, ow_hi, kj as isize - pad)],
                                    wv,
                                    &grow[ow_lo..ow_hi],
                                );
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * stride + kj) as isize - pad) as usize;
                                    drow[iw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        });
        gx
    });

    let gw = need_weights.then(|| {
        let kk = m * k * k;
        let mut cols = vec![T::zero(); n * kk * ho * wo];
        for_each_chunk(&mut cols, kk * ho * wo, |b, dst| {
            dst.copy_from_slice(&im2col(
                &xd[b * m * h * w..(b + 1) * m * h * w],
                m,
                h,
                w,
                k,
                stride,
            ));
        });
        let tmp = weight_grad(&cols, gd, n, kk, co, ho * wo);
        let mut gw = Tensor::zeros(&[k, k, m, co]);
        let o = gw.data_mut();
        for ic in 0..m {
            for t in 0..k * k {
                o[(t * m + ic) * co..(t * m + ic + 1) * co]
                    .copy_from_slice(&tmp[(ic * k * k + t) * co..(ic * k * k + t + 1) * co]);
            }
        }
        gw
    });
    Ok((gx, gw))
}

pub fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    f: &DepthwiseFilter<'_, T>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_stride(stride)?;
    let (n, c, h, w) = x.dims4()?;
    if c != f.channels {
        return Err(channel_mismatch("depthwise", f.channels, c));
    }
    let k = f.k;
    let pad = (k / 2) as isize;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    for_each_chunk(out.data_mut(), ho * wo, |plane, o| {
        let ch = plane % c;
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid(ho, h, stride, ki as isize - pad);
            for kj in 0..k {
                let wv = f.get(ki, kj, ch);
                let (ow_lo, ow_hi) = valid(wo, w, stride, kj as isize - pad);
                if ow_lo == ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = ((oh * stride + ki) as isize - pad) as usize;
                    let row = &src[ih * w..(ih + 1) * w];
                    let orow = &mut o[oh * wo..(oh + 1) * wo];
                    if stride == 1 {
                        let shift = kj as isize - pad;
                        let r = &row
                            [(ow_lo as isize + shift) as usize..(ow_hi as isize + shift) as usize];
                        for (ov, &iv) in orow[ow_lo..ow_hi].iter_mut().zip(r) {
                            *ov += wv * iv;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = ((ow * stride + kj) as isize - pad) as usize;
                            orow[ow] += wv * row[iw];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Returns `(grad_input, grad_weights)` with the weight gradient as an owned
/// `[k, k, C]` tensor regardless of whether the filter was a stack slot.
pub fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    f: &DepthwiseFilter<'_, T>,
    stride: usize,
    gy: &Tensor<T>,
    need_input: bool,
    need_weights: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, c, h, w) = x.dims4()?;
    let k = f.k;
    let pad = (k / 2) as isize;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    if gy.shape() != [n, c, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "depthwise upstream gradient {:?}, expected {:?}",
            gy.shape(),
            [n, c, ho, wo]
        )));
    }
    let xd = x.data();
    let gd = gy.data();

    let gx = need_input.then(|| {
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for_each_chunk(gx.data_mut(), h * w, |plane, dst| {
            let ch = plane % c;
            let g = &gd[plane * ho * wo..(plane + 1) * ho * wo];
            for ki in 0..k {
                let (oh_lo, oh_hi) = valid(ho, h, stride, ki as isize - pad);
                for kj in 0..k {
                    let wv = f.get(ki, kj, ch);
                    let (ow_lo, ow_hi) = valid(wo, w, stride, kj as isize - pad);
                    if ow_lo == ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * stride + ki) as isize - pad) as usize;
                        let grow = &g[oh * wo..(oh + 1) * wo];
                        let drow = &mut dst[ih * w..(ih + 1) * w];
                        if stride == 1 {
                            let shift = kj as isize - pad;
                            let d = &mut drow[(ow_lo as isize + shift) as usize
                                ..(ow_hi as isize + shift) as usize];
                            for (dv, &gv) in d.iter_mut().zip(&grow[ow_lo..ow_hi]) {
                                *dv += wv * gv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * stride + kj) as isize - pad) as usize;
                                drow[iw] += wv * grow[ow];
                            }
                        }
                    }
                }
            }
        });
        gx
    });

    let gw = need_weights.then(|| {
        let mut tmp = vec![T::zero(); c * k * k];
        for_each_chunk(&mut tmp, k * k, |ch, dst| {
            for b in 0..n {
                let plane = b * c + ch;
                let g = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                if stride == 1 {
                    // zero-padded copy, so every tap reads full rows
                    let pw_ = w + 2 * pad as usize;
                    let mut xp = vec![T::zero(); (h + 2 * pad as usize) * pw_];
                    for ih in 0..h {
                        let o = (ih + pad as usize) * pw_ + pad as usize;
                        xp[o..o + w].copy_from_slice(&src[ih * w..(ih + 1) * w]);
                    }
                    for ki in 0..k {
                        for kj in 0..k {
                            let mut acc = DotAcc::new();
                            for oh in 0..ho {
                                let o = (oh + ki) * pw_ + kj;
                                acc.add(&g[oh * wo..(oh + 1) * wo], &xp[o..o + wo]);
                            }
                            dst[ki * k + kj] += acc.finish();
                        }
                    }
                    continue;
                }
                for ki in 0..k {
                    let (oh_lo, oh_hi) = valid(ho, h, stride, ki as isize - pad);
                    for kj in 0..k {
                        let (ow_lo, ow_hi) = valid(wo, w, stride, kj as isize - pad);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * stride + ki) as isize - pad) as usize;
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * stride + kj) as isize - pad) as usize;
                                acc += g[oh * wo + ow] * src[ih * w + iw];
                            }
                        }
                        dst[ki * k + kj] += acc;
                    }
                }
            }
        });
        let mut gw = Tensor::zeros(&[k, k, c]);
        let o = gw.data_mut();
        for ch in 0..c {
            for kk in 0..k * k {
                o[kk * c + ch] = tmp[ch * k * k + kk];
            }
        }
        gw
    });
    Ok((gx, gw))
}

pub fn pointwise_forward<T: Real>(x: &Tensor<T>, f: &PointwiseFilter<'_, T>) -> Result<Tensor<T>> {
    let (n, m, h, w) = x.dims4()?;
    if m != f.cin {
        return Err(channel_mismatch("pointwise", f.cin, m));
    }
    let co = f.cout;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, co, h, w]);
    let xd = x.data();
    let coef: Vec<Vec<T>> = f
        .weights
        .data()
        .chunks_exact(co)
        .map(|r| r.to_vec())
        .collect();
    for_each_chunk(out.data_mut(), co * hw, |b, o| {
        combine_planes(o, hw, &xd[b * m * hw..(b + 1) * m * hw], &coef);
    });
    Ok(out)
}

pub fn pointwise_backward<T: Real>(
    x: &Tensor<T>,
    f: &PointwiseFilter<'_, T>,
    gy: &Tensor<T>,
    need_input: bool,
    need_weights: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, m, h, w) = x.dims4()?;
    let co = f.cout;
    let hw = h * w;
    if gy.shape() != [n, co, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "pointwise upstream gradient {:?}, expected {:?}",
            gy.shape(),
            [n, co, h, w]
        )));
    }
    let gd = gy.data();
    let wd = f.weights.data();

    let gx = need_input.then(|| {
        let mut gx = Tensor::zeros(&[n, m, h, w]);
        // coef[oc][ic]
        let coef: Vec<Vec<T>> = (0..co)
            .map(|oc| (0..m).map(|ic| wd[ic * co + oc]).collect())
            .collect();
        for_each_chunk(gx.data_mut(), m * hw, |b, dst| {
            combine_planes(dst, hw, &gd[b * co * hw..(b + 1) * co * hw], &coef);
        });
        gx
    });

    let gw = need_weights.then(|| {
        Tensor::from_vec(&[m, co], weight_grad(x.data(), gd, n, m, co, hw)).expect("shape matches")
    });
    Ok((gx, gw))
}

/// Keep every `stride`-th pixel starting at the origin (the sampling grid of
/// a strided 1x1 convolution).
pub fn subsample<T: Real>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    check_stride(stride)?;
    if stride == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    for_each_chunk(out.data_mut(), ho * wo, |plane, o| {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                o[oh * wo + ow] = src[oh * stride * w + ow * stride];
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`subsample`].
pub fn subsample_backward<T: Real>(
    gy: &Tensor<T>,
    stride: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if stride == 1 {
        return Ok(gy.clone());
    }
    let (n, c, ho, wo) = gy.dims4()?;
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let gd = gy.data();
    for_each_chunk(gx.data_mut(), h * w, |plane, dst| {
        let g = &gd[plane * ho * wo..(plane + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                dst[oh * stride * w + ow * stride] = g[oh * wo + ow];
            }
        }
    });
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Literal loop form of the standard convolution with zero padding.
    fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (n, m, h, w) = x.dims4().unwrap();
        let (k, co) = (wt.shape()[0], wt.shape()[3]);
        let pad = (k / 2) as isize;
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for oc in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                for ic in 0..m {
                                    let ih = (oh * stride + i) as isize - pad;
                                    let iw = (ow * stride + j) as isize - pad;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    s += wt.data()[((i * k + j) * m + ic) * co + oc]
                                        * x.data()
                                            [((b * m + ic) * h + ih as usize) * w + iw as usize];
                                }
                            }
                        }
                        out[((b * co + oc) * ho + oh) * wo + ow] = s;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, co, ho, wo], out).unwrap()
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ones_kernel_padding_counts() {
        let x = Tensor::<f64>::alloc(&[1, 1, 3, 3], 1.0).unwrap();
        let wt = Tensor::<f64>::alloc(&[3, 3, 1, 1], 1.0).unwrap();
        let y = conv2d_forward(&x, &StandardFilter::new(&wt).unwrap(), 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn delta_kernels_are_identity() {
        let mut rng = Rng::new(1);
        let x = randn(&[2, 3, 5, 4], &mut rng);
        let mut std_w = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        let mut dw = Tensor::<f64>::zeros(&[3, 3, 3]);
        for c in 0..3 {
            std_w.data_mut()[(4 * 3 + c) * 3 + c] = 1.0;
            dw.data_mut()[4 * 3 + c] = 1.0;
        }
        let a = conv2d_forward(&x, &StandardFilter::new(&std_w).unwrap(), 1).unwrap();
        let b = depthwise_forward(&x, &DepthwiseFilter::new(&dw).unwrap(), 1).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        for stride in [1, 2] {
            let x = randn(&[1, 2, 5, 5], &mut rng);
            let wt = randn(&[3, 3, 2, 3], &mut rng);
            let y = conv2d_forward(&x, &StandardFilter::new(&wt).unwrap(), stride).unwrap();
            assert!(max_diff(&y, &conv_oracle(&x, &wt, stride)) < 1e-12);
        }
    }

    #[test]
    fn depthwise_constant_input() {
        let x = Tensor::<f64>::alloc(&[1, 2, 4, 4], 2.5).unwrap();
        let dw = Tensor::<f64>::alloc(&[3, 3, 2], 1.0).unwrap();
        let y = depthwise_forward(&x, &DepthwiseFilter::new(&dw).unwrap(), 1).unwrap();
        for c in 0..2 {
            for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
                assert_eq!(y.data()[(c * 4 + i) * 4 + j], 22.5);
            }
        }
    }

    #[test]
    fn pointwise_sums_channels() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let wt = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let y = pointwise_forward(&x, &PointwiseFilter::new(&wt).unwrap()).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
        let eye = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            pointwise_forward(&x, &PointwiseFilter::new(&eye).unwrap()).unwrap(),
            x
        );
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let wt = Tensor::<f32>::zeros(&[3, 3, 2, 4]);
        assert!(matches!(
            conv2d_forward(&x, &StandardFilter::new(&wt).unwrap(), 1),
            Err(Error::ShapeMismatch(_))
        ));
        let dw = Tensor::<f32>::zeros(&[3, 3, 2]);
        assert!(depthwise_forward(&x, &DepthwiseFilter::new(&dw).unwrap(), 1).is_err());
        let pw = Tensor::<f32>::zeros(&[2, 2]);
        assert!(pointwise_forward(&x, &PointwiseFilter::new(&pw).unwrap()).is_err());
        assert!(StandardFilter::new(&Tensor::<f32>::zeros(&[2, 2, 1, 1])).is_err());
        assert!(conv2d_forward(
            &x,
            &StandardFilter::new(&Tensor::<f32>::zeros(&[3, 3, 3, 1])).unwrap(),
            3
        )
        .is_err());
    }

    #[test]
    fn stride_two_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 4, 7, 8]);
        let dw = Tensor::<f32>::zeros(&[3, 3, 4]);
        let y = depthwise_forward(&x, &DepthwiseFilter::new(&dw).unwrap(), 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert_eq!(subsample(&x, 2).unwrap().shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn stack_slot_view_matches_owned_copy() {
        let mut rng = Rng::new(5);
        let parts: Vec<_> = (0..3).map(|_| randn(&[3, 3, 4], &mut rng)).collect();
        let stack = Tensor::stack_last(&parts).unwrap();
        let x = randn(&[2, 4, 6, 6], &mut rng);
        for (d, p) in parts.iter().enumerate() {
            let view = DepthwiseFilter::from_stack(&stack, d).unwrap();
            assert_eq!(&view.to_tensor(), p);
            let a = depthwise_forward(&x, &view, 1).unwrap();
            let b = depthwise_forward(&x, &DepthwiseFilter::new(p).unwrap(), 1).unwrap();
            assert_eq!(a, b);
        }
        assert!(DepthwiseFilter::from_stack(&stack, 3).is_err());
    }
}
