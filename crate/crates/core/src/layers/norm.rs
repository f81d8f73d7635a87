use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::kernel::{dot, sum, sum_sq_dev};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormParams<T> {
    /// Identity transform: scale 1, shift 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::alloc(&[channels], T::one()).expect("channels >= 1"),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::alloc(&[channels], T::one()).expect("channels >= 1"),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.shift, &self.running_mean, &self.running_var]
            .iter()
            .any(|t| t.len() != c)
        {
            return Err(Error::ShapeMismatch(
                "batch norm parameter lengths differ".into(),
            ));
        }
        if self.epsilon <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(
                "batch norm epsilon/momentum out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized activations and the per-channel inverse std, retained for backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

/// Forward pass. In train mode the running statistics are updated in place
/// (exponential average with `momentum`, unbiased variance).
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    p.validate()?;
    let (n, c, h, w) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch norm has {} channels, input has {c}",
            p.channels()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    if mode == Mode::Train && count < 2 {
        return Err(Error::DegenerateBatch);
    }
    let eps = T::from_f64(p.epsilon);
    let xd = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let planes = (0..n).map(|b| &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
        let (mean, var) = match mode {
            Mode::Train => {
                let cnt = T::from_usize(count);
                let mean = planes.clone().map(sum).fold(T::zero(), |a, b| a + b) / cnt;
                let var = planes
                    .map(|p| sum_sq_dev(p, mean))
                    .fold(T::zero(), |a, b| a + b)
                    / cnt;
                let m = T::from_f64(p.momentum);
                let unbiased = var * cnt / T::from_usize(count - 1);
                let rm = &mut p.running_mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mean;
                let rv = &mut p.running_var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * unbiased;
                (mean, var)
            }
            Mode::Eval => (p.running_mean.data()[ch], p.running_var.data()[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, bta) = (p.scale.data()[ch], p.shift.data()[ch]);
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let src = &xd[r.clone()];
            for ((xh, o), &v) in xhat.data_mut()[r.clone()]
                .iter_mut()
                .zip(&mut out.data_mut()[r])
                .zip(src)
            {
                let z = (v - mean) * is;
                *xh = z;
                *o = g * z + bta;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(grad_input, grad_scale, grad_shift)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    scale: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if gy.shape() != cache.xhat.shape() {
        return Err(Error::ShapeMismatch(
            "batch norm upstream gradient shape".into(),
        ));
    }
    let (n, c, h, w) = gy.dims4()?;
    let hw = h * w;
    let cnt = T::from_usize(n * hw);
    let gd = gy.data();
    let xh = cache.xhat.data();
    let mut gx = Tensor::zeros(gy.shape());
    let mut gscale = Tensor::zeros(&[c]);
    let mut gshift = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            sum_g += sum(&gd[r.clone()]);
            sum_gx += dot(&gd[r.clone()], &xh[r]);
        }
        gscale.data_mut()[ch] = sum_gx;
        gshift.data_mut()[ch] = sum_g;
        let gamma = scale.data()[ch];
        let is = cache.inv_std[ch];
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let dst = &mut gx.data_mut()[r.clone()];
            match cache.mode {
                Mode::Train => {
                    let (k, mg, mgx) = (gamma * is, sum_g / cnt, sum_gx / cnt);
                    for ((d, &g), &z) in dst.iter_mut().zip(&gd[r.clone()]).zip(&xh[r]) {
                        *d = k * (g - mg - z * mgx);
                    }
                }
                Mode::Eval => {
                    for (d, &g) in dst.iter_mut().zip(&gd[r]) {
                        *d = gamma * is * g;
                    }
                }
            }
        }
    }
    Ok((gx, gscale, gshift))
}
