//! Network primitives: pure forward/backward kernels plus small stateful
//! wrappers that retain what one backward call needs.
//!
//! Each wrapper caches its forward state for exactly one `backward`; calling
//! `backward` twice (or before `forward`) is a [`Error::MissingCache`].

mod basic;
mod conv;
mod kernel;
mod norm;

pub use basic::*;
pub use conv::*;
pub use norm::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Need {
    pub input: bool,
    pub params: bool,
}

impl Need {
    pub const ALL: Need = Need {
        input: true,
        params: true,
    };
    pub const INPUT: Need = Need {
        input: true,
        params: false,
    };
    pub const PARAMS: Need = Need {
        input: false,
        params: true,
    };
}

/// Output of a layer backward. `params` follows the layer's parameter order
/// and is empty when parameter gradients were not requested.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub input: Option<Tensor<T>>,
    pub params: Vec<Tensor<T>>,
}

impl<T> Grads<T> {
    pub fn input(self) -> Result<Tensor<T>> {
        self.input.ok_or(Error::InvalidArgument(
            "input gradient was not requested".into(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(stride: usize) -> Self {
        Self {
            stride,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, f: &StandardFilter<'_, T>) -> Result<Tensor<T>> {
        let y = conv2d_forward(x, f, self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Parameter gradients: `[weights]`.
    pub fn backward(
        &mut self,
        f: &StandardFilter<'_, T>,
        gy: &Tensor<T>,
        need: Need,
    ) -> Result<Grads<T>> {
        let x = self.input.take().ok_or(Error::MissingCache("conv2d"))?;
        let (gx, gw) = conv2d_backward(&x, f, self.stride, gy, need.input, need.params)?;
        Ok(Grads {
            input: gx,
            params: gw.into_iter().collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv<T> {
    pub stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> DepthwiseConv<T> {
    pub fn new(stride: usize) -> Self {
        Self {
            stride,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, f: &DepthwiseFilter<'_, T>) -> Result<Tensor<T>> {
        let y = depthwise_forward(x, f, self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Parameter gradients: `[weights]` as an owned `[k, k, C]` tensor.
    pub fn backward(
        &mut self,
        f: &DepthwiseFilter<'_, T>,
        gy: &Tensor<T>,
        need: Need,
    ) -> Result<Grads<T>> {
        let x = self.input.take().ok_or(Error::MissingCache("depthwise"))?;
        let (gx, gw) = depthwise_backward(&x, f, self.stride, gy, need.input, need.params)?;
        Ok(Grads {
            input: gx,
            params: gw.into_iter().collect(),
        })
    }
}

/// 1x1 convolution, optionally strided (used for shortcut projections).
#[derive(Debug, Clone)]
pub struct PointwiseConv<T> {
    pub stride: usize,
    cache: Option<(Tensor<T>, usize, usize)>,
}

impl<T: Real> PointwiseConv<T> {
    pub fn new(stride: usize) -> Self {
        Self {
            stride,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, f: &PointwiseFilter<'_, T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        let xs = subsample(x, self.stride)?;
        let y = pointwise_forward(&xs, f)?;
        self.cache = Some((xs, h, w));
        Ok(y)
    }

    /// Parameter gradients: `[weights]`.
    pub fn backward(
        &mut self,
        f: &PointwiseFilter<'_, T>,
        gy: &Tensor<T>,
        need: Need,
    ) -> Result<Grads<T>> {
        let (xs, h, w) = self.cache.take().ok_or(Error::MissingCache("pointwise"))?;
        let (gx, gw) = pointwise_backward(&xs, f, gy, need.input, need.params)?;
        let gx = gx
            .map(|g| subsample_backward(&g, self.stride, h, w))
            .transpose()?;
        Ok(Grads {
            input: gx,
            params: gw.into_iter().collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub mode: Mode,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(mode: Mode) -> Self {
        Self { mode, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, p: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm_forward(x, p, self.mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    /// Parameter gradients: `[scale, shift]`.
    pub fn backward(&mut self, scale: &Tensor<T>, gy: &Tensor<T>, need: Need) -> Result<Grads<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("batch norm"))?;
        let (gx, gs, gb) = batchnorm_backward(&cache, scale, gy)?;
        Ok(Grads {
            input: need.input.then_some(gx),
            params: if need.params { vec![gs, gb] } else { vec![] },
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        relu_forward(x)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::MissingCache("relu"))?;
        relu_backward(&x, gy)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { hw: None }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        self.hw = Some((h, w));
        global_avg_pool(x)
    }

    pub fn backward<T: Real>(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self
            .hw
            .take()
            .ok_or(Error::MissingCache("global average pool"))?;
        global_avg_pool_backward(gy, h, w)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Linear<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        weights: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let y = linear_forward(x, weights, bias)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Parameter gradients: `[weights, bias]`.
    pub fn backward(
        &mut self,
        weights: &Tensor<T>,
        gy: &Tensor<T>,
        need: Need,
    ) -> Result<Grads<T>> {
        let x = self.input.take().ok_or(Error::MissingCache("linear"))?;
        let (gx, gw, gb) = linear_backward(&x, weights, gy)?;
        Ok(Grads {
            input: need.input.then_some(gx),
            params: if need.params { vec![gw, gb] } else { vec![] },
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SoftmaxXent<T> {
    cache: Option<(Tensor<T>, Vec<usize>)>,
}

impl<T: Real> SoftmaxXent<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    /// Mean cross-entropy; the probabilities are kept for backward.
    pub fn forward(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let (loss, probs) = softmax_xent(logits, labels)?;
        self.cache = Some((probs, labels.to_vec()));
        Ok(loss)
    }

    pub fn probs(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|(p, _)| p)
    }

    pub fn backward(&mut self, upstream: T) -> Result<Tensor<T>> {
        let (probs, labels) = self
            .cache
            .take()
            .ok_or(Error::MissingCache("softmax cross-entropy"))?;
        softmax_xent_backward(&probs, &labels, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let w = Tensor::<f64>::zeros(&[3, 3, 2, 2]);
        let f = StandardFilter::new(&w).unwrap();
        let mut conv = Conv2d::new(1);
        let gy = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv.backward(&f, &gy, Need::ALL),
            Err(Error::MissingCache(_))
        ));
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        conv.forward(&x, &f).unwrap();
        conv.backward(&f, &gy, Need::ALL).unwrap();
        // cache is consumed by the first backward
        assert!(conv.backward(&f, &gy, Need::ALL).is_err());
        assert!(Relu::<f64>::new().backward(&gy).is_err());
        assert!(GlobalAvgPool::new()
            .backward(&Tensor::<f64>::zeros(&[1, 2]))
            .is_err());
        assert!(SoftmaxXent::<f64>::new().backward(1.0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = crate::tensor::Rng::new(11);
        let x = Tensor::<f64>::he_init(&[2, 3, 4, 4], 1, &mut rng).unwrap();
        let w = Tensor::<f64>::he_init(&[3, 3, 3], 9, &mut rng).unwrap();
        let f = DepthwiseFilter::new(&w).unwrap();
        let mut dw = DepthwiseConv::new(2);
        let y = dw.forward(&x, &f).unwrap();
        let g = dw.backward(&f, &y.zeros_like(), Need::ALL).unwrap();
        assert_eq!(g.input.unwrap().max_abs(), 0.0);
        assert_eq!(g.params[0].max_abs(), 0.0);

        let mut bn = BatchNorm::new(Mode::Train);
        let mut p = BatchNormParams::new(3);
        let y = bn.forward(&x, &mut p).unwrap();
        let g = bn.backward(&p.scale, &y.zeros_like(), Need::ALL).unwrap();
        assert_eq!(g.input.unwrap().max_abs(), 0.0);
        assert!(g.params.iter().all(|t| t.max_abs() == 0.0));
    }
}
