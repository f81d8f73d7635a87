use dwsep_core::layers::{
    conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward, pointwise_forward,
    DepthwiseFilter, PointwiseFilter, StandardFilter,
};
use dwsep_core::{Rng, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Direct loop convolution with same padding; independent of the library.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (k, co) = (w.shape()[0], w.shape()[3]);
    let pad = (k / 2) as isize;
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            let ih = (oh * stride + i) as isize - pad;
                            let iw = (ow * stride + j) as isize - pad;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            for m in 0..ci {
                                let xv =
                                    x.data()[((b * ci + m) * h + ih as usize) * wd + iw as usize];
                                acc += xv * w.data()[((i * k + j) * ci + m) * co + o];
                            }
                        }
                    }
                    out[((b * co + o) * ho + oh) * wo + ow] = acc;
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

/// `K[i,j,m,n] = dw[i,j,m] * pw[m,n]`.
fn composed(dw: &Tensor<f64>, pw: &Tensor<f64>) -> Tensor<f64> {
    let (k, c) = (dw.shape()[0], dw.shape()[2]);
    let co = pw.shape()[1];
    let mut out = vec![0.0; k * k * c * co];
    for ij in 0..k * k {
        for m in 0..c {
            for o in 0..co {
                out[(ij * c + m) * co + o] = dw.data()[ij * c + m] * pw.data()[m * co + o];
            }
        }
    }
    Tensor::from_vec(&[k, k, c, co], out).unwrap()
}

/// Standard filter that only connects channel `m` to output `m`.
fn block_diagonal(dw: &Tensor<f64>) -> Tensor<f64> {
    let (k, c) = (dw.shape()[0], dw.shape()[2]);
    let mut out = vec![0.0; k * k * c * c];
    for ij in 0..k * k {
        for m in 0..c {
            out[(ij * c + m) * c + m] = dw.data()[ij * c + m];
        }
    }
    Tensor::from_vec(&[k, k, c, c], out).unwrap()
}

#[derive(Debug, Clone)]
struct Case {
    n: usize,
    c: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    seed: u64,
}

fn cases() -> impl Strategy<Value = Case> {
    (
        1usize..3,
        1usize..6,
        1usize..6,
        1usize..9,
        1usize..9,
        prop_oneof![Just(1usize), Just(3), Just(5)],
        1usize..3,
        any::<u64>(),
    )
        .prop_map(|(n, c, co, h, w, k, stride, seed)| Case {
            n,
            c,
            co,
            h,
            w,
            k,
            stride,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn separable_equals_composed_standard_conv(case in cases()) {
        let mut rng = Rng::new(case.seed);
        let x = randn(&[case.n, case.c, case.h, case.w], &mut rng);
        let dw = randn(&[case.k, case.k, case.c], &mut rng);
        let pw = randn(&[case.c, case.co], &mut rng);
        let sep = pointwise_forward(
            &depthwise_forward(&x, &DepthwiseFilter::new(&dw).unwrap(), case.stride).unwrap(),
            &PointwiseFilter::new(&pw).unwrap(),
        )
        .unwrap();
        let kk = composed(&dw, &pw);
        let std = conv2d_forward(&x, &StandardFilter::new(&kk).unwrap(), case.stride).unwrap();
        prop_assert!(max_diff(&sep, &std) < TOL);
        prop_assert!(max_diff(&std, &naive_conv(&x, &kk, case.stride)) < TOL);
    }

    #[test]
    fn depthwise_equals_block_diagonal_conv(case in cases()) {
        let mut rng = Rng::new(case.seed);
        let x = randn(&[case.n, case.c, case.h, case.w], &mut rng);
        let dw = randn(&[case.k, case.k, case.c], &mut rng);
        let y = depthwise_forward(&x, &DepthwiseFilter::new(&dw).unwrap(), case.stride).unwrap();
        let bd = block_diagonal(&dw);
        let std = conv2d_forward(&x, &StandardFilter::new(&bd).unwrap(), case.stride).unwrap();
        prop_assert!(max_diff(&y, &std) < TOL);
        prop_assert!(max_diff(&y, &naive_conv(&x, &bd, case.stride)) < TOL);
    }

    #[test]
    fn stacked_slot_matches_standalone_filter(case in cases(), slots in 1usize..4) {
        let mut rng = Rng::new(case.seed);
        let x = randn(&[case.n, case.c, case.h, case.w], &mut rng);
        let parts: Vec<_> = (0..slots).map(|_| randn(&[case.k, case.k, case.c], &mut rng)).collect();
        let stack = Tensor::stack_last(&parts).unwrap();
        for (d, p) in parts.iter().enumerate() {
            let a = depthwise_forward(&x, &DepthwiseFilter::from_stack(&stack, d).unwrap(), case.stride).unwrap();
            let b = depthwise_forward(&x, &DepthwiseFilter::new(p).unwrap(), case.stride).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn depthwise_gradients_equal_block_diagonal_gradients(case in cases()) {
        let mut rng = Rng::new(case.seed);
        let x = randn(&[case.n, case.c, case.h, case.w], &mut rng);
        let dw = randn(&[case.k, case.k, case.c], &mut rng);
        let bd = block_diagonal(&dw);
        let gy = randn(&[case.n, case.c, case.h.div_ceil(case.stride), case.w.div_ceil(case.stride)], &mut rng);
        let (gx, gw) = depthwise_backward(&x, &DepthwiseFilter::new(&dw).unwrap(), case.stride, &gy, true, true).unwrap();
        let (sx, sw) = conv2d_backward(&x, &StandardFilter::new(&bd).unwrap(), case.stride, &gy, true, true).unwrap();
        prop_assert!(max_diff(&gx.unwrap(), &sx.unwrap()) < TOL);
        let (gw, sw) = (gw.unwrap(), sw.unwrap());
        let c = case.c;
        for ij in 0..case.k * case.k {
            for m in 0..c {
                prop_assert!((gw.data()[ij * c + m] - sw.data()[(ij * c + m) * c + m]).abs() < TOL);
            }
        }
    }
}
