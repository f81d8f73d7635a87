//! Finite-difference gradient checks for every layer type, in f64.
//!
//! Each check projects the layer output onto a fixed random tensor `r`, so
//! the scalar loss is `sum(r * y)` and the analytic gradients come from one
//! backward call with upstream `r`. Numerical gradients use central
//! differences with step [`EPSILON`].

use crate::error::{Error, Result};
use crate::gating::{hidden_size, mix, mix_backward, GateBatchMode, GateOp, GateParams};
use crate::layers::*;
use crate::tensor::{Rng, Tensor};

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients compare absolutely.
pub const FLOOR: f64 = 1e-6;

/// Check names, in run order.
pub const CHECKS: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "depthwise",
    "depthwise_stride2",
    "pointwise",
    "pointwise_stride2",
    "batchnorm",
    "linear",
    "relu",
    "global_avg_pool",
    "softmax_xent",
    "gate",
    "gate_per_example",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("valid shape")
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.range(0.1, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic[i]` against central differences of `loss` with
/// respect to `inputs[i]`.
fn compare(
    name: &str,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: impl Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (t, a) in analytic.iter().enumerate() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + EPSILON;
            let up = loss(&work)?;
            work[t].data_mut()[i] = orig - EPSILON;
            let down = loss(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPSILON);
            worst = worst.max(rel_error(a.data()[i], numeric));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        entries,
        max_rel_error: worst,
    })
}

fn check_one(name: &str, rng: &mut Rng, flip: bool) -> Result<CheckResult> {
    let (inputs, mut analytic, loss): (
        Vec<Tensor<f64>>,
        Vec<Tensor<f64>>,
        Box<dyn Fn(&[Tensor<f64>]) -> Result<f64>>,
    ) = match name {
        "conv2d" | "conv2d_stride2" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let x = randn(&[2, 3, 5, 5], rng);
            let w = randn(&[3, 3, 3, 4], rng);
            let r = randn(&[2, 4, same_out(5, stride), same_out(5, stride)], rng);
            let mut op = Conv2d::new(stride);
            op.forward(&x, &StandardFilter::new(&w)?)?;
            let g = op.backward(&StandardFilter::new(&w)?, &r, Need::ALL)?;
            let analytic = vec![g.input.clone().expect("requested"), g.params[0].clone()];
            let loss = move |v: &[Tensor<f64>]| -> Result<f64> {
                Ok(dot(
                    &conv2d_forward(&v[0], &StandardFilter::new(&v[1])?, stride)?,
                    &r,
                ))
            };
            (vec![x, w], analytic, Box::new(loss))
        }
        "depthwise" | "depthwise_stride2" => {
            let stride = if name == "depthwise" { 1 } else { 2 };
            let x = randn(&[2, 3, 6, 6], rng);
            let w = randn(&[3, 3, 3], rng);
            let r = randn(&[2, 3, same_out(6, stride), same_out(6, stride)], rng);
            let mut op = DepthwiseConv::new(stride);
            op.forward(&x, &DepthwiseFilter::new(&w)?)?;
            let g = op.backward(&DepthwiseFilter::new(&w)?, &r, Need::ALL)?;
            let analytic = vec![g.input.clone().expect("requested"), g.params[0].clone()];
            let loss = move |v: &[Tensor<f64>]| -> Result<f64> {
                Ok(dot(
                    &depthwise_forward(&v[0], &DepthwiseFilter::new(&v[1])?, stride)?,
                    &r,
                ))
            };
            (vec![x, w], analytic, Box::new(loss))
        }
        "pointwise" | "pointwise_stride2" => {
            let stride = if name == "pointwise" { 1 } else { 2 };
            let x = randn(&[2, 3, 5, 5], rng);
            let w = randn(&[3, 4], rng);
            let r = randn(&[2, 4, same_out(5, stride), same_out(5, stride)], rng);
            let mut op = PointwiseConv::new(stride);
            op.forward(&x, &PointwiseFilter::new(&w)?)?;
            let g = op.backward(&PointwiseFilter::new(&w)?, &r, Need::ALL)?;
            let analytic = vec![g.input.clone().expect("requested"), g.params[0].clone()];
            let loss = move |v: &[Tensor<f64>]| -> Result<f64> {
                Ok(dot(
                    &PointwiseConv::new(stride).forward(&v[0], &PointwiseFilter::new(&v[1])?)?,
                    &r,
                ))
            };
            (vec![x, w], analytic, Box::new(loss))
        }
        "batchnorm" => {
            let x = randn(&[4, 3, 3, 3], rng);
            let scale = randn(&[3], rng);
            let shift = randn(&[3], rng);
            let r = randn(&[4, 3, 3, 3], rng);
            let params = |s: &Tensor<f64>, b: &Tensor<f64>| {
                let mut p = BatchNormParams::new(3);
                p.scale = s.clone();
                p.shift = b.clone();
                p
            };
            let mut op = BatchNorm::new(Mode::Train);
            op.forward(&x, &mut params(&scale, &shift))?;
            let g = op.backward(&scale, &r, Need::ALL)?;
            let analytic = vec![
                g.input.clone().expect("requested"),
                g.params[0].clone(),
                g.params[1].clone(),
            ];
            let loss = move |v: &[Tensor<f64>]| -> Result<f64> {
                let (y, _) = batchnorm_forward(&v[0], &mut params(&v[1], &v[2]), Mode::Train)?;
                Ok(dot(&y, &r))
            };
            (vec![x, scale, shift], analytic, Box::new(loss))
        }
        "linear" => {
            let x = randn(&[4, 5], rng);
            let w = randn(&[5, 3], rng);
            let b = randn(&[3], rng);
            let r = randn(&[4, 3], rng);
            let mut op = Linear::new();
            op.forward(&x, &w, &b)?;
            let g = op.backward(&w, &r, Need::ALL)?;
            let analytic = vec![
                g.input.clone().expect("requested"),
                g.params[0].clone(),
                g.params[1].clone(),
            ];
            let loss = move |v: &[Tensor<f64>]| -> Result<f64> {
                Ok(dot(&linear_forward(&v[0], &v[1], &v[2])?, &r))
            };
            (vec![x, w, b], analytic, Box::new(loss))
        }
        "relu" => {
            let x = away_from_zero(&[2, 3, 4, 4], rng);
            let r = randn(&[2, 3, 4, 4], rng);
            let mut op = Relu::new();
            op.forward(&x);
            let analytic = vec![op.backward(&r)?];
            let loss =
                move |v: &[Tensor<f64>]| -> Result<f64> { Ok(dot(&relu_forward(&v[0]), &r)) };
            (vec![x], analytic, Box::new(loss))
        }
        "global_avg_pool" => {
            let x = randn(&[2, 3, 4, 5], rng);
            let r = randn(&[2, 3], rng);
            let mut op = GlobalAvgPool::new();
            op.forward(&x)?;
            let analytic = vec![op.backward(&r)?];
            let loss =
                move |v: &[Tensor<f64>]| -> Result<f64> { Ok(dot(&global_avg_pool(&v[0])?, &r)) };
            (vec![x], analytic, Box::new(loss))
        }
        "softmax_xent" => {
            let logits = randn(&[4, 5], rng).map(|v| 2.0 * v);
            let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            let mut op = SoftmaxXent::new();
            op.forward(&logits, &labels)?;
            let analytic = vec![op.backward(1.0)?];
            let loss =
                move |v: &[Tensor<f64>]| -> Result<f64> { Ok(softmax_xent(&v[0], &labels)?.0) };
            (vec![logits], analytic, Box::new(loss))
        }
        "gate" | "gate_per_example" => {
            let mode = if name == "gate" {
                GateBatchMode::BatchMean
            } else {
                GateBatchMode::PerExample
            };
            let (n, c, t) = (3, 8, 3);
            let h = hidden_size(c);
            let x = randn(&[n, c, 4, 4], rng);
            let w1 = randn(&[c, h], rng);
            let w2 = randn(&[h, t], rng);
            let b2 = randn(&[t], rng);
            // keep every hidden pre-activation clear of the ReLU kink
            let pre = linear_forward(&global_avg_pool(&x)?, &w1, &Tensor::zeros(&[h]))?;
            let mut b1 = randn(&[h], rng);
            for j in 0..h {
                let col = (0..n).map(|i| pre.data()[i * h + j]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                b1.data_mut()[j] = if b1.data()[j] > 0.0 {
                    0.3 - lo
                } else {
                    -0.3 - hi
                };
            }
            let outs: Vec<Tensor<f64>> = (0..t).map(|_| randn(&[n, 5, 4, 4], rng)).collect();
            let r = randn(&[n, 5, 4, 4], rng);

            let gp = GateParams {
                fc1_weight: &w1,
                fc1_bias: &b1,
                fc2_weight: &w2,
                fc2_bias: &b2,
            };
            let mut op = GateOp::new(mode);
            let mut gap = GlobalAvgPool::new();
            let s = op.forward(&gap.forward(&x)?, &gp)?;
            let (branches, gs) = mix_backward(&outs, &s, &r)?;
            let (gm, pg) = op.backward(&gp, &gs)?;
            let mut analytic = vec![gap.backward(&gm)?];
            analytic.extend(pg);
            analytic.extend(branches);

            let mut inputs = vec![x.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone()];
            inputs.extend(outs);
            let loss = move |v: &[Tensor<f64>]| -> Result<f64> {
                let gp = GateParams {
                    fc1_weight: &v[1],
                    fc1_bias: &v[2],
                    fc2_weight: &v[3],
                    fc2_bias: &v[4],
                };
                let s = GateOp::new(mode).forward(&global_avg_pool(&v[0])?, &gp)?;
                Ok(dot(&mix(&v[5..], &s)?, &r))
            };
            (inputs, analytic, Box::new(loss))
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradient check `{other}`"
            )));
        }
    };
    if flip {
        analytic[0].scale(-1.0);
    }
    compare(name, &inputs, &analytic, loss)
}

/// Runs every check. `fault` negates the first analytic gradient of the
/// named check, which must then fail.
pub fn run_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(f) = fault {
        if !CHECKS.contains(&f) {
            return Err(Error::InvalidArgument(format!(
                "unknown gradient check `{f}`"
            )));
        }
    }
    let root = Rng::new(seed);
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, name)| check_one(name, &mut root.derive(i as u64), fault == Some(*name)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_suite(7, None).unwrap() {
            assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
            assert!(r.entries > 0);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let out = run_suite(7, Some("depthwise")).unwrap();
        for r in out {
            assert_eq!(r.passed(), r.name != "depthwise", "{}", r.name);
        }
    }

    #[test]
    fn unknown_fault_rejected() {
        assert!(run_suite(1, Some("nope")).is_err());
    }
}
