use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != gy.shape() {
        return Err(Error::ShapeMismatch("relu upstream gradient shape".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Channel means: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(gy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = gy.dims2()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw);
    let mut data = Vec::with_capacity(n * c * hw);
    for &g in gy.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_vec(&[n, c, h, w], data)
}

/// `x @ weights + bias` with `x: [N, D_in]`, `weights: [D_in, D_out]`.
pub fn linear_forward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, din) = x.dims2()?;
    let (wi, dout) = weights.dims2()?;
    if wi != din || bias.len() != dout {
        return Err(Error::ShapeMismatch(format!(
            "linear: input {:?}, weights {:?}, bias {:?}",
            x.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let (xd, wd) = (x.data(), weights.data());
    let mut out = Vec::with_capacity(n * dout);
    for r in 0..n {
        let mut row = bias.data().to_vec();
        for i in 0..din {
            let xv = xd[r * din + i];
            for (o, &wv) in row.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                *o += xv * wv;
            }
        }
        out.extend(row);
    }
    Tensor::from_vec(&[n, dout], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, din) = x.dims2()?;
    let (_, dout) = weights.dims2()?;
    if gy.shape() != [n, dout] {
        return Err(Error::ShapeMismatch(
            "linear upstream gradient shape".into(),
        ));
    }
    let (xd, wd, gd) = (x.data(), weights.data(), gy.data());
    let mut gx = Tensor::zeros(&[n, din]);
    let mut gw = Tensor::zeros(&[din, dout]);
    let mut gb = Tensor::zeros(&[dout]);
    for r in 0..n {
        let g = &gd[r * dout..(r + 1) * dout];
        for (b, &gv) in gb.data_mut().iter_mut().zip(g) {
            *b += gv;
        }
        for i in 0..din {
            let wrow = &wd[i * dout..(i + 1) * dout];
            gx.data_mut()[r * din + i] = wrow.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let xv = xd[r * din + i];
            for (o, &gv) in gw.data_mut()[i * dout..(i + 1) * dout].iter_mut().zip(g) {
                *o += xv * gv;
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, l) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(l) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Adjoint of [`softmax_rows`] given its output.
pub fn softmax_rows_backward<T: Real>(probs: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, l) = probs.dims2()?;
    if gy.shape() != probs.shape() {
        return Err(Error::ShapeMismatch(
            "softmax upstream gradient shape".into(),
        ));
    }
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks_exact(l).zip(gy.data().chunks_exact(l)) {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
    }
    Tensor::from_vec(probs.shape(), out)
}

/// Mean cross-entropy over the batch and the softmax probabilities.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, l) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: l,
        });
    }
    let mut probs = Vec::with_capacity(n * l);
    let mut loss = T::zero();
    for (row, &y) in logits.data().chunks_exact(l).zip(labels) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        loss += lse - row[y];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    Ok((loss / T::from_usize(n), Tensor::from_vec(&[n, l], probs)?))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_xent_backward<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Result<Tensor<T>> {
    let (n, l) = probs.dims2()?;
    let scale = upstream / T::from_usize(n);
    let mut g = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        g.data_mut()[r * l + y] -= T::one();
    }
    g.scale(scale);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn relu_cases() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&y), y);
        let neg = Tensor::<f64>::alloc(&[4], -3.0).unwrap();
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_cases() {
        let x =
            Tensor::<f64>::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0])
                .unwrap();
        let m = global_avg_pool(&x).unwrap();
        assert_eq!(m.data(), &[2.5, 5.0]);
        let mut rng = Rng::new(7);
        let x = Tensor::<f64>::from_vec(&[2, 3, 4, 5], (0..120).map(|_| rng.normal()).collect())
            .unwrap();
        let m = global_avg_pool(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for i in 0..20 {
                    s += x.data()[(b * 3 + c) * 20 + i];
                }
                assert!((m.data()[b * 3 + c] - s / 20.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::zeros(&[2]);
        assert_eq!(linear_forward(&x, &eye, &zero_b).unwrap(), x);
        let b = Tensor::from_vec(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let y = linear_forward(&x, &Tensor::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(&y.data()[..3], b.data());
        assert_eq!(&y.data()[3..], b.data());

        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::from_vec(&[3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let w = Tensor::<f64>::from_vec(&[4, 2], (0..8).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![0.1, 0.2]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        for r in 0..3 {
            for o in 0..2 {
                let mut s = b.data()[o];
                for i in 0..4 {
                    s += x.data()[r * 4 + i] * w.data()[i * 2 + o];
                }
                assert!((y.data()[r * 2 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn xent_cases() {
        let logits = Tensor::<f64>::zeros(&[2, 5]);
        let (loss, probs) = softmax_xent(&logits, &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-12));

        let logits = Tensor::<f64>::from_vec(&[1, 3], vec![1e4, 0.0, -5.0]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);

        assert!(matches!(
            softmax_xent(&Tensor::<f64>::zeros(&[1, 3]), &[3]),
            Err(Error::InvalidLabel {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn xent_matches_direct_formula() {
        let mut rng = Rng::new(9);
        let n = 6;
        let l = 7;
        let logits =
            Tensor::<f64>::from_vec(&[n, l], (0..n * l).map(|_| 3.0 * rng.normal()).collect())
                .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(l)).collect();
        let (loss, probs) = softmax_xent(&logits, &labels).unwrap();
        let mut expect = 0.0;
        for r in 0..n {
            let row = &logits.data()[r * l..(r + 1) * l];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[labels[r]].exp() / z).ln();
            let s: f64 = probs.data()[r * l..(r + 1) * l].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((loss - expect / n as f64).abs() < 1e-10);
    }
}
