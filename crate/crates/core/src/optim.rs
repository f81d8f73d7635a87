//! SGD with classical momentum, L2 weight decay folded into the gradient,
//! and step-wise learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamRef};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl OptimConfig {
    /// Base-network pretraining at full scale.
    pub fn paper_pretrain() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 120,
            decay_epochs: vec![80, 100],
            decay_factor: 10.0,
            batch_size: 256,
        }
    }

    pub fn paper_finetune() -> Self {
        Self {
            epochs: 100,
            decay_epochs: vec![60, 80],
            ..Self::paper_pretrain()
        }
    }

    pub fn paper_gate() -> Self {
        Self {
            epochs: 10,
            decay_epochs: vec![5],
            ..Self::paper_pretrain()
        }
    }

    /// Shortened schedules for the small synthetic experiment.
    pub fn desk_pretrain() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            decay_epochs: vec![13, 17],
            decay_factor: 10.0,
            batch_size: 64,
        }
    }

    pub fn desk_finetune() -> Self {
        Self {
            epochs: 20,
            decay_epochs: vec![12, 16],
            ..Self::desk_pretrain()
        }
    }

    pub fn desk_gate() -> Self {
        Self {
            epochs: 10,
            decay_epochs: vec![5],
            ..Self::desk_pretrain()
        }
    }

    /// `scale` in {"paper", "desk"}; `phase` in {"pretrain", "finetune", "gate"}.
    pub fn preset(scale: &str, phase: &str) -> Result<Self> {
        match (scale, phase) {
            ("paper", "pretrain") => Ok(Self::paper_pretrain()),
            ("paper", "finetune") => Ok(Self::paper_finetune()),
            ("paper", "gate") => Ok(Self::paper_gate()),
            ("desk", "pretrain") => Ok(Self::desk_pretrain()),
            ("desk", "finetune") => Ok(Self::desk_finetune()),
            ("desk", "gate") => Ok(Self::desk_gate()),
            _ => Err(Error::Config(format!(
                "no optimizer preset `{scale}` for phase `{phase}`"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "decay epochs {:?} must be strictly increasing",
                self.decay_epochs
            ));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad(format!(
                "decay epochs {:?} must be < {}",
                self.decay_epochs, self.epochs
            ));
        }
        if self.decay_factor < 1.0 {
            return bad(format!(
                "decay factor must be >= 1, got {}",
                self.decay_factor
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok(self.lr0 / self.decay_factor.powi(decays as i32))
    }
}

/// One in-place update: `v <- m*v + g + wd*p`, `p <- p - lr*v`.
pub fn sgd_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch(format!(
            "sgd: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (lr, m, wd) = (
        T::from_f64(lr),
        T::from_f64(momentum),
        T::from_f64(weight_decay),
    );
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity per trainable unit, created lazily at zero.
#[derive(Debug, Clone, Default)]
pub struct MomentumState<T> {
    velocity: BTreeMap<ParamRef, Tensor<T>>,
}

impl<T: Real> MomentumState<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, r: &ParamRef) -> Option<&Tensor<T>> {
        self.velocity.get(r)
    }

    /// Applies one step to every unit in `grads`. Stack slots are updated
    /// in isolation so other domains' slots are never touched.
    pub fn apply(
        &mut self,
        model: &mut Model<T>,
        grads: &BTreeMap<ParamRef, Tensor<T>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (r, g) in grads {
            let v = self
                .velocity
                .entry(r.clone())
                .or_insert_with(|| g.zeros_like());
            match r.slot {
                Some(_) => {
                    let mut p = model.param(r)?;
                    sgd_step(&mut p, g, v, lr, momentum, weight_decay)?;
                    model.set_param(r, &p)?;
                }
                None => sgd_step(model.tensor_mut(&r.name)?, g, v, lr, momentum, weight_decay)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule() {
        let c = OptimConfig::paper_pretrain();
        c.validate().unwrap();
        assert_eq!(c.lr_at(0).unwrap(), 0.1);
        assert!((c.lr_at(79).unwrap() - 0.1).abs() < 1e-15);
        assert!((c.lr_at(80).unwrap() - 0.01).abs() < 1e-15);
        assert!((c.lr_at(100).unwrap() - 0.001).abs() < 1e-15);
        assert!(c.lr_at(120).is_err());
        let g = OptimConfig::paper_gate();
        assert!((g.lr_at(5).unwrap() - 0.01).abs() < 1e-15);
        for c in [
            OptimConfig::paper_finetune(),
            OptimConfig::desk_pretrain(),
            OptimConfig::desk_finetune(),
            OptimConfig::desk_gate(),
        ] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn constant_without_decay() {
        let c = OptimConfig {
            decay_epochs: vec![],
            ..OptimConfig::desk_pretrain()
        };
        assert!((0..c.epochs).all(|e| c.lr_at(e).unwrap() == c.lr0));
    }

    #[test]
    fn invalid_configs() {
        let base = OptimConfig::desk_pretrain();
        for c in [
            OptimConfig {
                lr0: 0.0,
                ..base.clone()
            },
            OptimConfig {
                momentum: 1.0,
                ..base.clone()
            },
            OptimConfig {
                decay_epochs: vec![5, 5],
                ..base.clone()
            },
            OptimConfig {
                decay_epochs: vec![20],
                ..base.clone()
            },
            OptimConfig {
                batch_size: 0,
                ..base.clone()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn step_cases() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);

        let before = p.clone();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);

        // constant gradient, two steps: lr*g + lr*(m*g + g)
        let (lr, m, gv) = (0.1, 0.9, 0.5);
        let mut p = Tensor::<f64>::zeros(&[1]);
        let g = Tensor::from_vec(&[1], vec![gv]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, lr, m, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut v, lr, m, 0.0).unwrap();
        assert!((p.data()[0] - (-lr * gv * (2.0 + m))).abs() < 1e-15);

        assert!(sgd_step(&mut p, &Tensor::zeros(&[2]), &mut v, lr, m, 0.0).is_err());
    }
}
