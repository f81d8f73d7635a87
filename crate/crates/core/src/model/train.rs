use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::{batches, sequential, Dataset, Split};
use crate::error::{Error, Result};
use crate::evalscore::{argmax_rows, evaluate};
use crate::layers::{linear_backward, linear_forward, softmax_xent, softmax_xent_backward};
use crate::optim::{MomentumState, OptimConfig};
use crate::tensor::{Real, Tensor};

use super::params::ParamRef;
use super::{DomainInit, DomainSpec, Model};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Seeds the batch order.
    pub seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_batch: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PhaseReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    /// Largest `|sum(s) - 1|` or negative weight seen on any gate output.
    pub max_simplex_error: f64,
}

impl PhaseReport {
    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.metrics.iter().rev().find(|m| m.split == split)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter(|m| m.split == Split::Train)
            .map(|m| m.loss)
            .collect()
    }
}

fn simplex_error<T: Real>(scales: &Tensor<T>) -> f64 {
    let (_, t) = scales.dims2().expect("scales are rank 2");
    scales
        .data()
        .chunks_exact(t)
        .map(|row| {
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            let neg = row
                .iter()
                .map(|v| (-v.as_f64()).max(0.0))
                .fold(0.0, f64::max);
            (sum - 1.0).abs().max(neg)
        })
        .fold(0.0, f64::max)
}

fn correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

fn check_data<T: Real>(model: &Model<T>, d: usize, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data(format!("dataset `{}` is empty", ds.name)));
    }
    let classes = model.domain(d)?.num_classes;
    if ds.num_classes != classes {
        return Err(Error::Data(format!(
            "dataset `{}` has {} classes, domain expects {classes}",
            ds.name, ds.num_classes
        )));
    }
    Ok(())
}

/// Trains the units in `trainable` on domain `d`. Everything else stays
/// bit-identical; BN layers whose parameters are frozen run on their
/// running statistics.
pub fn train_phase<T: Real>(
    model: &mut Model<T>,
    d: usize,
    trainable: &BTreeSet<ParamRef>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &OptimConfig,
    opts: &TrainOptions,
) -> Result<PhaseReport> {
    cfg.validate()?;
    check_data(model, d, train)?;
    if let Some(t) = test {
        check_data(model, d, t)?;
    }
    if trainable.is_empty() {
        return Err(Error::InvalidArgument("nothing to train".into()));
    }
    let wd = model.domain(d)?.weight_decay.unwrap_or(cfg.weight_decay);
    let head_only = trainable.iter().all(|r| r.name.starts_with("classifier."));
    if head_only {
        return train_head(model, d, trainable, train, test, cfg, opts, wd);
    }

    let mut state = MomentumState::new();
    let mut report = PhaseReport::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let (mut loss_sum, mut hits) = (0.0, 0);
        for idx in batches(train.len(), cfg.batch_size, opts.seed, epoch) {
            let (x, y) = train.gather(&idx)?;
            let (logits, tape) =
                model.forward_train(&x.cast(), super::Pass::train(d, trainable))?;
            for (_, s) in tape.gate_scales() {
                report.max_simplex_error = report.max_simplex_error.max(simplex_error(s));
            }
            let (loss, probs) = softmax_xent(&logits, &y)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            loss_sum += loss * idx.len() as f64;
            hits += correct(&argmax_rows(&probs)?, &y);
            let grads = model.backward(tape, &softmax_xent_backward(&probs, &y, T::one())?)?;
            if let Some((r, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {r} at epoch {epoch}"
                )));
            }
            state.apply(model, &grads, lr, cfg.momentum, wd)?;
            report.steps += 1;
        }
        push_epoch(&mut report, epoch, loss_sum, hits, train.len());
        if let Some(t) = test {
            let (loss, acc) = evaluate(model, d, t, opts.eval_batch)?;
            report.metrics.push(EpochMetrics {
                epoch,
                split: Split::Test,
                loss,
                accuracy: acc,
            });
        }
        log_epoch(&report, epoch);
    }
    Ok(report)
}

fn push_epoch(report: &mut PhaseReport, epoch: usize, loss_sum: f64, hits: usize, n: usize) {
    report.metrics.push(EpochMetrics {
        epoch,
        split: Split::Train,
        loss: loss_sum / n as f64,
        accuracy: hits as f64 / n as f64,
    });
}

fn log_epoch(report: &PhaseReport, epoch: usize) {
    for m in report.metrics.iter().filter(|m| m.epoch == epoch) {
        log::info!(
            "epoch {:>3} {:<5} loss {:.4} acc {:.4}",
            epoch,
            m.split.name(),
            m.loss,
            m.accuracy
        );
    }
}

fn all_features<T: Real>(
    model: &Model<T>,
    d: usize,
    ds: &Dataset,
    batch: usize,
) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut width = 0;
    for idx in sequential(ds.len(), batch) {
        let (x, _) = ds.gather(&idx)?;
        let f = model.features(&x.cast(), d)?;
        width = f.shape()[1];
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[ds.len(), width], data)
}

fn rows<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::from_vec(&[idx.len(), w], data)
}

/// Classifier-only training: the frozen trunk's features are computed once.
#[allow(clippy::too_many_arguments)]
fn train_head<T: Real>(
    model: &mut Model<T>,
    d: usize,
    trainable: &BTreeSet<ParamRef>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &OptimConfig,
    opts: &TrainOptions,
    wd: f64,
) -> Result<PhaseReport> {
    let c = model.config().clone();
    let wr = c.param_ref(super::Group::Classifier, "weight", d);
    let br = c.param_ref(super::Group::Classifier, "bias", d);
    let feats = all_features(model, d, train, opts.eval_batch)?;
    let test_feats = test
        .map(|t| all_features(model, d, t, opts.eval_batch))
        .transpose()?;
    let mut state = MomentumState::new();
    let mut report = PhaseReport::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let (mut loss_sum, mut hits) = (0.0, 0);
        for idx in batches(train.len(), cfg.batch_size, opts.seed, epoch) {
            let x = rows(&feats, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let w = model.tensor(&wr.name)?;
            let logits = linear_forward(&x, w, model.tensor(&br.name)?)?;
            let (loss, probs) = softmax_xent(&logits, &y)?;
            if !loss.as_f64().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            loss_sum += loss.as_f64() * idx.len() as f64;
            hits += correct(&argmax_rows(&probs)?, &y);
            let (_, gw, gb) =
                linear_backward(&x, w, &softmax_xent_backward(&probs, &y, T::one())?)?;
            let mut grads = std::collections::BTreeMap::new();
            if trainable.contains(&wr) {
                grads.insert(wr.clone(), gw);
            }
            if trainable.contains(&br) {
                grads.insert(br.clone(), gb);
            }
            state.apply(model, &grads, lr, cfg.momentum, wd)?;
            report.steps += 1;
        }
        push_epoch(&mut report, epoch, loss_sum, hits, train.len());
        if let (Some(t), Some(tf)) = (test, &test_feats) {
            let logits = linear_forward(tf, model.tensor(&wr.name)?, model.tensor(&br.name)?)?;
            let (loss, probs) = softmax_xent(&logits, &t.labels)?;
            let acc = correct(&argmax_rows(&probs)?, &t.labels) as f64 / t.len() as f64;
            report.metrics.push(EpochMetrics {
                epoch,
                split: Split::Test,
                loss: loss.as_f64(),
                accuracy: acc,
            });
        }
        log_epoch(&report, epoch);
    }
    Ok(report)
}

/// Registers `spec` as domain 0 and trains the whole network on it.
pub fn pretrain_base<T: Real>(
    model: &mut Model<T>,
    spec: DomainSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &OptimConfig,
    opts: &TrainOptions,
) -> Result<PhaseReport> {
    if model.num_domains() != 0 {
        return Err(Error::Registry("base domain already registered".into()));
    }
    if train.is_empty() {
        return Err(Error::Data(format!("dataset `{}` is empty", train.name)));
    }
    let d = model.add_domain(spec, DomainInit::Random)?;
    let all: BTreeSet<ParamRef> = model.domain_refs(d)?.into_iter().collect();
    train_phase(model, d, &all, train, test, cfg, opts)
}

/// Trains domain `d`'s own units as dictated by the sharing regime.
pub fn finetune_domain<T: Real>(
    model: &mut Model<T>,
    d: usize,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &OptimConfig,
    opts: &TrainOptions,
) -> Result<PhaseReport> {
    let refs = model.finetune_refs(d)?;
    train_phase(model, d, &refs, train, test, cfg, opts)
}
