//! Test error, the decathlon-style score and the static parameter
//! accountant.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{sequential, Dataset};
use crate::error::{Error, Result};
use crate::layers::softmax_xent;
use crate::model::{Group, Model, ModelConfig, Share, SharingMode};
use crate::tensor::{Real, Tensor};

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, l) = t.dims2()?;
    Ok(t.data()
        .chunks_exact(l)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Fraction of mismatches between predictions and labels.
pub fn error_rate(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("cannot score an empty set".into()));
    }
    let wrong = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Inference predictions for a whole dataset.
pub fn predict<T: Real>(
    model: &Model<T>,
    d: usize,
    ds: &Dataset,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in sequential(ds.len(), batch) {
        let (x, _) = ds.gather(&idx)?;
        out.extend(argmax_rows(&model.forward_domain(&x.cast(), d)?)?);
    }
    Ok(out)
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    d: usize,
    ds: &Dataset,
    batch: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data(format!("dataset `{}` is empty", ds.name)));
    }
    let (mut loss, mut hits) = (0.0, 0);
    for idx in sequential(ds.len(), batch) {
        let (x, y) = ds.gather(&idx)?;
        let logits = model.forward_domain(&x.cast(), d)?;
        let (l, _) = softmax_xent(&logits, &y)?;
        loss += l.as_f64() * idx.len() as f64;
        hits += argmax_rows(&logits)?
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    let n = ds.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Test error `E` of domain `d`.
pub fn test_error<T: Real>(model: &Model<T>, d: usize, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data(format!("dataset `{}` is empty", ds.name)));
    }
    error_rate(&predict(model, d, ds, 250)?, &ds.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub domain: String,
    pub e_max: f64,
    pub gamma: f64,
}

impl ScoreEntry {
    pub fn new(domain: impl Into<String>, e_max: f64) -> Self {
        Self {
            domain: domain.into(),
            e_max,
            gamma: 2.0,
        }
    }

    /// `1000 * e_max^-gamma`: a perfect classifier earns 1000.
    pub fn alpha(&self) -> f64 {
        1000.0 * self.e_max.powf(-self.gamma)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSpec {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.e_max > 0.0 && e.e_max <= 1.0) {
                return Err(Error::Config(format!(
                    "e_max for `{}` must be in (0, 1], got {}",
                    e.domain, e.e_max
                )));
            }
            if !(e.gamma > 0.0 && e.gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "gamma for `{}` must be positive",
                    e.domain
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub domain: String,
    pub error: f64,
    pub e_max: f64,
    pub alpha: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub total: f64,
}

/// `S = sum_i alpha_i * max(0, E_max_i - E_i)^gamma_i`.
///
/// Evaluated as `1000 * (max(0, E_max - E) / E_max)^gamma`, which equals
/// the definition with the derived alpha and keeps the perfect-score case
/// exact.
pub fn decathlon_score(errors: &[f64], spec: &ScoreSpec) -> Result<ScoreReport> {
    spec.validate()?;
    if errors.len() != spec.entries.len() {
        return Err(Error::Config(format!(
            "{} errors for {} score entries",
            errors.len(),
            spec.entries.len()
        )));
    }
    let mut rows = Vec::with_capacity(errors.len());
    for (&e, s) in errors.iter().zip(&spec.entries) {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::Config(format!(
                "error for `{}` must be in [0, 1], got {e}",
                s.domain
            )));
        }
        let margin = (s.e_max - e).max(0.0) / s.e_max;
        rows.push(ScoreRow {
            domain: s.domain.clone(),
            error: e,
            e_max: s.e_max,
            alpha: s.alpha(),
            contribution: 1000.0 * margin.powf(s.gamma),
        });
    }
    let total = rows.iter().map(|r| r.contribution).sum();
    Ok(ScoreReport { rows, total })
}

/// `E_max = min(1, 2 * baseline error)` per domain, gamma 2.
pub fn emax_from_baseline(domains: &[String], baseline_errors: &[f64]) -> Result<ScoreSpec> {
    if domains.len() != baseline_errors.len() {
        return Err(Error::Config(
            "baseline errors and domains differ in length".into(),
        ));
    }
    let entries = domains
        .iter()
        .zip(baseline_errors)
        .map(|(d, &e)| {
            if e == 0.0 {
                Err(Error::Config(format!(
                    "baseline error for `{d}` is zero: degenerate score spec"
                )))
            } else if !(e > 0.0 && e <= 1.0) {
                Err(Error::Config(format!(
                    "baseline error for `{d}` must be in (0, 1], got {e}"
                )))
            } else {
                Ok(ScoreEntry::new(d.clone(), (2.0 * e).min(1.0)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSpec { entries })
}

pub fn score_csv(r: &ScoreReport) -> String {
    let mut s = String::from("domain,error,e_max,alpha,contribution\n");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            row.domain, row.error, row.e_max, row.alpha, row.contribution
        );
    }
    s
}

pub fn score_text(r: &ScoreReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>8} {:>8} {:>12} {:>12}",
        "domain", "error", "e_max", "alpha", "contribution"
    );
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<16} {:>8.4} {:>8.4} {:>12.2} {:>12.2}",
            row.domain, row.error, row.e_max, row.alpha, row.contribution
        );
    }
    let _ = writeln!(s, "score {}", r.total);
    s
}

pub fn standard_conv_params(k: usize, c1: usize, c2: usize) -> usize {
    k * k * c1 * c2
}

pub fn depthwise_params(k: usize, c1: usize) -> usize {
    k * k * c1
}

pub fn pointwise_params(c1: usize, c2: usize) -> usize {
    c1 * c2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub kind: &'static str,
    pub shape: Vec<usize>,
    pub count: usize,
    /// Owning domain; `None` for shared tensors.
    pub domain: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub sharing: SharingMode,
    pub num_domains: usize,
    pub rows: Vec<ParamRow>,
    pub total: usize,
    pub shared_total: usize,
    pub per_domain: Vec<usize>,
    /// Pointwise plus projection weights over all parameters of the model.
    pub pointwise_fraction: f64,
    /// Pointwise plus projection weights over convolution weights only.
    pub pointwise_fraction_conv: f64,
    /// Depthwise + pointwise weights of the separable layers (one copy).
    pub separable_conv_total: usize,
    /// Standard 3x3 convolutions of the same widths.
    pub standard_conv_total: usize,
}

fn kind_of(g: Group) -> &'static str {
    match g {
        Group::Stem => "standard",
        Group::StemBn | Group::Bn(_) => "batchnorm",
        Group::Depthwise(_) => "depthwise",
        Group::Pointwise(_) => "pointwise",
        Group::Projection(_) => "projection",
        Group::Classifier => "linear",
    }
}

/// Exact trainable-parameter tally of the tensors a model with one domain
/// per entry of `classes` would allocate (running statistics excluded).
pub fn count_params(config: &ModelConfig, classes: &[usize]) -> Result<ParamReport> {
    config.validate()?;
    let t = classes.len();
    let mut rows = Vec::new();
    for g in config.groups() {
        let share = config.share_of(g);
        let copies: Vec<usize> = match share {
            Share::Shared => vec![0],
            Share::PerDomain => (0..t).collect(),
        };
        for d in copies {
            let nc = if g == Group::Classifier {
                classes[d]
            } else {
                2
            };
            for ts in config
                .tensor_specs(g, nc)
                .into_iter()
                .filter(|ts| !ts.buffer)
            {
                let name = match g {
                    Group::Depthwise(_) => format!("{}[{d}]", config.key(g, ts.role, d)),
                    _ => config.key(g, ts.role, d),
                };
                rows.push(ParamRow {
                    name,
                    kind: kind_of(g),
                    count: ts.shape.iter().product(),
                    shape: ts.shape,
                    domain: (share == Share::PerDomain).then_some(d),
                });
            }
        }
    }
    let total = rows.iter().map(|r| r.count).sum();
    let shared_total = rows
        .iter()
        .filter(|r| r.domain.is_none())
        .map(|r| r.count)
        .sum();
    let per_domain = (0..t)
        .map(|d| {
            rows.iter()
                .filter(|r| r.domain == Some(d))
                .map(|r| r.count)
                .sum()
        })
        .collect();
    let sum_kind = |kinds: &[&str]| -> usize {
        rows.iter()
            .filter(|r| kinds.contains(&r.kind))
            .map(|r| r.count)
            .sum()
    };
    let pw = sum_kind(&["pointwise", "projection"]);
    let conv = sum_kind(&["pointwise", "projection", "depthwise", "standard"]);
    let k = config.kernel;
    let (sep, std) = config.sep_layers().iter().fold((0, 0), |(a, b), l| {
        (
            a + depthwise_params(k, l.cin) + pointwise_params(l.cin, l.cout),
            b + standard_conv_params(k, l.cin, l.cout),
        )
    });
    Ok(ParamReport {
        sharing: config.sharing,
        num_domains: t,
        rows,
        total,
        shared_total,
        per_domain,
        pointwise_fraction: pw as f64 / total.max(1) as f64,
        pointwise_fraction_conv: pw as f64 / conv.max(1) as f64,
        separable_conv_total: sep,
        standard_conv_total: std,
    })
}

/// Parameters added by registering one more domain with `new_classes`.
pub fn marginal_overhead(
    config: &ModelConfig,
    classes: &[usize],
    new_classes: usize,
) -> Result<usize> {
    let before = count_params(config, classes)?.total;
    let mut more = classes.to_vec();
    more.push(new_classes);
    Ok(count_params(config, &more)?.total - before)
}

/// Multiply-accumulates of one inference pass per example, split by kind.
/// Gated layers run every domain's depthwise filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct OpCount {
    pub standard: usize,
    pub depthwise: usize,
    pub pointwise: usize,
    pub linear: usize,
}

pub fn forward_macs(
    config: &ModelConfig,
    gated_layers: &[usize],
    num_domains: usize,
    classes: usize,
) -> OpCount {
    let k = config.kernel;
    let r = config.input_resolution;
    let mut ops = OpCount {
        standard: standard_conv_params(k, config.input_channels, config.stem_width) * r * r,
        ..OpCount::default()
    };
    let mut res = r;
    for b in config.blocks() {
        for l in [b.first, b.second] {
            let out = res.div_ceil(l.stride);
            let branches = if gated_layers.contains(&l.index) {
                num_domains
            } else {
                1
            };
            ops.depthwise += branches * depthwise_params(k, l.cin) * out * out;
            ops.pointwise += pointwise_params(l.cin, l.cout) * out * out;
            res = out;
        }
        if let Some(p) = b.projection {
            ops.pointwise += pointwise_params(p.cin, p.cout) * res * res;
        }
    }
    ops.linear = config.last_width() * classes;
    ops
}

pub fn param_report_text(r: &ParamReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "sharing {} with {} domain(s)",
        r.sharing.name(),
        r.num_domains
    );
    let _ = writeln!(
        s,
        "{:<28} {:<11} {:<18} {:>10} {}",
        "tensor", "kind", "shape", "count", "shared"
    );
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<28} {:<11} {:<18} {:>10} {}",
            row.name,
            row.kind,
            format!("{:?}", row.shape),
            row.count,
            if row.domain.is_none() { "yes" } else { "no" }
        );
    }
    let _ = writeln!(s, "total parameters       {}", r.total);
    let _ = writeln!(s, "shared parameters      {}", r.shared_total);
    for (d, c) in r.per_domain.iter().enumerate() {
        let _ = writeln!(s, "domain {d} parameters    {c}");
    }
    let _ = writeln!(
        s,
        "pointwise fraction     {:.4} (of all), {:.4} (of conv)",
        r.pointwise_fraction, r.pointwise_fraction_conv
    );
    let _ = writeln!(
        s,
        "separable conv total   {} vs standard {} (ratio {:.4})",
        r.separable_conv_total,
        r.standard_conv_total,
        r.separable_conv_total as f64 / r.standard_conv_total as f64
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn error_cases() {
        assert_eq!(error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(error_rate(&[1, 2, 3], &[2, 3, 1]).unwrap(), 1.0);
        assert!(error_rate(&[], &[]).is_err());
    }

    #[test]
    fn score_cases() {
        let spec = ScoreSpec {
            entries: (0..10)
                .map(|i| ScoreEntry::new(format!("d{i}"), 0.1 + 0.07 * i as f64))
                .collect(),
        };
        assert_eq!(decathlon_score(&[0.0; 10], &spec).unwrap().total, 10000.0);
        let at_max: Vec<f64> = spec.entries.iter().map(|e| e.e_max).collect();
        assert_eq!(decathlon_score(&at_max, &spec).unwrap().total, 0.0);
        let one = ScoreSpec {
            entries: vec![ScoreEntry::new("x", 0.6)],
        };
        assert_eq!(decathlon_score(&[0.3], &one).unwrap().total, 250.0);
        assert!(decathlon_score(&[0.3, 0.1], &one).is_err());
        assert_eq!(decathlon_score(&[0.9], &one).unwrap().total, 0.0);
    }

    #[test]
    fn baseline_spec() {
        let s = emax_from_baseline(&["a".into(), "b".into()], &[0.4, 0.6]).unwrap();
        assert_eq!(s.entries[0].e_max, 0.8);
        assert!((s.entries[0].alpha() - 1562.5).abs() < 1e-9);
        assert_eq!(s.entries[1].e_max, 1.0);
        assert!(emax_from_baseline(&["a".into()], &[0.0]).is_err());
        let r = decathlon_score(&[0.0, 0.0], &s).unwrap();
        assert!(r.rows.iter().all(|r| r.contribution == 1000.0));
    }

    #[test]
    fn table_one_cases() {
        assert_eq!(standard_conv_params(3, 64, 64), 36864);
        assert_eq!(depthwise_params(3, 64), 576);
        assert_eq!(pointwise_params(64, 64), 4096);
    }

    #[test]
    fn mode_ordering() {
        let classes = [10, 10, 10];
        let total = |m| {
            count_params(&ModelConfig::desk().with_sharing(m), &classes)
                .unwrap()
                .total
        };
        assert!(total(SharingMode::ClassifierOnly) < total(SharingMode::SharePointwise));
        assert!(total(SharingMode::SharePointwise) < total(SharingMode::ShareDepthwise));
        assert!(total(SharingMode::ShareDepthwise) < total(SharingMode::Individual));
    }

    #[test]
    fn gated_layers_multiply_depthwise_work() {
        let c = ModelConfig::desk();
        let plain = forward_macs(&c, &[], 3, 10);
        let gated = forward_macs(&c, &[9, 10, 11, 12], 3, 10);
        assert_eq!(plain.pointwise, gated.pointwise);
        assert_eq!(plain.standard, gated.standard);
        let late_plain: usize = c
            .sep_layers()
            .iter()
            .filter(|l| l.index >= 9)
            .map(|l| depthwise_params(3, l.cin) * 8 * 8)
            .sum();
        assert_eq!(gated.depthwise - plain.depthwise, 2 * late_plain);
    }
}
