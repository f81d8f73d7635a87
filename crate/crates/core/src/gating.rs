//! Soft sharing: a small controller per gated layer mixes the outputs of all
//! domains' depthwise filters with softmax weights.
//!
//! Gate tensors live in the model store under the `gates/` prefix, so the
//! rest of the training machinery treats them like any other parameter.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{
    linear_backward, linear_forward, relu_backward, relu_forward, softmax_rows,
    softmax_rows_backward,
};
use crate::model::{train_phase, Model, ParamRef, PhaseReport, SharingMode, TrainOptions};
use crate::optim::OptimConfig;
use crate::tensor::{Real, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Early,
    Middle,
    Late,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Early, Region::Middle, Region::Late];

    pub fn name(self) -> &'static str {
        match self {
            Region::Early => "early",
            Region::Middle => "middle",
            Region::Late => "late",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown region `{s}` (early|middle|late)")))
    }

    fn macro_block(self) -> usize {
        self as usize
    }
}

/// How per-example gate outputs become mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateBatchMode {
    /// Average the softmax outputs over the batch: one weight vector per layer.
    #[default]
    BatchMean,
    /// Each example is mixed with its own weights.
    PerExample,
}

impl GateBatchMode {
    pub fn name(self) -> &'static str {
        match self {
            GateBatchMode::BatchMean => "batch_mean",
            GateBatchMode::PerExample => "per_example",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch_mean" => Ok(Self::BatchMean),
            "per_example" => Ok(Self::PerExample),
            other => Err(Error::Config(format!("unknown gate batch mode `{other}`"))),
        }
    }
}

/// A region and the separable layers it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPlacement {
    pub region: Region,
    pub layers: Vec<usize>,
}

impl RegionPlacement {
    pub fn new(config: &crate::model::ModelConfig, region: Region) -> Result<Self> {
        if config.macro_blocks.len() != 3 {
            return Err(Error::NotApplicable(format!(
                "gate regions need exactly 3 macro blocks, config has {}",
                config.macro_blocks.len()
            )));
        }
        let layers = config
            .sep_layers()
            .into_iter()
            .filter(|l| l.macro_block == region.macro_block())
            .map(|l| l.index)
            .collect();
        Ok(Self { region, layers })
    }
}

/// Gating state recorded in the model and its bundle manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateInfo {
    pub target: usize,
    pub region: Region,
    pub layers: Vec<usize>,
    pub num_domains: usize,
    pub batch_mode: GateBatchMode,
}

pub fn hidden_size(channels: usize) -> usize {
    (channels / 4).max(4)
}

/// Borrowed controller weights: `fc1: [C, H]`, `fc2: [H, T]`.
pub struct GateParams<'a, T> {
    pub fc1_weight: &'a Tensor<T>,
    pub fc1_bias: &'a Tensor<T>,
    pub fc2_weight: &'a Tensor<T>,
    pub fc2_bias: &'a Tensor<T>,
}

impl<'a, T: Real> GateParams<'a, T> {
    /// Store names in parameter-gradient order.
    pub fn names(layer: usize) -> [String; 4] {
        ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
            .map(|r| format!("gates/sep{layer:02}.{r}"))
    }

    pub fn from_model(model: &'a Model<T>, layer: usize) -> Result<Self> {
        let [a, b, c, d] = Self::names(layer);
        Ok(Self {
            fc1_weight: model.tensor(&a)?,
            fc1_bias: model.tensor(&b)?,
            fc2_weight: model.tensor(&c)?,
            fc2_bias: model.tensor(&d)?,
        })
    }
}

/// Controller forward/backward: channel means -> relu(fc1) -> fc2 -> softmax,
/// then batch reduction.
#[derive(Debug, Clone)]
pub struct GateOp<T> {
    pub mode: GateBatchMode,
    cache: Option<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> GateOp<T> {
    pub fn new(mode: GateBatchMode) -> Self {
        Self { mode, cache: None }
    }

    /// `means: [N, C]` -> scales `[1, T]` (batch mean) or `[N, T]`.
    pub fn forward(&mut self, means: &Tensor<T>, p: &GateParams<'_, T>) -> Result<Tensor<T>> {
        let a = linear_forward(means, p.fc1_weight, p.fc1_bias)?;
        let h = relu_forward(&a);
        let z = linear_forward(&h, p.fc2_weight, p.fc2_bias)?;
        let probs = softmax_rows(&z)?;
        let scales = match self.mode {
            GateBatchMode::PerExample => probs.clone(),
            GateBatchMode::BatchMean => {
                let (n, t) = probs.dims2()?;
                let inv = T::one() / T::from_usize(n);
                let mut s = vec![T::zero(); t];
                for row in probs.data().chunks_exact(t) {
                    for (acc, &v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_vec(&[1, t], s.into_iter().map(|v| v * inv).collect())?
            }
        };
        self.cache = Some((means.clone(), a, h, probs));
        Ok(scales)
    }

    /// Returns the gradient for the channel means and
    /// `[fc1.weight, fc1.bias, fc2.weight, fc2.bias]` gradients.
    pub fn backward(
        &mut self,
        p: &GateParams<'_, T>,
        gs: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (means, a, h, probs) = self.cache.take().ok_or(Error::MissingCache("gate"))?;
        let (n, t) = probs.dims2()?;
        let gp = match self.mode {
            GateBatchMode::PerExample => gs.clone(),
            GateBatchMode::BatchMean => {
                if gs.len() != t {
                    return Err(Error::ShapeMismatch("gate scale gradient length".into()));
                }
                let inv = T::one() / T::from_usize(n);
                let row: Vec<T> = gs.data().iter().map(|&g| g * inv).collect();
                Tensor::from_vec(&[n, t], row.iter().copied().cycle().take(n * t).collect())?
            }
        };
        let gz = softmax_rows_backward(&probs, &gp)?;
        let (gh, gw2, gb2) = linear_backward(&h, p.fc2_weight, &gz)?;
        let ga = relu_backward(&a, &gh)?;
        let (gm, gw1, gb1) = linear_backward(&means, p.fc1_weight, &ga)?;
        Ok((gm, vec![gw1, gb1, gw2, gb2]))
    }
}

/// `sum_i s_i * outputs[i]`, per example when `scales` has one row per example.
pub fn mix<T: Real>(outputs: &[Tensor<T>], scales: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, t) = scales.dims2()?;
    if outputs.len() != t {
        return Err(Error::Registry(format!(
            "{} gate weights for {} domain outputs",
            t,
            outputs.len()
        )));
    }
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to mix".into()))?;
    if outputs.iter().any(|o| o.shape() != first.shape()) {
        return Err(Error::ShapeMismatch(
            "domain outputs differ in shape".into(),
        ));
    }
    let (n, ..) = first.dims4()?;
    if rows != 1 && rows != n {
        return Err(Error::ShapeMismatch(format!(
            "{rows} gate rows for a batch of {n}"
        )));
    }
    let per = first.len() / n;
    let mut out = first.zeros_like();
    for (i, o) in outputs.iter().enumerate() {
        for b in 0..n {
            let s = scales.data()[if rows == 1 { 0 } else { b } * t + i];
            let dst = &mut out.data_mut()[b * per..(b + 1) * per];
            for (acc, &v) in dst.iter_mut().zip(&o.data()[b * per..(b + 1) * per]) {
                *acc += s * v;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`mix`]: per-branch gradients and the scale gradient (same
/// shape as `scales`).
pub fn mix_backward<T: Real>(
    outputs: &[Tensor<T>],
    scales: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let (rows, t) = scales.dims2()?;
    let (n, ..) = gy.dims4()?;
    let per = gy.len() / n;
    let mut gs = scales.zeros_like();
    let mut branches = Vec::with_capacity(t);
    for (i, o) in outputs.iter().enumerate() {
        let mut g = gy.clone();
        for b in 0..n {
            let r = if rows == 1 { 0 } else { b };
            let s = scales.data()[r * t + i];
            let gslice = &mut g.data_mut()[b * per..(b + 1) * per];
            let mut dot = T::zero();
            for (gv, &ov) in gslice.iter_mut().zip(&o.data()[b * per..(b + 1) * per]) {
                dot += *gv * ov;
                *gv *= s;
            }
            gs.data_mut()[r * t + i] += dot;
        }
        branches.push(g);
    }
    Ok((branches, gs))
}

/// Spec-level gate: pool the previous feature map, compute the weights and
/// mix the domain outputs. Returns the mixed tensor and the weights.
pub fn gate_forward<T: Real>(
    params: &GateParams<'_, T>,
    mode: GateBatchMode,
    feature_map: &Tensor<T>,
    outputs: &[Tensor<T>],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let m = crate::layers::global_avg_pool(feature_map)?;
    let scales = GateOp::new(mode).forward(&m, params)?;
    Ok((mix(outputs, &scales)?, scales))
}

/// Attaches fresh gates for domain `d` on every separable layer of `region`.
/// fc2 starts at zero, so the initial mixture is uniform.
pub fn attach_gates<T: Real>(
    model: &mut Model<T>,
    d: usize,
    region: Region,
    batch_mode: GateBatchMode,
    seed: u64,
) -> Result<RegionPlacement> {
    model.domain(d)?;
    let t = model.num_domains();
    if t < 2 {
        return Err(Error::NotApplicable(format!(
            "gating needs at least 2 domains, model has {t}"
        )));
    }
    if model.config().sharing != SharingMode::SharePointwise {
        return Err(Error::NotApplicable(format!(
            "gating mixes per-domain depthwise filters; sharing mode is {}",
            model.config().sharing.name()
        )));
    }
    let placement = RegionPlacement::new(model.config(), region)?;
    detach_gates(model);
    let layers = model.config().sep_layers();
    let root = Rng::new(seed);
    for &l in &placement.layers {
        let c = layers[l - 1].cin;
        let hg = hidden_size(c);
        let [w1, b1, w2, b2] = GateParams::<T>::names(l);
        let mut rng = root.derive(crate::model::name_hash(&w1));
        model.insert_tensor(w1, Tensor::he_init(&[c, hg], c, &mut rng)?);
        model.insert_tensor(b1, Tensor::zeros(&[hg]));
        model.insert_tensor(w2, Tensor::zeros(&[hg, t]));
        model.insert_tensor(b2, Tensor::zeros(&[t]));
    }
    model.gating = Some(GateInfo {
        target: d,
        region,
        layers: placement.layers.clone(),
        num_domains: t,
        batch_mode,
    });
    Ok(placement)
}

pub fn detach_gates<T: Real>(model: &mut Model<T>) {
    model.remove_tensors("gates/");
    model.gating = None;
}

/// Every gate parameter currently attached.
pub fn gate_refs<T: Real>(model: &Model<T>) -> BTreeSet<ParamRef> {
    model
        .tensors()
        .filter(|(k, _)| k.starts_with("gates/"))
        .map(|(k, _)| ParamRef::whole(k))
        .collect()
}

/// Trains only the gate controllers of the attached region; every filter,
/// BN and classifier tensor stays frozen.
pub fn train_gates<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &OptimConfig,
    opts: &TrainOptions,
) -> Result<PhaseReport> {
    let info = model
        .gating()
        .cloned()
        .ok_or_else(|| Error::NotApplicable("no gates attached".into()))?;
    let refs = gate_refs(model);
    train_phase(model, info.target, &refs, train, test, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DomainInit, DomainSpec, ModelConfig};

    fn params(c: usize, t: usize, rng: &mut Rng, zero_fc2: bool) -> [Tensor<f64>; 4] {
        let h = hidden_size(c);
        let w2 = if zero_fc2 {
            Tensor::zeros(&[h, t])
        } else {
            Tensor::he_init(&[h, t], h, rng).unwrap()
        };
        [
            Tensor::he_init(&[c, h], c, rng).unwrap(),
            Tensor::he_init(&[h], 1, rng).unwrap(),
            w2,
            Tensor::he_init(&[t], 1, rng)
                .unwrap()
                .map(|v| if zero_fc2 { 0.0 } else { v }),
        ]
    }

    fn view(p: &[Tensor<f64>; 4]) -> GateParams<'_, f64> {
        GateParams {
            fc1_weight: &p[0],
            fc1_bias: &p[1],
            fc2_weight: &p[2],
            fc2_bias: &p[3],
        }
    }

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_fc2_gives_uniform_mean() {
        let mut rng = Rng::new(3);
        let p = params(8, 3, &mut rng, true);
        let x = randn(&[2, 8, 4, 4], &mut rng);
        let outs: Vec<_> = (0..3).map(|_| randn(&[2, 5, 4, 4], &mut rng)).collect();
        let (y, s) = gate_forward(&view(&p), GateBatchMode::BatchMean, &x, &outs).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        for i in 0..y.len() {
            let mean = outs.iter().map(|o| o.data()[i]).sum::<f64>() / 3.0;
            assert!((y.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_domain_is_identity() {
        let mut rng = Rng::new(4);
        let p = params(8, 1, &mut rng, false);
        let x = randn(&[3, 8, 2, 2], &mut rng);
        let o = randn(&[3, 4, 2, 2], &mut rng);
        let (y, s) = gate_forward(&view(&p), GateBatchMode::PerExample, &x, std::slice::from_ref(&o)).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
        assert_eq!(y, o);
    }

    #[test]
    fn domain_count_mismatch_is_registry_error() {
        let s = Tensor::<f64>::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        let o = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            mix(&[o.clone(), o.clone(), o], &s),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn placement_follows_macro_blocks() {
        let c = ModelConfig::desk();
        assert_eq!(
            RegionPlacement::new(&c, Region::Early).unwrap().layers,
            vec![1, 2, 3, 4]
        );
        assert_eq!(
            RegionPlacement::new(&c, Region::Late).unwrap().layers,
            vec![9, 10, 11, 12]
        );
        let all: Vec<usize> = Region::ALL
            .iter()
            .flat_map(|&r| RegionPlacement::new(&c, r).unwrap().layers)
            .collect();
        assert_eq!(all, (1..=12).collect::<Vec<_>>());
    }

    #[test]
    fn attach_requires_two_domains() {
        let mut m = Model::<f64>::build_base(ModelConfig::desk(), 1).unwrap();
        m.add_domain(DomainSpec::new("a", 3), DomainInit::Random)
            .unwrap();
        assert!(matches!(
            attach_gates(&mut m, 0, Region::Late, GateBatchMode::BatchMean, 0),
            Err(Error::NotApplicable(_))
        ));
        m.add_domain(DomainSpec::new("b", 3), DomainInit::FromBase)
            .unwrap();
        attach_gates(&mut m, 1, Region::Late, GateBatchMode::BatchMean, 0).unwrap();
        assert_eq!(gate_refs(&m).len(), 16);
        assert_eq!(
            m.tensor("gates/sep09.fc1.weight").unwrap().shape(),
            &[32, 8]
        );
    }

    #[test]
    fn mix_backward_matches_definition() {
        let mut rng = Rng::new(5);
        let outs: Vec<_> = (0..2).map(|_| randn(&[2, 3, 2, 2], &mut rng)).collect();
        let s = Tensor::from_vec(&[2, 2], vec![0.3, 0.7, 0.9, 0.1]).unwrap();
        let gy = randn(&[2, 3, 2, 2], &mut rng);
        let (branches, gs) = mix_backward(&outs, &s, &gy).unwrap();
        for b in 0..2 {
            for i in 0..2 {
                let dot: f64 = (0..12)
                    .map(|e| gy.data()[b * 12 + e] * outs[i].data()[b * 12 + e])
                    .sum();
                assert!((gs.data()[b * 2 + i] - dot).abs() < 1e-12);
                for e in 0..12 {
                    let expect = s.data()[b * 2 + i] * gy.data()[b * 12 + e];
                    assert!((branches[i].data()[b * 12 + e] - expect).abs() < 1e-15);
                }
            }
        }
    }
}
