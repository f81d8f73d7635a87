#![allow(dead_code)]

use dwsep_core::data::{generate_synth, DomainData, SynthKind, SynthSpec};
use dwsep_core::layers::{
    conv2d_forward, depthwise_forward, global_avg_pool, linear_forward, pointwise_forward,
    relu_forward, BatchNorm, BatchNormParams, DepthwiseFilter, Mode, PointwiseFilter,
    StandardFilter,
};
use dwsep_core::model::{Group, MacroBlock, Model, ModelConfig, ParamRef, SharingMode};
use dwsep_core::{Real, Rng, Tensor};

/// Three macro blocks with one residual block each on 8x8 inputs.
pub fn tiny(sharing: SharingMode) -> ModelConfig {
    ModelConfig {
        macro_blocks: vec![
            MacroBlock {
                width: 4,
                blocks: 1,
            },
            MacroBlock {
                width: 6,
                blocks: 1,
            },
            MacroBlock {
                width: 8,
                blocks: 1,
            },
        ],
        input_channels: 3,
        input_resolution: 8,
        stem_width: 4,
        kernel: 3,
        sharing,
        last_layer_domain_specific: false,
    }
}

pub fn randn<T: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::<f64>::from_vec(shape, (0..n).map(|_| rng.normal()).collect())
        .unwrap()
        .cast()
}

/// Replaces every tensor with random values (variances stay positive) so
/// that BN and biases are not identities.
pub fn scramble<T: Real>(model: &mut Model<T>, seed: u64) {
    let mut rng = Rng::new(seed);
    let names: Vec<(String, Vec<usize>)> = model
        .tensors()
        .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = if name.ends_with(".running_var") {
            (0..n).map(|_| 0.5 + rng.uniform()).collect()
        } else if name.ends_with(".scale") {
            (0..n).map(|_| 0.5 + rng.uniform()).collect()
        } else {
            (0..n).map(|_| 0.5 * rng.normal()).collect()
        };
        let t = Tensor::<f64>::from_vec(&shape, vals).unwrap().cast();
        model.set_param(&ParamRef::whole(name), &t).unwrap();
    }
}

fn bn_eval<T: Real>(model: &Model<T>, x: &Tensor<T>, g: Group, d: usize) -> Tensor<T> {
    let c = model.config();
    let mut p = BatchNormParams::new(1);
    p.scale = model.tensor(&c.key(g, "scale", d)).unwrap().clone();
    p.shift = model.tensor(&c.key(g, "shift", d)).unwrap().clone();
    p.running_mean = model.tensor(&c.key(g, "running_mean", d)).unwrap().clone();
    p.running_var = model.tensor(&c.key(g, "running_var", d)).unwrap().clone();
    BatchNorm::new(Mode::Eval).forward(x, &mut p).unwrap()
}

/// Inference forward for domain `d` written against the layer kernels,
/// using an owned, unstacked copy of each depthwise filter.
pub fn reference_forward<T: Real>(model: &Model<T>, x: &Tensor<T>, d: usize) -> Tensor<T> {
    let c = model.config();
    let t = |g: Group, role: &str| model.tensor(&c.key(g, role, d)).unwrap();
    let sep = |x: &Tensor<T>, l: dwsep_core::model::SepLayer| {
        let g = Group::Depthwise(l.index);
        let own = t(g, "depthwise").slice_last(c.slot_of(g, d)).unwrap();
        let h = depthwise_forward(x, &DepthwiseFilter::new(&own).unwrap(), l.stride).unwrap();
        let p = pointwise_forward(
            &h,
            &PointwiseFilter::new(t(Group::Pointwise(l.index), "pointwise")).unwrap(),
        )
        .unwrap();
        bn_eval(model, &p, Group::Bn(l.index), d)
    };
    let h = conv2d_forward(
        x,
        &StandardFilter::new(t(Group::Stem, "weight")).unwrap(),
        1,
    )
    .unwrap();
    let mut h = relu_forward(&bn_eval(model, &h, Group::StemBn, d));
    for blk in c.blocks() {
        let a = relu_forward(&sep(&h, blk.first));
        let b = sep(&a, blk.second);
        let short = match blk.projection {
            Some(p) => {
                let w = t(Group::Projection(p.index), "weight");
                let s = dwsep_core::layers::subsample(&h, p.stride).unwrap();
                pointwise_forward(&s, &PointwiseFilter::new(w).unwrap()).unwrap()
            }
            None => h.clone(),
        };
        h = relu_forward(&b.add(&short).unwrap());
    }
    let f = global_avg_pool(&h).unwrap();
    linear_forward(
        &f,
        t(Group::Classifier, "weight"),
        t(Group::Classifier, "bias"),
    )
    .unwrap()
}

pub fn tiny_data(name: &str, kind: SynthKind, seed: u64) -> DomainData {
    let spec = SynthSpec {
        train: 48,
        test: 16,
        size: 8,
        ..SynthSpec::new(kind, 4, seed)
    };
    generate_synth(name, &spec).unwrap()
}
