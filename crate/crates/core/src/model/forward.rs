use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::gating::{mix, mix_backward, GateOp, GateParams};
use crate::layers::{
    depthwise_backward, depthwise_forward, BatchNorm, BatchNormParams, Conv2d, DepthwiseFilter,
    GlobalAvgPool, Linear, Mode, Need, PointwiseConv, PointwiseFilter, Relu, StandardFilter,
};
use crate::tensor::{Real, Tensor};

use super::config::SepLayer;
use super::params::{Group, ParamRef};
use super::Model;

/// What a forward pass is for.
#[derive(Debug, Clone, Copy)]
pub struct Pass<'a> {
    pub domain: usize,
    /// Units that will receive gradients. `None` means inference: every BN
    /// uses running statistics and nothing is recorded for backward.
    pub trainable: Option<&'a BTreeSet<ParamRef>>,
    /// Route gated layers through their gates when the model has gates
    /// attached for this domain.
    pub gates: bool,
}

impl<'a> Pass<'a> {
    pub fn eval(domain: usize) -> Self {
        Self {
            domain,
            trainable: None,
            gates: true,
        }
    }

    pub fn train(domain: usize, trainable: &'a BTreeSet<ParamRef>) -> Self {
        Self {
            domain,
            trainable: Some(trainable),
            gates: true,
        }
    }

    pub fn ungated(mut self) -> Self {
        self.gates = false;
        self
    }
}

enum DwTape<T> {
    Plain,
    Gated {
        scales: Tensor<T>,
        outputs: Vec<Tensor<T>>,
        gap: GlobalAvgPool,
        gate: GateOp<T>,
    },
}

struct SepTape<T> {
    layer: SepLayer,
    input: Tensor<T>,
    dw: DwTape<T>,
    pw: PointwiseConv<T>,
    bn: BatchNorm<T>,
}

struct BlockTape<T> {
    a: SepTape<T>,
    relu_a: Relu<T>,
    b: SepTape<T>,
    proj: Option<(usize, PointwiseConv<T>)>,
    relu_out: Relu<T>,
}

/// Everything one backward pass needs.
pub struct Tape<T> {
    domain: usize,
    trainable: BTreeSet<ParamRef>,
    stem: Conv2d<T>,
    stem_bn: BatchNorm<T>,
    stem_relu: Relu<T>,
    blocks: Vec<BlockTape<T>>,
    gap: GlobalAvgPool,
    head: Linear<T>,
    features: Tensor<T>,
    gate_scales: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Tape<T> {
    /// Pooled features fed to the classifier.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    /// Gate outputs per gated layer, `[1, T]` (batch mean) or `[N, T]`.
    pub fn gate_scales(&self) -> &[(usize, Tensor<T>)] {
        &self.gate_scales
    }
}

struct Ctx<'a> {
    d: usize,
    trainable: Option<&'a BTreeSet<ParamRef>>,
    gated: Vec<usize>,
}

fn accumulate<T: Real>(
    grads: &mut BTreeMap<ParamRef, Tensor<T>>,
    r: ParamRef,
    g: Tensor<T>,
) -> Result<()> {
    match grads.get_mut(&r) {
        Some(acc) => acc.axpy(T::one(), &g),
        None => {
            grads.insert(r, g);
            Ok(())
        }
    }
}

impl<T: Real> Model<T> {
    fn bn_params(&self, g: Group, d: usize) -> Result<BatchNormParams<T>> {
        let c = &self.config;
        let mut p = BatchNormParams::new(1);
        p.scale = self.tensor(&c.key(g, "scale", d))?.clone();
        p.shift = self.tensor(&c.key(g, "shift", d))?.clone();
        p.running_mean = self.tensor(&c.key(g, "running_mean", d))?.clone();
        p.running_var = self.tensor(&c.key(g, "running_var", d))?.clone();
        Ok(p)
    }

    fn bn_forward(
        &self,
        x: &Tensor<T>,
        g: Group,
        ctx: &Ctx<'_>,
        updates: &mut Vec<(String, Tensor<T>)>,
    ) -> Result<(Tensor<T>, BatchNorm<T>)> {
        let mut p = self.bn_params(g, ctx.d)?;
        let mode = self.bn_mode(g, ctx.d, ctx.trainable);
        let mut bn = BatchNorm::new(mode);
        let y = bn.forward(x, &mut p)?;
        if mode == Mode::Train {
            updates.push((self.config.key(g, "running_mean", ctx.d), p.running_mean));
            updates.push((self.config.key(g, "running_var", ctx.d), p.running_var));
        }
        Ok((y, bn))
    }

    fn sep_forward(
        &self,
        x: &Tensor<T>,
        layer: SepLayer,
        ctx: &Ctx<'_>,
        updates: &mut Vec<(String, Tensor<T>)>,
    ) -> Result<(Tensor<T>, SepTape<T>)> {
        let c = &self.config;
        let l = layer.index;
        let stack = self.tensor(&c.key(Group::Depthwise(l), "depthwise", ctx.d))?;
        let (h, dw) = if ctx.gated.contains(&l) {
            let t = self.num_domains();
            let outputs = (0..t)
                .map(|i| {
                    depthwise_forward(x, &DepthwiseFilter::from_stack(stack, i)?, layer.stride)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut gap = GlobalAvgPool::new();
            let m = gap.forward(x)?;
            let info = self.gating.as_ref().expect("gated layers imply gate info");
            let mut gate = GateOp::new(info.batch_mode);
            let scales = gate.forward(&m, &GateParams::from_model(self, l)?)?;
            let mixed = mix(&outputs, &scales)?;
            (
                mixed,
                DwTape::Gated {
                    scales,
                    outputs,
                    gap,
                    gate,
                },
            )
        } else {
            let f = DepthwiseFilter::from_stack(stack, c.slot_of(Group::Depthwise(l), ctx.d))?;
            (depthwise_forward(x, &f, layer.stride)?, DwTape::Plain)
        };
        let w = self.tensor(&c.key(Group::Pointwise(l), "pointwise", ctx.d))?;
        let mut pw = PointwiseConv::new(1);
        let p = pw.forward(&h, &PointwiseFilter::new(w)?)?;
        let (y, bn) = self.bn_forward(&p, Group::Bn(l), ctx, updates)?;
        Ok((
            y,
            SepTape {
                layer,
                input: x.clone(),
                dw,
                pw,
                bn,
            },
        ))
    }

    fn run(
        &self,
        x: &Tensor<T>,
        pass: Pass<'_>,
        record: bool,
    ) -> Result<(Tensor<T>, Tape<T>, Vec<(String, Tensor<T>)>)> {
        let c = &self.config;
        let d = pass.domain;
        self.domain(d)?;
        let (_, ch, hh, ww) = x.dims4()?;
        if ch != c.input_channels || hh != c.input_resolution || ww != c.input_resolution {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match configured {}x{}x{}",
                x.shape(),
                c.input_channels,
                c.input_resolution,
                c.input_resolution
            )));
        }
        let gated = match (&self.gating, pass.gates) {
            (Some(info), true) if info.target == d => {
                if info.num_domains != self.num_domains() {
                    return Err(Error::Registry(format!(
                        "gates were built for {} domains, model has {}",
                        info.num_domains,
                        self.num_domains()
                    )));
                }
                info.layers.clone()
            }
            _ => Vec::new(),
        };
        let ctx = Ctx {
            d,
            trainable: pass.trainable,
            gated,
        };
        let mut updates = Vec::new();

        let mut stem = Conv2d::new(1);
        let sw = self.tensor(&c.key(Group::Stem, "weight", d))?;
        let h = stem.forward(x, &StandardFilter::new(sw)?)?;
        let (h, stem_bn) = self.bn_forward(&h, Group::StemBn, &ctx, &mut updates)?;
        let mut stem_relu = Relu::new();
        let mut h = stem_relu.forward(&h);

        let mut blocks = Vec::new();
        let mut gate_scales = Vec::new();
        for blk in c.blocks() {
            let (ya, a) = self.sep_forward(&h, blk.first, &ctx, &mut updates)?;
            let mut relu_a = Relu::new();
            let ya = relu_a.forward(&ya);
            let (yb, b) = self.sep_forward(&ya, blk.second, &ctx, &mut updates)?;
            let (shortcut, proj) = match blk.projection {
                Some(p) => {
                    let w = self.tensor(&c.key(Group::Projection(p.index), "weight", d))?;
                    let mut op = PointwiseConv::new(p.stride);
                    (
                        op.forward(&h, &PointwiseFilter::new(w)?)?,
                        Some((p.index, op)),
                    )
                }
                None => (h.clone(), None),
            };
            let mut relu_out = Relu::new();
            h = relu_out.forward(&yb.add(&shortcut)?);
            for t in [&a, &b] {
                if let DwTape::Gated { scales, .. } = &t.dw {
                    gate_scales.push((t.layer.index, scales.clone()));
                }
            }
            if record {
                blocks.push(BlockTape {
                    a,
                    relu_a,
                    b,
                    proj,
                    relu_out,
                });
            }
        }

        let mut gap = GlobalAvgPool::new();
        let features = gap.forward(&h)?;
        let mut head = Linear::new();
        let logits = head.forward(
            &features,
            self.tensor(&c.key(Group::Classifier, "weight", d))?,
            self.tensor(&c.key(Group::Classifier, "bias", d))?,
        )?;
        let tape = Tape {
            domain: d,
            trainable: pass.trainable.cloned().unwrap_or_default(),
            stem,
            stem_bn,
            stem_relu,
            blocks,
            gap,
            head,
            features,
            gate_scales,
        };
        Ok((logits, tape, updates))
    }

    /// Inference logits `[N, L_d]`; BN uses running statistics.
    pub fn forward_domain(&self, x: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
        Ok(self.run(x, Pass::eval(d), false)?.0)
    }

    /// Like [`Model::forward_domain`] with explicit pass options. Returns
    /// the logits and a tape exposing features and gate scales.
    pub fn forward_with(&self, x: &Tensor<T>, pass: Pass<'_>) -> Result<(Tensor<T>, Tape<T>)> {
        if pass.trainable.is_some() {
            return Err(Error::InvalidArgument(
                "training passes go through forward_train".into(),
            ));
        }
        let (y, tape, _) = self.run(x, pass, false)?;
        Ok((y, tape))
    }

    /// Pooled pre-classifier features in inference mode.
    pub fn features(&self, x: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
        Ok(self.run(x, Pass::eval(d), false)?.1.features)
    }

    /// Training forward pass: records a tape and commits running-statistic
    /// updates for BN layers in train mode.
    pub fn forward_train(&mut self, x: &Tensor<T>, pass: Pass<'_>) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape, updates) = self.run(x, pass, true)?;
        for (k, v) in updates {
            *self.tensor_mut(&k)? = v;
        }
        Ok((y, tape))
    }

    fn sep_backward(
        &self,
        t: SepTape<T>,
        gy: &Tensor<T>,
        d: usize,
        want: &BTreeSet<ParamRef>,
        grads: &mut BTreeMap<ParamRef, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let c = &self.config;
        let l = t.layer.index;
        let SepTape {
            layer,
            input,
            dw,
            mut pw,
            mut bn,
        } = t;

        let scale_ref = c.param_ref(Group::Bn(l), "scale", d);
        let need_bn = want.contains(&scale_ref);
        let gb = bn.backward(
            self.tensor(&scale_ref.name)?,
            gy,
            Need {
                input: true,
                params: need_bn,
            },
        )?;
        if need_bn {
            let mut it = gb.params.into_iter();
            accumulate(grads, scale_ref, it.next().expect("scale grad"))?;
            accumulate(
                grads,
                c.param_ref(Group::Bn(l), "shift", d),
                it.next().expect("shift grad"),
            )?;
        }
        let gp = gb.input.expect("requested");

        let pw_ref = c.param_ref(Group::Pointwise(l), "pointwise", d);
        let need_pw = want.contains(&pw_ref);
        let w = self.tensor(&pw_ref.name)?;
        let g = pw.backward(
            &PointwiseFilter::new(w)?,
            &gp,
            Need {
                input: true,
                params: need_pw,
            },
        )?;
        if need_pw {
            accumulate(
                grads,
                pw_ref,
                g.params.into_iter().next().expect("pointwise grad"),
            )?;
        }
        let gh = g.input.expect("requested");

        let stack_name = c.key(Group::Depthwise(l), "depthwise", d);
        let stack = self.tensor(&stack_name)?;
        match dw {
            DwTape::Plain => {
                let slot = c.slot_of(Group::Depthwise(l), d);
                let r = ParamRef::slot(stack_name.clone(), slot);
                let need_w = want.contains(&r);
                let f = DepthwiseFilter::from_stack(stack, slot)?;
                let (gx, gw) = depthwise_backward(&input, &f, layer.stride, &gh, true, need_w)?;
                if let Some(gw) = gw {
                    accumulate(grads, r, gw)?;
                }
                Ok(gx.expect("requested"))
            }
            DwTape::Gated {
                scales,
                outputs,
                mut gap,
                mut gate,
            } => {
                let (branch_grads, gs) = mix_backward(&outputs, &scales, &gh)?;
                let mut gx = input.zeros_like();
                for (i, gi) in branch_grads.iter().enumerate() {
                    let r = ParamRef::slot(stack_name.clone(), i);
                    let need_w = want.contains(&r);
                    let f = DepthwiseFilter::from_stack(stack, i)?;
                    let (g_in, gw) =
                        depthwise_backward(&input, &f, layer.stride, gi, true, need_w)?;
                    gx.axpy(T::one(), &g_in.expect("requested"))?;
                    if let Some(gw) = gw {
                        accumulate(grads, r, gw)?;
                    }
                }
                let (gm, gate_grads) = gate.backward(&GateParams::from_model(self, l)?, &gs)?;
                for (name, g) in GateParams::<T>::names(l).into_iter().zip(gate_grads) {
                    let r = ParamRef::whole(name);
                    if want.contains(&r) {
                        accumulate(grads, r, g)?;
                    }
                }
                gx.axpy(T::one(), &gap.backward(&gm)?)?;
                Ok(gx)
            }
        }
    }

    /// Gradients of the loss for every unit in the tape's trainable set,
    /// given the loss gradient with respect to the logits.
    pub fn backward(
        &self,
        tape: Tape<T>,
        glogits: &Tensor<T>,
    ) -> Result<BTreeMap<ParamRef, Tensor<T>>> {
        let c = &self.config;
        let d = tape.domain;
        let want = tape.trainable;
        let mut grads = BTreeMap::new();
        let Tape {
            mut stem,
            mut stem_bn,
            mut stem_relu,
            blocks,
            mut gap,
            mut head,
            ..
        } = tape;

        let wr = c.param_ref(Group::Classifier, "weight", d);
        let need_head = want.contains(&wr);
        let g = head.backward(
            self.tensor(&wr.name)?,
            glogits,
            Need {
                input: true,
                params: need_head,
            },
        )?;
        if need_head {
            let mut it = g.params.into_iter();
            accumulate(&mut grads, wr, it.next().expect("weight grad"))?;
            accumulate(
                &mut grads,
                c.param_ref(Group::Classifier, "bias", d),
                it.next().expect("bias grad"),
            )?;
        }
        // stop as soon as nothing below needs a gradient
        let classifier_only = want.iter().all(|r| r.name.starts_with("classifier."));
        if classifier_only {
            return Ok(grads);
        }
        let mut gh = gap.backward(&g.input.expect("requested"))?;

        for blk in blocks.into_iter().rev() {
            let BlockTape {
                a,
                mut relu_a,
                b,
                proj,
                mut relu_out,
            } = blk;
            let gsum = relu_out.backward(&gh)?;
            let gb = self.sep_backward(b, &gsum, d, &want, &mut grads)?;
            let ga = relu_a.backward(&gb)?;
            let mut gx = self.sep_backward(a, &ga, d, &want, &mut grads)?;
            match proj {
                Some((p, mut op)) => {
                    let r = c.param_ref(Group::Projection(p), "weight", d);
                    let need = want.contains(&r);
                    let g = op.backward(
                        &PointwiseFilter::new(self.tensor(&r.name)?)?,
                        &gsum,
                        Need {
                            input: true,
                            params: need,
                        },
                    )?;
                    if need {
                        accumulate(
                            &mut grads,
                            r,
                            g.params.into_iter().next().expect("projection grad"),
                        )?;
                    }
                    gx.axpy(T::one(), &g.input.expect("requested"))?;
                }
                None => gx.axpy(T::one(), &gsum)?,
            }
            gh = gx;
        }

        let gs = stem_relu.backward(&gh)?;
        let scale_ref = c.param_ref(Group::StemBn, "scale", d);
        let need_bn = want.contains(&scale_ref);
        let g = stem_bn.backward(
            self.tensor(&scale_ref.name)?,
            &gs,
            Need {
                input: true,
                params: need_bn,
            },
        )?;
        if need_bn {
            let mut it = g.params.into_iter();
            accumulate(&mut grads, scale_ref, it.next().expect("scale grad"))?;
            accumulate(
                &mut grads,
                c.param_ref(Group::StemBn, "shift", d),
                it.next().expect("shift grad"),
            )?;
        }
        let stem_ref = c.param_ref(Group::Stem, "weight", d);
        if want.contains(&stem_ref) {
            let g = stem.backward(
                &StandardFilter::new(self.tensor(&stem_ref.name)?)?,
                &g.input.expect("requested"),
                Need::PARAMS,
            )?;
            accumulate(
                &mut grads,
                stem_ref,
                g.params.into_iter().next().expect("stem grad"),
            )?;
        }
        Ok(grads)
    }
}
