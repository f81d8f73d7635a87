//! Parameter groups, their sharing status per regime, and deterministic
//! tensor names.
//!
//! Every tensor lives in a flat name -> tensor store. Names encode layer
//! index, role and (for per-domain tensors) the domain slot, e.g.
//! `sep03.d1.pointwise` or `sep03.bn.d1.scale`. Depthwise filters are the
//! exception: each separable layer keeps a single `[k, k, C, T]` stack named
//! `sepNN.depthwise` whose trailing axis indexes domain slots.

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SharingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Share {
    Shared,
    PerDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Stem,
    StemBn,
    Depthwise(usize),
    Pointwise(usize),
    Bn(usize),
    Projection(usize),
    Classifier,
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    He(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub role: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics are state, not trainable parameters.
    pub buffer: bool,
}

/// Address of a trainable unit: a whole tensor, or one slot of a stacked
/// depthwise tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamRef {
    pub name: String,
    pub slot: Option<usize>,
}

impl ParamRef {
    pub fn whole(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            slot: None,
        }
    }

    pub fn slot(name: impl Into<String>, slot: usize) -> Self {
        Self {
            name: name.into(),
            slot: Some(slot),
        }
    }
}

impl std::fmt::Display for ParamRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.slot {
            Some(s) => write!(f, "{}[{s}]", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl Group {
    pub fn base(self) -> String {
        match self {
            Group::Stem => "stem".into(),
            Group::StemBn => "stem.bn".into(),
            Group::Depthwise(l) | Group::Pointwise(l) => format!("sep{l:02}"),
            Group::Bn(l) => format!("sep{l:02}.bn"),
            Group::Projection(p) => format!("proj{p}"),
            Group::Classifier => "classifier".into(),
        }
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(self, Group::StemBn | Group::Bn(_))
    }
}

impl ModelConfig {
    /// Every parameter group of the network, in execution order.
    pub fn groups(&self) -> Vec<Group> {
        let mut out = vec![Group::Stem, Group::StemBn];
        for b in self.blocks() {
            for l in [b.first.index, b.second.index] {
                out.extend([Group::Depthwise(l), Group::Pointwise(l), Group::Bn(l)]);
            }
            if let Some(p) = b.projection {
                out.push(Group::Projection(p.index));
            }
        }
        out.push(Group::Classifier);
        out
    }

    fn is_last_layer(&self, l: usize) -> bool {
        self.last_layer_domain_specific && l == self.num_separable_layers()
    }

    /// Sharing status of a group under this config's regime.
    pub fn share_of(&self, g: Group) -> Share {
        use Share::*;
        match (self.sharing, g) {
            (_, Group::Classifier) => PerDomain,
            (SharingMode::Individual, _) => PerDomain,
            (SharingMode::ClassifierOnly, _) => Shared,
            (SharingMode::SharePointwise, Group::Stem | Group::Projection(_)) => Shared,
            (SharingMode::SharePointwise, Group::Pointwise(l)) if !self.is_last_layer(l) => Shared,
            (SharingMode::SharePointwise, _) => PerDomain,
            (SharingMode::ShareDepthwise, Group::Stem) => Shared,
            (SharingMode::ShareDepthwise, Group::Depthwise(l)) if !self.is_last_layer(l) => Shared,
            (SharingMode::ShareDepthwise, _) => PerDomain,
        }
    }

    /// Tensors making up one copy of a group.
    pub fn tensor_specs(&self, g: Group, num_classes: usize) -> Vec<TensorSpec> {
        let k = self.kernel;
        let layer = |l: usize| self.sep_layers()[l - 1];
        let p = |role, shape: Vec<usize>, init| TensorSpec {
            role,
            shape,
            init,
            buffer: false,
        };
        let bn = |c: usize| {
            vec![
                p("scale", vec![c], Init::Ones),
                p("shift", vec![c], Init::Zeros),
                TensorSpec {
                    role: "running_mean",
                    shape: vec![c],
                    init: Init::Zeros,
                    buffer: true,
                },
                TensorSpec {
                    role: "running_var",
                    shape: vec![c],
                    init: Init::Ones,
                    buffer: true,
                },
            ]
        };
        match g {
            Group::Stem => vec![p(
                "weight",
                vec![k, k, self.input_channels, self.stem_width],
                Init::He(k * k * self.input_channels),
            )],
            Group::StemBn => bn(self.stem_width),
            Group::Depthwise(l) => vec![p("depthwise", vec![k, k, layer(l).cin], Init::He(k * k))],
            Group::Pointwise(l) => {
                let s = layer(l);
                vec![p("pointwise", vec![s.cin, s.cout], Init::He(s.cin))]
            }
            Group::Bn(l) => bn(layer(l).cout),
            Group::Projection(i) => {
                let pr = self.projections()[i];
                vec![p("weight", vec![pr.cin, pr.cout], Init::He(pr.cin))]
            }
            Group::Classifier => {
                let c = self.last_width();
                vec![
                    p("weight", vec![c, num_classes], Init::He(c)),
                    p("bias", vec![num_classes], Init::Zeros),
                ]
            }
        }
    }

    /// Store key of `role` in group `g` for domain slot `d`. Depthwise
    /// stacks ignore `d`; address their slots through [`ModelConfig::slot_of`].
    pub fn key(&self, g: Group, role: &str, d: usize) -> String {
        match (g, self.share_of(g)) {
            (Group::Depthwise(_), _) | (_, Share::Shared) => format!("{}.{role}", g.base()),
            (_, Share::PerDomain) => format!("{}.d{d}.{role}", g.base()),
        }
    }

    /// Slot of domain `d` inside a depthwise stack.
    pub fn slot_of(&self, g: Group, d: usize) -> usize {
        match self.share_of(g) {
            Share::Shared => 0,
            Share::PerDomain => d,
        }
    }

    /// Trainable unit for `role` of group `g` as seen by domain `d`.
    pub fn param_ref(&self, g: Group, role: &str, d: usize) -> ParamRef {
        match g {
            Group::Depthwise(_) => ParamRef::slot(self.key(g, role, d), self.slot_of(g, d)),
            _ => ParamRef::whole(self.key(g, role, d)),
        }
    }
}
