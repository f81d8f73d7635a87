//! Multi-domain separable ResNet.
//!
//! A [`Model`] owns a flat parameter store keyed by deterministic names (see
//! [`params`]), a domain registry and, optionally, a gated region. Which
//! tensors are shared and which are per-domain is decided entirely by the
//! config's [`SharingMode`]; the forward pass reads domain `d`'s view of the
//! store and never copies filters.

mod bundle;
mod config;
mod forward;
mod params;
mod train;

pub use bundle::{load, save, BUNDLE_FORMAT_VERSION};
pub use config::{MacroBlock, ModelConfig, Projection, ResBlock, SepLayer, SharingMode};
pub use forward::{Pass, Tape};
pub use params::{Group, Init, ParamRef, Share, TensorSpec};
pub use train::{
    finetune_domain, pretrain_base, train_phase, EpochMetrics, PhaseReport, TrainOptions,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateInfo;
use crate::layers::Mode;
use crate::tensor::{Real, Rng, Tensor};

/// A registered domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub num_classes: usize,
    /// Overrides the phase's weight decay when set.
    #[serde(default)]
    pub weight_decay: Option<f64>,
    /// Free-form description of where the data came from (manifest path or
    /// synthetic spec); recorded in bundles.
    #[serde(default)]
    pub source: Option<String>,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            num_classes,
            weight_decay: None,
            source: None,
        }
    }
}

/// How a new domain's per-domain tensors start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainInit {
    /// Copy domain 0's tensors; the classifier is always fresh.
    FromBase,
    Random,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    seed: u64,
    domains: Vec<DomainSpec>,
    store: BTreeMap<String, Tensor<T>>,
    pub(crate) gating: Option<GateInfo>,
}

/// Stable 64-bit FNV-1a, used to derive per-tensor init streams from names.
pub(crate) fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn fresh<T: Real>(spec: &TensorSpec, rng: &mut Rng) -> Result<Tensor<T>> {
    match spec.init {
        Init::He(fan_in) => Tensor::he_init(&spec.shape, fan_in, rng),
        Init::Zeros => Tensor::alloc(&spec.shape, T::zero()),
        Init::Ones => Tensor::alloc(&spec.shape, T::one()),
    }
}

impl<T: Real> Model<T> {
    /// Allocates every shared tensor; no domain is registered yet.
    pub fn build_base(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config,
            seed,
            domains: Vec::new(),
            store: BTreeMap::new(),
            gating: None,
        };
        for g in m.config.groups() {
            if m.config.share_of(g) == Share::Shared {
                for spec in m.config.tensor_specs(g, 0) {
                    let key = m.config.key(g, spec.role, 0);
                    let t = m.init_tensor(&key, &spec)?;
                    let t = match g {
                        Group::Depthwise(_) => Tensor::stack_last(&[t])?,
                        _ => t,
                    };
                    m.store.insert(key, t);
                }
            }
        }
        Ok(m)
    }

    fn init_tensor(&self, stream: &str, spec: &TensorSpec) -> Result<Tensor<T>> {
        let mut rng = Rng::new(self.seed).derive(name_hash(stream));
        fresh(spec, &mut rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn domains(&self) -> &[DomainSpec] {
        &self.domains
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, d: usize) -> Result<&DomainSpec> {
        self.domains.get(d).ok_or_else(|| {
            Error::Registry(format!(
                "unknown domain {d} ({} registered)",
                self.domains.len()
            ))
        })
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Registry(format!("unknown domain `{name}`")))
    }

    /// Registers a domain and allocates its per-domain tensors. Returns the
    /// new domain's index.
    pub fn add_domain(&mut self, spec: DomainSpec, init: DomainInit) -> Result<usize> {
        if self.domains.iter().any(|s| s.name == spec.name) {
            return Err(Error::Registry(format!(
                "domain `{}` already registered",
                spec.name
            )));
        }
        if spec.num_classes < 2 {
            return Err(Error::Config(format!(
                "domain `{}` needs at least 2 classes, got {}",
                spec.name, spec.num_classes
            )));
        }
        if init == DomainInit::FromBase && self.domains.is_empty() {
            return Err(Error::Registry(
                "init=from_base needs a registered base domain".into(),
            ));
        }
        if self.gating.is_some() {
            return Err(Error::Registry(
                "cannot add domains while gates are attached".into(),
            ));
        }
        let d = self.domains.len();
        let mut new = Vec::new();
        for g in self.config.groups() {
            if self.config.share_of(g) != Share::PerDomain {
                continue;
            }
            for ts in self.config.tensor_specs(g, spec.num_classes) {
                let key = self.config.key(g, ts.role, d);
                let copy = init == DomainInit::FromBase && g != Group::Classifier;
                let t = match (g, copy) {
                    (Group::Depthwise(_), true) => self.store[&key].slice_last(0)?,
                    (Group::Depthwise(_), false) => self.init_tensor(&format!("{key}#{d}"), &ts)?,
                    (_, true) => self.store[&self.config.key(g, ts.role, 0)].clone(),
                    (_, false) => self.init_tensor(&key, &ts)?,
                };
                new.push((g, key, t));
            }
        }
        for (g, key, t) in new {
            match g {
                Group::Depthwise(_) => {
                    let stack = match self.store.get(&key) {
                        Some(s) => s.push_last(&t)?,
                        None => Tensor::stack_last(&[t])?,
                    };
                    self.store.insert(key, stack);
                }
                _ => {
                    self.store.insert(key, t);
                }
            }
        }
        self.domains.push(spec);
        Ok(d)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.store
            .get(name)
            .ok_or_else(|| Error::Registry(format!("no tensor named `{name}`")))
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.store
            .get_mut(name)
            .ok_or_else(|| Error::Registry(format!("no tensor named `{name}`")))
    }

    pub(crate) fn insert_tensor(&mut self, name: String, t: Tensor<T>) {
        self.store.insert(name, t);
    }

    pub(crate) fn remove_tensors(&mut self, prefix: &str) {
        self.store.retain(|k, _| !k.starts_with(prefix));
    }

    /// All tensors, in name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.store.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Owned copy of a trainable unit (a stack slot is extracted).
    pub fn param(&self, r: &ParamRef) -> Result<Tensor<T>> {
        let t = self.tensor(&r.name)?;
        match r.slot {
            Some(s) => t.slice_last(s),
            None => Ok(t.clone()),
        }
    }

    pub fn set_param(&mut self, r: &ParamRef, value: &Tensor<T>) -> Result<()> {
        let t = self.tensor_mut(&r.name)?;
        match r.slot {
            Some(s) => t.assign_last(s, value),
            None => {
                if t.shape() != value.shape() {
                    return Err(Error::ShapeMismatch(format!("parameter `{}`", r.name)));
                }
                *t = value.clone();
                Ok(())
            }
        }
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Checksum of every tensor by name.
    pub fn checksums(&self) -> BTreeMap<String, u64> {
        self.store
            .iter()
            .map(|(k, t)| (k.clone(), t.checksum()))
            .collect()
    }

    /// Checksums of trainable units, with stack slots listed separately.
    pub fn unit_checksums(&self) -> Result<BTreeMap<ParamRef, u64>> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.store {
            if k.ends_with(".depthwise") {
                let slots = *t.shape().last().expect("rank 4");
                for s in 0..slots {
                    out.insert(ParamRef::slot(k.clone(), s), t.slice_last(s)?.checksum());
                }
            } else {
                out.insert(ParamRef::whole(k.clone()), t.checksum());
            }
        }
        Ok(out)
    }

    /// Tensors of the shared portion `C` (everything no domain owns).
    pub fn shared_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in self.config.groups() {
            if self.config.share_of(g) == Share::Shared {
                for ts in self.config.tensor_specs(g, 2) {
                    out.push(self.config.key(g, ts.role, 0));
                }
            }
        }
        out
    }

    /// Every trainable unit domain `d` reads, shared or not.
    pub fn domain_refs(&self, d: usize) -> Result<Vec<ParamRef>> {
        self.domain(d)?;
        Ok(self
            .config
            .groups()
            .into_iter()
            .flat_map(|g| self.group_refs(g, d))
            .collect())
    }

    fn group_refs(&self, g: Group, d: usize) -> Vec<ParamRef> {
        self.config
            .tensor_specs(g, 2)
            .into_iter()
            .filter(|ts| !ts.buffer)
            .map(|ts| self.config.param_ref(g, ts.role, d))
            .collect()
    }

    /// Units owned by domain `d` alone.
    pub fn domain_specific_refs(&self, d: usize) -> Result<Vec<ParamRef>> {
        self.domain(d)?;
        Ok(self
            .config
            .groups()
            .into_iter()
            .filter(|&g| self.config.share_of(g) == Share::PerDomain)
            .flat_map(|g| self.group_refs(g, d))
            .collect())
    }

    /// Units updated when finetuning domain `d` under the config's regime.
    pub fn finetune_refs(&self, d: usize) -> Result<BTreeSet<ParamRef>> {
        let refs = self.domain_specific_refs(d)?;
        Ok(match self.config.sharing {
            SharingMode::ClassifierOnly => refs
                .into_iter()
                .filter(|r| r.name.starts_with("classifier."))
                .collect(),
            _ => refs.into_iter().collect(),
        })
    }

    /// BN mode for a group under a given trainable set: train statistics
    /// only when that BN's own parameters are being learned.
    pub(crate) fn bn_mode(
        &self,
        g: Group,
        d: usize,
        trainable: Option<&BTreeSet<ParamRef>>,
    ) -> Mode {
        match trainable {
            Some(set) if set.contains(&self.config.param_ref(g, "scale", d)) => Mode::Train,
            _ => Mode::Eval,
        }
    }

    pub fn gating(&self) -> Option<&GateInfo> {
        self.gating.as_ref()
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        domains: Vec<DomainSpec>,
        store: BTreeMap<String, Tensor<T>>,
        gating: Option<GateInfo>,
    ) -> Self {
        Self {
            config,
            seed,
            domains,
            store,
            gating,
        }
    }

    /// Re-keys a single-domain model under another sharing regime. With one
    /// domain every regime describes the same network, so this is a pure
    /// renaming; it lets one pretrained base seed several regimes.
    pub fn reshare(&self, sharing: SharingMode) -> Result<Self> {
        if self.domains.len() != 1 || self.gating.is_some() {
            return Err(Error::Registry(
                "resharing needs exactly one domain and no gates".into(),
            ));
        }
        let to = self.config.clone().with_sharing(sharing);
        to.validate()?;
        let classes = self.domains[0].num_classes;
        let mut store = BTreeMap::new();
        for g in self.config.groups() {
            for ts in self.config.tensor_specs(g, classes) {
                let t = self.tensor(&self.config.key(g, ts.role, 0))?.clone();
                store.insert(to.key(g, ts.role, 0), t);
            }
        }
        Ok(Self::from_parts(
            to,
            self.seed,
            self.domains.clone(),
            store,
            None,
        ))
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            seed: self.seed,
            domains: self.domains.clone(),
            store: self
                .store
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
            gating: self.gating.clone(),
        }
    }
}
