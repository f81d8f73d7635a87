//! Model bundles: `manifest.json` plus one DTB file per tensor.
//!
//! Regular tensors go to `params/<name>.dtb`, gate tensors to
//! `gates/<name>.dtb`. Output is a pure function of the model, so saving a
//! loaded bundle reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateInfo;
use crate::tensor::{read_dtb_file, write_dtb_file, DType, Real};

use super::params::{Group, Share};
use super::{DomainSpec, Model, ModelConfig};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    dtype: String,
    seed: u64,
    config: ModelConfig,
    domains: Vec<DomainSpec>,
    tensors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gates: Option<GateInfo>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    match name.strip_prefix("gates/") {
        Some(rest) => dir.join("gates").join(format!("{rest}.dtb")),
        None => dir.join("params").join(format!("{name}.dtb")),
    }
}

pub fn save<T: Real>(model: &Model<T>, dir: &Path) -> Result<()> {
    for sub in ["params", "gates"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut names = Vec::new();
    for (name, t) in model.tensors() {
        write_dtb_file(&tensor_path(dir, name), t)?;
        names.push(name.to_string());
    }
    let m = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        dtype: dtype_name(T::DTYPE).into(),
        seed: model.seed(),
        config: model.config().clone(),
        domains: model.domains().to_vec(),
        tensors: names,
        gates: model.gating().cloned(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load<T: Real>(dir: &Path) -> Result<Model<T>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle format version {}",
            m.format_version
        )));
    }
    if m.dtype != dtype_name(T::DTYPE) {
        return Err(Error::Format(format!(
            "bundle holds {} tensors, requested {}",
            m.dtype,
            dtype_name(T::DTYPE)
        )));
    }
    m.config.validate()?;
    let mut store = BTreeMap::new();
    for name in &m.tensors {
        store.insert(name.clone(), read_dtb_file::<T>(&tensor_path(dir, name))?);
    }
    let model = Model::from_parts(m.config, m.seed, m.domains, store, m.gates);
    check_layout(&model)?;
    Ok(model)
}

/// Verifies that every tensor the config and registry imply exists with
/// the right shape.
fn check_layout<T: Real>(model: &Model<T>) -> Result<()> {
    let c = model.config();
    let t = model.num_domains();
    let expect = |name: &str, shape: &[usize]| -> Result<()> {
        let got = model
            .tensor(name)
            .map_err(|_| Error::Format(format!("bundle is missing tensor `{name}`")))?;
        if got.shape() != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                got.shape()
            )));
        }
        Ok(())
    };
    for g in c.groups() {
        let share = c.share_of(g);
        let copies = match share {
            Share::Shared => 1,
            Share::PerDomain => t,
        };
        for d in 0..copies {
            let classes = match g {
                Group::Classifier => model.domain(d)?.num_classes,
                _ => 2,
            };
            for ts in c.tensor_specs(g, classes) {
                let name = c.key(g, ts.role, d);
                match g {
                    Group::Depthwise(_) => {
                        let mut shape = ts.shape.clone();
                        shape.push(copies);
                        expect(&name, &shape)?;
                    }
                    _ => expect(&name, &ts.shape)?,
                }
            }
        }
    }
    if let Some(info) = model.gating() {
        model.domain(info.target)?;
        for &l in &info.layers {
            for name in crate::gating::GateParams::<T>::names(l) {
                model
                    .tensor(&name)
                    .map_err(|_| Error::Format(format!("bundle is missing tensor `{name}`")))?;
            }
        }
    }
    Ok(())
}
