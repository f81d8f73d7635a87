//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is checked
//! against the known set, so a typo fails the run instead of silently
//! falling back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dwsep_core::data::{generate_synth, load_dataset, DomainData, SynthKind, SynthSpec};
use dwsep_core::gating::{GateBatchMode, Region};
use dwsep_core::model::{DomainInit, MacroBlock, ModelConfig, SharingMode, TrainOptions};
use dwsep_core::optim::OptimConfig;
use dwsep_core::{Error, Result};

pub const PHASES: [&str; 3] = ["pretrain", "finetune", "gate"];
const OPTIM_FIELDS: [&str; 7] = [
    "lr0",
    "momentum",
    "weight_decay",
    "epochs",
    "decay_epochs",
    "decay_factor",
    "batch_size",
];

/// Where a domain's images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub init: DomainInit,
    pub optim: BTreeMap<&'static str, OptimConfig>,
    pub region: Region,
    pub batch_mode: GateBatchMode,
    pub eval_batch: usize,
    pub base: Option<String>,
    pub data: BTreeMap<String, DataSource>,
    pub weight_decay: BTreeMap<String, f64>,
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{v}`"
        ))),
    }
}

fn valid_domain_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// `synth kind=stripes classes=10 train=2000 test=500 size=32 noise=0.1 seed=3`
fn parse_synth(key: &str, rest: &str) -> Result<SynthSpec> {
    let mut kind = None;
    let mut fields = BTreeMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{key}`: expected name=value, got `{tok}`")))?;
        if k == "kind" {
            kind = Some(SynthKind::parse(v)?);
        } else {
            fields.insert(k, v);
        }
    }
    let kind = kind.ok_or_else(|| Error::Config(format!("`{key}`: synth spec needs kind=")))?;
    let mut spec = SynthSpec::new(kind, 10, 0);
    for (k, v) in fields {
        match k {
            "classes" => spec.num_classes = parse_num(key, v)?,
            "train" => spec.train = parse_num(key, v)?,
            "test" => spec.test = parse_num(key, v)?,
            "size" => spec.size = parse_num(key, v)?,
            "noise" => spec.noise = parse_num(key, v)?,
            "seed" => spec.seed = parse_num(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "`{key}`: unknown synth field `{other}`"
                )))
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

impl RunConfig {
    pub fn default_for(scale: &str) -> Result<Self> {
        let model = ModelConfig::preset(scale)?;
        let mut optim = BTreeMap::new();
        for p in PHASES {
            optim.insert(p, OptimConfig::preset(scale, p)?);
        }
        Ok(Self {
            seed: 0,
            output_dir: None,
            model,
            init: DomainInit::FromBase,
            optim,
            region: Region::Late,
            batch_mode: GateBatchMode::BatchMean,
            eval_batch: TrainOptions::default().eval_batch,
            base: None,
            data: BTreeMap::new(),
            weight_decay: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir)
    }

    /// Parses config text; relative manifest paths resolve against `dir`.
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim().to_string();
            if entries.iter().any(|(_, e, _)| *e == k) {
                return Err(cfg_err(i + 1, format!("duplicate key `{k}`")));
            }
            entries.push((i + 1, k, v.trim().to_string()));
        }

        // presets first: they seed every other default
        let get = |key: &str| {
            entries
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(_, _, v)| v.as_str())
        };
        let mut cfg = Self::default_for(get("model.preset").unwrap_or("desk"))?;
        if let Some(scale) = get("optim.preset") {
            for p in PHASES {
                cfg.optim.insert(p, OptimConfig::preset(scale, p)?);
            }
        }

        let mut widths = None;
        let mut blocks = None;
        for (line, key, v) in &entries {
            let v = v.as_str();
            let here = |e: Error| cfg_err(*line, e);
            match key.as_str() {
                "model.preset" | "optim.preset" => {}
                "seed" => cfg.seed = parse_num(key, v).map_err(here)?,
                "output_dir" => cfg.output_dir = Some(PathBuf::from(v)),
                "model.sharing" => cfg.model.sharing = SharingMode::parse(v).map_err(here)?,
                "model.widths" => widths = Some(parse_list(key, v).map_err(here)?),
                "model.blocks" => blocks = Some(parse_list(key, v).map_err(here)?),
                "model.stem_width" => cfg.model.stem_width = parse_num(key, v).map_err(here)?,
                "model.kernel" => cfg.model.kernel = parse_num(key, v).map_err(here)?,
                "model.resolution" => {
                    cfg.model.input_resolution = parse_num(key, v).map_err(here)?
                }
                "model.input_channels" => {
                    cfg.model.input_channels = parse_num(key, v).map_err(here)?
                }
                "model.last_layer_domain_specific" => {
                    cfg.model.last_layer_domain_specific = parse_bool(key, v).map_err(here)?
                }
                "model.init" => {
                    cfg.init = match v {
                        "from_base" => DomainInit::FromBase,
                        "random" => DomainInit::Random,
                        _ => {
                            return Err(cfg_err(
                                *line,
                                format!("`model.init`: expected from_base or random, got `{v}`"),
                            ))
                        }
                    }
                }
                "gate.region" => cfg.region = Region::parse(v).map_err(here)?,
                "gate.batch_mode" => cfg.batch_mode = GateBatchMode::parse(v).map_err(here)?,
                "train.eval_batch" => cfg.eval_batch = parse_num(key, v).map_err(here)?,
                "base" => cfg.base = Some(v.to_string()),
                k => {
                    if let Some(rest) = k.strip_prefix("optim.") {
                        let (phase, field) = rest
                            .split_once('.')
                            .ok_or_else(|| cfg_err(*line, format!("unknown key `{k}`")))?;
                        let o = PHASES
                            .iter()
                            .find(|p| **p == phase)
                            .and_then(|p| cfg.optim.get_mut(p))
                            .ok_or_else(|| {
                                cfg_err(*line, format!("unknown optimizer phase in `{k}`"))
                            })?;
                        match field {
                            "lr0" => o.lr0 = parse_num(k, v).map_err(here)?,
                            "momentum" => o.momentum = parse_num(k, v).map_err(here)?,
                            "weight_decay" => o.weight_decay = parse_num(k, v).map_err(here)?,
                            "epochs" => o.epochs = parse_num(k, v).map_err(here)?,
                            "decay_epochs" => o.decay_epochs = parse_list(k, v).map_err(here)?,
                            "decay_factor" => o.decay_factor = parse_num(k, v).map_err(here)?,
                            "batch_size" => o.batch_size = parse_num(k, v).map_err(here)?,
                            _ => return Err(cfg_err(*line, format!("unknown key `{k}`"))),
                        }
                    } else if let Some(name) = k.strip_prefix("data.") {
                        if !valid_domain_name(name) {
                            return Err(cfg_err(*line, format!("bad domain name `{name}`")));
                        }
                        let src = match v.strip_prefix("synth") {
                            Some(rest) if rest.is_empty() || rest.starts_with(' ') => {
                                DataSource::Synth(parse_synth(k, rest).map_err(here)?)
                            }
                            _ => DataSource::Manifest(dir.join(v)),
                        };
                        cfg.data.insert(name.to_string(), src);
                    } else if let Some(name) = k
                        .strip_prefix("domain.")
                        .and_then(|r| r.strip_suffix(".weight_decay"))
                    {
                        if !valid_domain_name(name) {
                            return Err(cfg_err(*line, format!("bad domain name `{name}`")));
                        }
                        cfg.weight_decay
                            .insert(name.to_string(), parse_num(k, v).map_err(here)?);
                    } else {
                        return Err(cfg_err(*line, format!("unknown key `{k}`")));
                    }
                }
            }
        }

        match (widths, blocks) {
            (None, None) => {}
            (w, b) => {
                let w =
                    w.unwrap_or_else(|| cfg.model.macro_blocks.iter().map(|m| m.width).collect());
                let b =
                    b.unwrap_or_else(|| cfg.model.macro_blocks.iter().map(|m| m.blocks).collect());
                if w.len() != b.len() {
                    return Err(Error::Config(format!(
                        "model.widths has {} entries, model.blocks has {}",
                        w.len(),
                        b.len()
                    )));
                }
                cfg.model.macro_blocks = w
                    .into_iter()
                    .zip(b)
                    .map(|(width, blocks)| MacroBlock { width, blocks })
                    .collect();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for o in self.optim.values() {
            o.validate()?;
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("train.eval_batch must be positive".into()));
        }
        if let Some(b) = &self.base {
            if !self.data.contains_key(b) {
                return Err(Error::Config(format!(
                    "base domain `{b}` has no data.{b} entry"
                )));
            }
        }
        if let Some(name) = self
            .weight_decay
            .keys()
            .find(|n| !self.data.contains_key(*n))
        {
            return Err(Error::Config(format!(
                "weight decay given for unknown domain `{name}`"
            )));
        }
        Ok(())
    }

    pub fn optim(&self, phase: &str) -> &OptimConfig {
        &self.optim[phase]
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            eval_batch: self.eval_batch,
        }
    }

    pub fn load_domain(&self, name: &str) -> Result<DomainData> {
        match self.data.get(name) {
            Some(DataSource::Manifest(p)) => {
                let d = load_dataset(p)?;
                if d.name != name {
                    log::warn!(
                        "manifest {} names its domain `{}`; using `{name}`",
                        p.display(),
                        d.name
                    );
                }
                Ok(DomainData {
                    name: name.to_string(),
                    ..d
                })
            }
            Some(DataSource::Synth(s)) => generate_synth(name, s),
            None => Err(Error::Config(format!("no data.{name} entry in the config"))),
        }
    }

    /// Class count of a configured domain without loading its images.
    pub fn num_classes(&self, name: &str) -> Result<usize> {
        match self.data.get(name) {
            Some(DataSource::Synth(s)) => Ok(s.num_classes),
            Some(DataSource::Manifest(p)) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                v.get("num_classes")
                    .and_then(|n| n.as_u64())
                    .map(|n| n as usize)
                    .ok_or_else(|| Error::Format(format!("{}: missing num_classes", p.display())))
            }
            None => Err(Error::Config(format!("no data.{name} entry in the config"))),
        }
    }

    /// Every setting, defaults included, in the input format.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let join = |v: &mut dyn Iterator<Item = usize>| {
            v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(o) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", o.display());
        }
        let _ = writeln!(s, "model.sharing = {}", m.sharing.name());
        let _ = writeln!(
            s,
            "model.widths = {}",
            join(&mut m.macro_blocks.iter().map(|b| b.width))
        );
        let _ = writeln!(
            s,
            "model.blocks = {}",
            join(&mut m.macro_blocks.iter().map(|b| b.blocks))
        );
        let _ = writeln!(s, "model.stem_width = {}", m.stem_width);
        let _ = writeln!(s, "model.kernel = {}", m.kernel);
        let _ = writeln!(s, "model.resolution = {}", m.input_resolution);
        let _ = writeln!(s, "model.input_channels = {}", m.input_channels);
        let _ = writeln!(
            s,
            "model.last_layer_domain_specific = {}",
            m.last_layer_domain_specific
        );
        let init = match self.init {
            DomainInit::FromBase => "from_base",
            DomainInit::Random => "random",
        };
        let _ = writeln!(s, "model.init = {init}");
        for p in PHASES {
            let o = &self.optim[p];
            let vals = [
                o.lr0.to_string(),
                o.momentum.to_string(),
                o.weight_decay.to_string(),
                o.epochs.to_string(),
                join(&mut o.decay_epochs.iter().copied()),
                o.decay_factor.to_string(),
                o.batch_size.to_string(),
            ];
            for (f, v) in OPTIM_FIELDS.iter().zip(vals) {
                let _ = writeln!(s, "optim.{p}.{f} = {v}");
            }
        }
        let _ = writeln!(s, "gate.region = {}", self.region.name());
        let _ = writeln!(s, "gate.batch_mode = {}", self.batch_mode.name());
        let _ = writeln!(s, "train.eval_batch = {}", self.eval_batch);
        if let Some(b) = &self.base {
            let _ = writeln!(s, "base = {b}");
        }
        for (name, src) in &self.data {
            match src {
                DataSource::Manifest(p) => {
                    let _ = writeln!(s, "data.{name} = {}", p.display());
                }
                DataSource::Synth(sp) => {
                    let _ = writeln!(
                        s,
                        "data.{name} = synth kind={} classes={} train={} test={} size={} noise={} seed={}",
                        sp.kind.name(),
                        sp.num_classes,
                        sp.train,
                        sp.test,
                        sp.size,
                        sp.noise,
                        sp.seed
                    );
                }
            }
        }
        for (name, wd) in &self.weight_decay {
            let _ = writeln!(s, "domain.{name}.weight_decay = {wd}");
        }
        s
    }
}
