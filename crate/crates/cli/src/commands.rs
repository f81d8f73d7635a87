use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dwsep_core::data::{generate_synth, save_dataset, Split, SynthKind, SynthSpec};
use dwsep_core::evalscore::{
    count_params, decathlon_score, emax_from_baseline, forward_macs, marginal_overhead,
    param_report_text, score_csv, score_text, test_error, ScoreEntry, ScoreSpec,
};
use dwsep_core::gating::{attach_gates, train_gates, Region};
use dwsep_core::gradcheck::{run_suite, TOLERANCE};
use dwsep_core::model::{
    self, finetune_domain, pretrain_base, DomainSpec, EpochMetrics, Model, PhaseReport,
};
use dwsep_core::Error;

use crate::config::RunConfig;
use crate::{Common, GradcheckFailed};

fn load_config(common: &Common, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn refuse_overwrite(input: &Path, out: &Path) -> Result<()> {
    let a = fs::canonicalize(input).ok();
    let b = fs::canonicalize(out.join("bundle")).ok();
    if a.is_some() && a == b {
        return Err(Error::Config(format!(
            "output would overwrite the input bundle {}",
            input.display()
        ))
        .into());
    }
    Ok(())
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6}",
            m.epoch,
            m.split.name(),
            m.loss,
            m.accuracy
        );
    }
    s
}

fn write_outputs(
    dir: &Path,
    cfg: &RunConfig,
    model: &Model<f32>,
    report: &PhaseReport,
) -> Result<()> {
    let bundle = dir.join("bundle");
    if bundle.exists() {
        fs::remove_dir_all(&bundle).with_context(|| format!("clearing {}", bundle.display()))?;
    }
    model::save(model, &bundle)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&report.metrics))?;
    fs::write(dir.join("resolved.cfg"), cfg.resolved())?;
    if let Some(m) = report.last(Split::Test) {
        println!(
            "test accuracy {:.4} after {} epochs",
            m.accuracy,
            m.epoch + 1
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn domain_spec(cfg: &RunConfig, name: &str) -> Result<DomainSpec> {
    let mut spec = DomainSpec::new(name, cfg.num_classes(name)?);
    spec.weight_decay = cfg.weight_decay.get(name).copied();
    Ok(spec)
}

pub fn pretrain(common: &Common, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(common, seed)?;
    let base = cfg
        .base
        .clone()
        .ok_or_else(|| Error::Config("pretraining needs `base = <domain>`".into()))?;
    let dir = out_dir(common, &cfg)?;
    let data = cfg.load_domain(&base)?;
    let mut model = Model::<f32>::build_base(cfg.model.clone(), cfg.seed)?;
    let report = pretrain_base(
        &mut model,
        domain_spec(&cfg, &base)?,
        data.split(Split::Train)?,
        Some(data.split(Split::Test)?),
        cfg.optim("pretrain"),
        &cfg.train_options(),
    )?;
    write_outputs(&dir, &cfg, &model, &report)
}

pub fn add_domain(common: &Common, seed: Option<u64>, bundle: &Path, name: &str) -> Result<()> {
    let cfg = load_config(common, seed)?;
    let dir = out_dir(common, &cfg)?;
    refuse_overwrite(bundle, &dir)?;
    let mut model: Model<f32> = model::load(bundle)?;
    if model.config().macro_blocks != cfg.model.macro_blocks {
        log::warn!("config model layout differs from the bundle; using the bundle's");
    }
    let data = cfg.load_domain(name)?;
    let d = model.add_domain(domain_spec(&cfg, name)?, cfg.init)?;
    let report = finetune_domain(
        &mut model,
        d,
        data.split(Split::Train)?,
        Some(data.split(Split::Test)?),
        cfg.optim("finetune"),
        &cfg.train_options(),
    )?;
    write_outputs(&dir, &cfg, &model, &report)
}

pub fn train_gate(
    common: &Common,
    seed: Option<u64>,
    bundle: &Path,
    name: &str,
    region: Option<&str>,
) -> Result<()> {
    let cfg = load_config(common, seed)?;
    let dir = out_dir(common, &cfg)?;
    refuse_overwrite(bundle, &dir)?;
    let region = match region {
        Some(r) => Region::parse(r)?,
        None => cfg.region,
    };
    let mut model: Model<f32> = model::load(bundle)?;
    let d = model.domain_index(name)?;
    let data = cfg.load_domain(name)?;
    let placement = attach_gates(&mut model, d, region, cfg.batch_mode, cfg.seed)?;
    log::info!("gating layers {:?} for `{name}`", placement.layers);
    let report = train_gates(
        &mut model,
        data.split(Split::Train)?,
        Some(data.split(Split::Test)?),
        cfg.optim("gate"),
        &cfg.train_options(),
    )?;
    println!("max simplex deviation {:e}", report.max_simplex_error);
    write_outputs(&dir, &cfg, &model, &report)
}

fn evaluate_bundle(
    cfg: &RunConfig,
    bundle: &Path,
    only: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    let model: Model<f32> = model::load(bundle)?;
    let names: Vec<String> = match only {
        Some(n) => vec![n.to_string()],
        None => model
            .domains()
            .iter()
            .map(|d| d.name.clone())
            .filter(|n| cfg.data.contains_key(n))
            .collect(),
    };
    if names.is_empty() {
        bail!(Error::Config(
            "no bundle domain has a data entry in the config".into()
        ));
    }
    names
        .into_iter()
        .map(|n| {
            let d = model.domain_index(&n)?;
            let data = cfg.load_domain(&n)?;
            Ok((n, test_error(&model, d, data.split(Split::Test)?)?))
        })
        .collect()
}

pub fn eval(common: &Common, bundle: &Path, domain: Option<&str>) -> Result<()> {
    let cfg = load_config(common, None)?;
    let errors = evaluate_bundle(&cfg, bundle, domain)?;
    let mut csv = String::from("domain,error\n");
    for (n, e) in &errors {
        println!("{n} {e:.6}");
        let _ = writeln!(csv, "{n},{e}");
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), csv)?;
    }
    Ok(())
}

/// Rows of `domain,value[,value...]`; a header line is skipped when its
/// second field is not numeric.
fn read_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let name = fields.next().unwrap_or_default().to_string();
        let vals: std::result::Result<Vec<f64>, _> = fields.map(str::parse).collect();
        match vals {
            Ok(v) if !v.is_empty() => rows.push((name, v)),
            _ if i == 0 => {}
            _ => bail!(Error::Data(format!(
                "{}:{}: expected `domain,number`",
                path.display(),
                i + 1
            ))),
        }
    }
    Ok(rows)
}

pub fn score(
    common: &Common,
    spec: Option<&Path>,
    baseline: Option<&Path>,
    errors: Option<&Path>,
    bundle: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common, None)?;
    let spec = match (spec, baseline) {
        (Some(p), _) => {
            let entries = read_rows(p)?
                .into_iter()
                .map(|(d, v)| {
                    let mut e = ScoreEntry::new(d, v[0]);
                    if let Some(&g) = v.get(1) {
                        e.gamma = g;
                    }
                    e
                })
                .collect();
            ScoreSpec { entries }
        }
        (None, Some(p)) => {
            let rows = read_rows(p)?;
            let names: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
            let errs: Vec<f64> = rows.iter().map(|r| r.1[0]).collect();
            emax_from_baseline(&names, &errs)?
        }
        (None, None) => bail!(Error::Config("score needs --spec or --baseline".into())),
    };
    let measured: Vec<(String, f64)> = match (errors, bundle) {
        (Some(p), _) => read_rows(p)?.into_iter().map(|(d, v)| (d, v[0])).collect(),
        (None, Some(b)) => evaluate_bundle(&cfg, b, None)?,
        (None, None) => bail!(Error::Config("score needs --errors or --bundle".into())),
    };
    let errs = spec
        .entries
        .iter()
        .map(|e| {
            measured
                .iter()
                .find(|(d, _)| *d == e.domain)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Data(format!("no error for domain `{}`", e.domain)))
        })
        .collect::<std::result::Result<Vec<f64>, Error>>()?;
    let report = decathlon_score(&errs, &spec)?;
    print!("{}", score_text(&report));
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("score.csv"), score_csv(&report))?;
    }
    Ok(())
}

pub fn params(common: &Common, classes: &[usize]) -> Result<()> {
    let cfg = load_config(common, None)?;
    let classes: Vec<usize> = if classes.is_empty() {
        cfg.data
            .keys()
            .map(|n| cfg.num_classes(n))
            .collect::<dwsep_core::Result<_>>()?
    } else {
        classes.to_vec()
    };
    if classes.is_empty() {
        bail!(Error::Config(
            "no domains: pass --classes or add data entries".into()
        ));
    }
    let report = count_params(&cfg.model, &classes)?;
    print!("{}", param_report_text(&report));
    let extra = marginal_overhead(&cfg.model, &classes, *classes.last().expect("non-empty"))?;
    println!(
        "marginal per-domain   {} ({:.2}% of {})",
        extra,
        100.0 * extra as f64 / report.total as f64,
        report.total
    );
    let ops = forward_macs(&cfg.model, &[], 1, classes[0]);
    println!(
        "forward MACs/image    standard {} depthwise {} pointwise {} linear {}",
        ops.standard, ops.depthwise, ops.pointwise, ops.linear
    );
    Ok(())
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> Result<()> {
    let results = run_suite(seed, fault)?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        println!(
            "{:<20} {:>6} entries  max rel error {:.3e}  {}",
            r.name,
            r.entries,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!(GradcheckFailed(failed));
    }
    println!("all {} checks below {TOLERANCE:e}", results.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    kind: &str,
    name: Option<&str>,
    classes: usize,
    train: usize,
    test: usize,
    size: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kind = SynthKind::parse(kind)?;
    let spec = SynthSpec {
        kind,
        num_classes: classes,
        train,
        test,
        size,
        noise,
        seed,
    };
    let data = generate_synth(name.unwrap_or(kind.name()), &spec)?;
    let splits: Vec<_> = data.splits.values().collect();
    let manifest = save_dataset(out, &splits)?;
    println!("wrote {}", manifest.display());
    Ok(())
}
