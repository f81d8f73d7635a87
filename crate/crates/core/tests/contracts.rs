mod common;

use std::collections::BTreeSet;

use common::{randn, reference_forward, scramble, tiny, tiny_data};
use dwsep_core::data::{Split, SynthKind};
use dwsep_core::evalscore::{count_params, marginal_overhead};
use dwsep_core::gating::{attach_gates, gate_refs, train_gates, GateBatchMode, Region};
use dwsep_core::model::*;
use dwsep_core::optim::OptimConfig;
use dwsep_core::{Rng, Tensor};

fn short() -> OptimConfig {
    OptimConfig {
        epochs: 2,
        decay_epochs: vec![1],
        batch_size: 16,
        ..OptimConfig::desk_finetune()
    }
}

/// Base model pretrained briefly on one domain.
fn pretrained(sharing: SharingMode) -> Model<f32> {
    let data = tiny_data("base", SynthKind::Polygons, 1);
    let mut m = Model::build_base(tiny(sharing), 11).unwrap();
    pretrain_base(
        &mut m,
        DomainSpec::new("base", 4),
        data.split(Split::Train).unwrap(),
        None,
        &short(),
        &TrainOptions::default(),
    )
    .unwrap();
    m
}

fn changed(
    before: &std::collections::BTreeMap<String, u64>,
    after: &std::collections::BTreeMap<String, u64>,
) -> BTreeSet<String> {
    assert_eq!(
        before.keys().collect::<Vec<_>>(),
        after.keys().collect::<Vec<_>>()
    );
    before
        .iter()
        .filter(|(k, v)| after[*k] != **v)
        .map(|(k, _)| k.clone())
        .collect()
}

#[test]
fn stacked_forward_is_bit_identical_to_unstacked_filters() {
    for mode in SharingMode::ALL {
        let mut m: Model<f64> = Model::build_base(tiny(mode), 3).unwrap();
        for (i, name) in ["a", "b", "c"].into_iter().enumerate() {
            m.add_domain(DomainSpec::new(name, 3 + i), DomainInit::Random)
                .unwrap();
        }
        scramble(&mut m, 17);
        let x = randn(&[3, 3, 8, 8], &mut Rng::new(5));
        for d in 0..3 {
            assert_eq!(
                m.forward_domain(&x, d).unwrap(),
                reference_forward(&m, &x, d),
                "{} domain {d}",
                mode.name()
            );
        }
    }
}

#[test]
fn share_pointwise_finetune_leaves_shared_and_other_domains_untouched() {
    let mut m = pretrained(SharingMode::SharePointwise);
    let a = m
        .add_domain(DomainSpec::new("a", 4), DomainInit::FromBase)
        .unwrap();
    let b = m
        .add_domain(DomainSpec::new("b", 4), DomainInit::FromBase)
        .unwrap();
    let data = tiny_data("b", SynthKind::Stripes, 2);
    let units = m.unit_checksums().unwrap();
    let all = m.checksums();
    finetune_domain(
        &mut m,
        b,
        data.split(Split::Train).unwrap(),
        None,
        &short(),
        &TrainOptions::default(),
    )
    .unwrap();
    let after = m.checksums();
    for name in m.shared_names() {
        assert_eq!(all[&name], after[&name], "shared tensor {name} changed");
    }
    let own: BTreeSet<ParamRef> = m.domain_specific_refs(b).unwrap().into_iter().collect();
    // Running statistics belong to the same owner as the BN they sit next to.
    let owned_prefixes: BTreeSet<String> = own
        .iter()
        .filter_map(|r| r.name.rsplit_once('.').map(|(p, _)| p.to_string()))
        .collect();
    let is_own = |r: &ParamRef| {
        own.contains(r)
            || r.name
                .rsplit_once('.')
                .is_some_and(|(p, role)| role.starts_with("running_") && owned_prefixes.contains(p))
    };
    let units_after = m.unit_checksums().unwrap();
    let mut moved = 0;
    for (r, v) in &units {
        if is_own(r) {
            moved += (units_after[r] != *v) as usize;
        } else {
            assert_eq!(units_after[r], *v, "{r:?} changed");
        }
    }
    assert!(moved > 0);
    for r in m.domain_refs(a).unwrap() {
        assert_eq!(units[&r], units_after[&r]);
    }
}

#[test]
fn gate_training_changes_only_gates() {
    let mut m = pretrained(SharingMode::SharePointwise);
    m.add_domain(DomainSpec::new("a", 4), DomainInit::FromBase)
        .unwrap();
    let b = m
        .add_domain(DomainSpec::new("b", 4), DomainInit::FromBase)
        .unwrap();
    attach_gates(&mut m, b, Region::Middle, GateBatchMode::BatchMean, 4).unwrap();
    let data = tiny_data("b", SynthKind::Stripes, 2);
    let before = m.checksums();
    let report = train_gates(
        &mut m,
        data.split(Split::Train).unwrap(),
        None,
        &short(),
        &TrainOptions::default(),
    )
    .unwrap();
    let moved = changed(&before, &m.checksums());
    let gates: BTreeSet<String> = gate_refs(&m).into_iter().map(|r| r.name).collect();
    assert!(!moved.is_empty());
    assert!(moved.is_subset(&gates), "{moved:?}");
    assert!(report.max_simplex_error < 1e-6);
}

#[test]
fn classifier_only_updates_only_the_new_classifier() {
    let mut m = pretrained(SharingMode::ClassifierOnly);
    let d = m
        .add_domain(DomainSpec::new("t", 4), DomainInit::FromBase)
        .unwrap();
    let data = tiny_data("t", SynthKind::Blobs, 3);
    let before = m.checksums();
    finetune_domain(
        &mut m,
        d,
        data.split(Split::Train).unwrap(),
        None,
        &short(),
        &TrainOptions::default(),
    )
    .unwrap();
    let c = m.config().clone();
    let expect: BTreeSet<String> = ["weight", "bias"]
        .iter()
        .map(|r| c.key(Group::Classifier, r, d))
        .collect();
    assert_eq!(changed(&before, &m.checksums()), expect);
}

#[test]
fn from_base_domains_reproduce_base_features() {
    for mode in SharingMode::ALL {
        let mut m: Model<f64> = Model::build_base(tiny(mode), 8).unwrap();
        m.add_domain(DomainSpec::new("base", 5), DomainInit::Random)
            .unwrap();
        scramble(&mut m, 2);
        let d = m
            .add_domain(DomainSpec::new("new", 3), DomainInit::FromBase)
            .unwrap();
        let x = randn(&[2, 3, 8, 8], &mut Rng::new(1));
        assert_eq!(
            m.features(&x, 0).unwrap(),
            m.features(&x, d).unwrap(),
            "{}",
            mode.name()
        );
    }
}

#[test]
fn accountant_matches_allocated_tensors() {
    for cfg in [
        tiny(SharingMode::Individual),
        ModelConfig::desk(),
        ModelConfig::paper(),
    ] {
        for mode in SharingMode::ALL {
            let cfg = cfg.clone().with_sharing(mode);
            let mut m: Model<f32> = Model::build_base(cfg.clone(), 0).unwrap();
            let mut classes = Vec::new();
            for (i, nc) in [10usize, 7, 100].into_iter().enumerate() {
                let before = m.num_params();
                let overhead = marginal_overhead(&cfg, &classes, nc).unwrap();
                m.add_domain(DomainSpec::new(format!("d{i}"), nc), DomainInit::Random)
                    .unwrap();
                classes.push(nc);
                assert_eq!(m.num_params() - before, overhead);
                assert_eq!(count_params(&cfg, &classes).unwrap().total, m.num_params());
            }
        }
    }
}

#[test]
fn one_hot_gates_collapse_to_the_target_domain() {
    for region in Region::ALL {
        for mode in [GateBatchMode::BatchMean, GateBatchMode::PerExample] {
            let mut m: Model<f64> =
                Model::build_base(tiny(SharingMode::SharePointwise), 6).unwrap();
            for name in ["a", "b", "c"] {
                m.add_domain(DomainSpec::new(name, 4), DomainInit::Random)
                    .unwrap();
            }
            scramble(&mut m, 9);
            let d = 1;
            let placement = attach_gates(&mut m, d, region, mode, 3).unwrap();
            let x = randn(&[4, 3, 8, 8], &mut Rng::new(2));

            let (_, tape) = m.forward_with(&x, Pass::eval(d)).unwrap();
            for (_, s) in tape.gate_scales() {
                assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
            }

            for &l in &placement.layers {
                let w2 = format!("gates/sep{l:02}.fc2.weight");
                let b2 = format!("gates/sep{l:02}.fc2.bias");
                let zeros = m.tensor(&w2).unwrap().zeros_like();
                m.set_param(&ParamRef::whole(w2), &zeros).unwrap();
                let mut bias = vec![0.0; 3];
                bias[d] = 1e4;
                m.set_param(&ParamRef::whole(b2), &Tensor::from_vec(&[3], bias).unwrap())
                    .unwrap();
            }
            let gated = m.forward_domain(&x, d).unwrap();
            let (plain, _) = m.forward_with(&x, Pass::eval(d).ungated()).unwrap();
            let diff = gated
                .data()
                .iter()
                .zip(plain.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-5, "{} {}: {diff}", region.name(), mode.name());
        }
    }
}

#[test]
fn bundle_round_trip_preserves_outputs() {
    let mut m: Model<f32> = Model::build_base(tiny(SharingMode::SharePointwise), 6).unwrap();
    for name in ["a", "b"] {
        m.add_domain(DomainSpec::new(name, 4), DomainInit::Random)
            .unwrap();
    }
    scramble(&mut m, 1);
    attach_gates(&mut m, 0, Region::Early, GateBatchMode::PerExample, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&m, dir.path()).unwrap();
    let back: Model<f32> = load(dir.path()).unwrap();
    let x = randn(&[2, 3, 8, 8], &mut Rng::new(4));
    for d in 0..2 {
        assert_eq!(
            m.forward_domain(&x, d).unwrap(),
            back.forward_domain(&x, d).unwrap()
        );
    }
    assert_eq!(back.gating(), m.gating());
}
