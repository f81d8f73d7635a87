#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::Instant;

use dwsep_core::data::{generate_synth, DomainData, Split, SynthKind, SynthSpec};
use dwsep_core::evalscore::count_params;
use dwsep_core::gating::{attach_gates, train_gates, GateBatchMode, Region};
use dwsep_core::model::*;
use dwsep_core::optim::OptimConfig;

fn main() {
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let base_kind = SynthKind::parse(args.get(1).map_or("polygons", |s| s.as_str())).unwrap();
    let modes: Vec<SharingMode> = match args.get(2) {
        Some(list) => list
            .split(',')
            .map(|m| SharingMode::parse(m).unwrap())
            .collect(),
        None => vec![
            SharingMode::ClassifierOnly,
            SharingMode::SharePointwise,
            SharingMode::Individual,
        ],
    };
    let gen = |kind: SynthKind, seed| {
        generate_synth(kind.name(), &SynthSpec::new(kind, 10, seed)).unwrap()
    };
    let base = gen(base_kind, 100);
    let targets: Vec<DomainData> = SynthKind::ALL
        .into_iter()
        .filter(|&k| k != base_kind)
        .enumerate()
        .map(|(i, k)| gen(k, 101 + i as u64))
        .collect();
    let opts = TrainOptions::default();
    let mut m: Model<f32> = Model::build_base(ModelConfig::desk(), 7).unwrap();
    let r = pretrain_base(
        &mut m,
        DomainSpec::new(base_kind.name(), 10),
        base.split(Split::Train).unwrap(),
        Some(base.split(Split::Test).unwrap()),
        &OptimConfig::desk_pretrain(),
        &opts,
    )
    .unwrap();
    println!(
        "base acc {:.3} ({:.0}s)",
        r.last(Split::Test).unwrap().accuracy,
        t0.elapsed().as_secs_f64()
    );
    for mode in modes {
        let mut mm = m.reshare(mode).unwrap();
        for t in &targets {
            let t1 = Instant::now();
            let d = mm
                .add_domain(DomainSpec::new(&t.name, 10), DomainInit::FromBase)
                .unwrap();
            let r = finetune_domain(
                &mut mm,
                d,
                t.split(Split::Train).unwrap(),
                Some(t.split(Split::Test).unwrap()),
                &OptimConfig::desk_finetune(),
                &opts,
            )
            .unwrap();
            let acc: Vec<String> = r
                .metrics
                .iter()
                .filter(|e| e.split == Split::Test)
                .map(|e| format!("{:.3}", e.accuracy))
                .collect();
            println!(
                "{} {} acc {} ({:.0}s) curve {}",
                mode.name(),
                t.name,
                r.last(Split::Test).unwrap().accuracy,
                t1.elapsed().as_secs_f64(),
                acc.join(" ")
            );
        }
        if mode == SharingMode::SharePointwise {
            let t1 = Instant::now();
            let d = mm.num_domains() - 1;
            let tr = &targets[targets.len() - 1];
            attach_gates(&mut mm, d, Region::Late, GateBatchMode::BatchMean, 9).unwrap();
            let r = train_gates(
                &mut mm,
                tr.split(Split::Train).unwrap(),
                Some(tr.split(Split::Test).unwrap()),
                &OptimConfig::desk_gate(),
                &opts,
            )
            .unwrap();
            println!(
                "gated {} acc {:.3} simplex {:e} ({:.0}s)",
                tr.name,
                r.last(Split::Test).unwrap().accuracy,
                r.max_simplex_error,
                t1.elapsed().as_secs_f64()
            );
        }
    }
    let sp = count_params(&ModelConfig::desk(), &[10, 10, 10])
        .unwrap()
        .total;
    let ind = count_params(
        &ModelConfig::desk().with_sharing(SharingMode::Individual),
        &[10],
    )
    .unwrap()
    .total;
    println!(
        "params shared {sp} individual x3 {} ratio {:.3}",
        3 * ind,
        sp as f64 / (3 * ind) as f64
    );
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
