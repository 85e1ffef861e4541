use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use attrunlearn::adversary::{backward, forward, AdversaryParams, HeadKind};
use attrunlearn::attacks::{closed_form_label_plain, dlg_attack, idlg_label, DlgConfig, DlgTarget, TrialSpec};
use attrunlearn::data::{filter_kcore, synth_generate, AttributeKind};
use attrunlearn::experiment::metrics::{rank_all, Candidates};
use attrunlearn::fedsim::{FedConfig, Simulation};
use attrunlearn::numkernel::{sample_gaussian_iid, RngStream};
use attrunlearn::recmodel::{ScorerKind, ScorerParams};

fn adversary(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0);
    let em = sample_gaussian_iid(&mut rng, 32, 0.0, 1.0).unwrap();
    for kind in [HeadKind::Plain, HeadKind::Vae, HeadKind::Dsvae] {
        let params = AdversaryParams::init(kind, 32, 100, 2, 4.0, &mut rng).unwrap();
        c.bench_function(&format!("adversary_forward_backward_{kind:?}"), |b| {
            let mut rng = RngStream::new(2, 0);
            b.iter(|| {
                let trace = forward(&params, black_box(&em), &mut rng).unwrap();
                backward(&params, &trace, 1).unwrap()
            })
        });
    }
}

fn attacks(c: &mut Criterion) {
    let spec = TrialSpec { head: HeadKind::Plain, input_dim: 32, hidden: 100, n_classes: 2, lambda: 4.0 };
    let inst = spec.instance(3, 0).unwrap();
    c.bench_function("idlg_label", |b| b.iter(|| idlg_label(black_box(&inst.record))));
    c.bench_function("closed_form_label_plain", |b| {
        b.iter(|| closed_form_label_plain(black_box(&inst.record), &inst.hidden, &inst.record.oracle.probs).unwrap())
    });
    let cfg = DlgConfig::new(DlgTarget::Plain, 7);
    c.bench_function("dlg_attack_plain_32x100", |b| {
        b.iter(|| dlg_attack(black_box(&inst.record), &inst.params, &cfg).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let ds = synth_generate(200, 300, 1.0, &mut RngStream::new(5, 0)).unwrap();
    c.bench_function("filter_kcore_synth", |b| b.iter(|| filter_kcore(black_box(&ds.interactions), 5, 5).unwrap()));
    let data = attrunlearn::data::leave_one_out_split(&ds).unwrap().index(AttributeKind::Gender);
    let mut rng = RngStream::new(6, 0);
    let scorer = ScorerParams::init(ScorerKind::Dot, 32, 32, &mut rng).unwrap();
    let adv = AdversaryParams::init(HeadKind::Dsvae, 32, 100, 2, 4.0, &mut rng).unwrap();
    let sim = Simulation::new(&data, 32, scorer, Some(adv), FedConfig::default(), RngStream::new(7, 0)).unwrap();
    c.bench_function("federated_round_200_users", |b| {
        b.iter_batched(|| sim.clone(), |mut s| s.step().map(|_| ()).unwrap(), BatchSize::SmallInput)
    });
    c.bench_function("rank_all_200_users", |b| {
        b.iter(|| {
            rank_all(
                &sim.user_embeddings(),
                &data.train,
                &data.test,
                &sim.state.items,
                &sim.state.scorer,
                Candidates::All,
                &RngStream::new(8, 0),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, adversary, attacks, pipeline);
criterion_main!(benches);
