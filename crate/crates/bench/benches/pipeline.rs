use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimatch::encoder::embed;
use unimatch::episodes::Split;
use unimatch::meta::{task_step, TrainConfig};
use unimatch::metrics::{auprc, auroc};
use unimatch::synth::synth_generate;
use unimatch::{mol_from_smiles, ModelConfig, ModelParams};

const MOLS: &[&str] = &[
    "CCOc1ccc2nc(S(N)(=O)=O)sc2c1",
    "CC1=C(C(=O)Nc2ccccc2)S(=O)(=O)CCO1",
    "Nc1ccc(/N=N/c2ccccc2)cc1",
    "O=C([O-])COc1nn(Cc2ccccc2)c2ccccc12",
];

fn parse(c: &mut Criterion) {
    c.bench_function("parse_smiles", |b| {
        b.iter(|| {
            for s in MOLS {
                black_box(mol_from_smiles(s).unwrap());
            }
        })
    });
}

fn encoder(c: &mut Criterion) {
    let graphs: Vec<_> = MOLS.iter().cycle().take(64).map(|s| mol_from_smiles(s).unwrap()).collect();
    let refs: Vec<_> = graphs.iter().collect();
    let mut group = c.benchmark_group("embed_64_molecules");
    for hidden in [64, 300] {
        let cfg = ModelConfig {
            hidden,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| black_box(embed(&refs, &params.encoder).unwrap()))
        });
    }
    group.finish();
}

fn outer_step(c: &mut Criterion) {
    let registry = synth_generate(4, 0, 60, 0).unwrap();
    let task = registry.split(Split::Train)[0];
    let model = ModelConfig {
        hidden: 64,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(0));
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("task_step");
    group.sample_size(10);
    group.bench_function("d64", |b| b.iter(|| black_box(task_step(task, &params, &model, &cfg, 7).unwrap())));
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
    c.bench_function("auroc_10k", |b| b.iter(|| auroc(black_box(&scores), &labels).unwrap()));
    c.bench_function("auprc_10k", |b| b.iter(|| auprc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, parse, encoder, outer_step, metrics);
criterion_main!(benches);
