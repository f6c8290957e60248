use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use card_bench::{config, corpus, model};
use card_core::inference::{decode_arm, generate};
use card_core::{DecodeConfig, Objective};

fn decode(c: &mut Criterion) {
    let cfg = config(Objective::Card);
    let (vocab, data) = corpus(&cfg);
    let model = model(&cfg);
    let prompt = data.validation.get(0).ids()[..15].to_vec();
    let mut group = c.benchmark_group("decode_48");
    group.bench_function("arm", |b| b.iter(|| decode_arm(&model, &vocab, &prompt, 48).expect("decodes")));
    for (k, t) in [(16, 16), (16, 8), (32, 8)] {
        let dcfg = DecodeConfig { block_size: k, max_iters: t, max_new_tokens: 48, ..DecodeConfig::default() };
        group.bench_function(BenchmarkId::new("card", format!("K{k}_T{t}")), |b| {
            b.iter(|| generate(&model, &vocab, &prompt, &dcfg).expect("decodes"))
        });
    }
    group.finish();
}

criterion_group!(benches, decode);
criterion_main!(benches);
