use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dtigen::bpe::{default_reserved, pretokenize, train_bpe};
use dtigen::datagen::{generate, GenConfig};
use dtigen::fuzzymatch::{score_examples, EditBudget};
use dtigen::linearize::serialize_gold;
use dtigen::model::{
    encode_examples, predict_all, train_step, Adam, AdamConfig, DecodeConfig, EncodedExample, FeatureProvider,
    ModelConfig, Seq2Seq,
};
use dtigen::par::Exec;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn setup() -> (Seq2Seq, dtigen::bpe::BpeModel, Vec<EncodedExample>) {
    let g = generate(&GenConfig { n_docs: 16, seed: 7, ..GenConfig::default() }).unwrap();
    let mut texts: Vec<String> = g.labeled.iter().map(|e| pretokenize(&e.document.text())).collect();
    texts.extend(g.labeled.iter().map(|e| serialize_gold(&e.triplets, Default::default()).unwrap()));
    let bpe = train_bpe(&texts, 300, &default_reserved()).unwrap();
    let cfg = ModelConfig {
        dim: 32,
        heads: 4,
        ffn_dim: 64,
        max_source_len: 256,
        max_target_len: 96,
        ..ModelConfig::default()
    };
    let provider = FeatureProvider::random(bpe.vocab_size(), 32, 0);
    let model = Seq2Seq::new(cfg, bpe.vocab_size(), 32, 0).unwrap();
    let data = encode_examples(&g.labeled, &bpe, Some(&provider), &model, Exec::Sequential).unwrap();
    (model, bpe, data)
}

fn bench_train_step(c: &mut Criterion) {
    let (model, _, data) = setup();
    let batch: Vec<&EncodedExample> = data.iter().take(8).collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut m = model.clone();
                let mut opt = Adam::new(AdamConfig::default(), &m.params);
                train_step(&mut m, &mut opt, &batch, usize::MAX, 1, exec).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let (model, bpe, data) = setup();
    let decode = DecodeConfig { max_len: 24, ..DecodeConfig::default() };
    let mut group = c.benchmark_group("predict_all");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict_all(&model, &bpe, &data, &decode, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let g = generate(&GenConfig { n_docs: 200, seed: 3, ..GenConfig::default() }).unwrap();
    let budget = EditBudget::default();
    let mut group = c.benchmark_group("score_examples");
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| score_examples(&g.labeled, &g.lexicons, &budget, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train_step, bench_decode, bench_scoring);
criterion_main!(benches);
