use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lrf_core::exec::Execution;
use lrf_core::training::{batch_gradients, greedy_decode_batch, Pair};
use lrf_core::{LrfVariant, ModelConfig, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (Seq2Seq, Vec<Pair>) {
    let model = Seq2Seq::new(ModelConfig {
        src_vocab: 64,
        tgt_vocab: 64,
        max_len: 16,
        variant: LrfVariant::LRF,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seq = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(5..12);
        (0..n).map(|_| rng.random_range(4..64)).collect::<Vec<usize>>()
    };
    let pairs = (0..16).map(|_| Pair::new(seq(&mut rng), seq(&mut rng))).collect();
    (model, pairs)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn gradients(c: &mut Criterion) {
    let (model, pairs) = setup();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradients(&model, &pairs, 0.1, None, exec).unwrap())
        });
    }
    g.finish();
}

fn decoding(c: &mut Criterion) {
    let (model, pairs) = setup();
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let mut g = c.benchmark_group("greedy_decode_batch");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| greedy_decode_batch(&model, &sources, 12, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradients, decoding);
criterion_main!(benches);
