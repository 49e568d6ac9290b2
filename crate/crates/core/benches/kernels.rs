use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use cvq::parallel::Execution;
use cvq::quantizer::lookup;
use cvq::tensor::{matmul_nn, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn modes() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ]
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_nn");
    for size in [64, 256] {
        let a = random(size * size, 1);
        let b = random(size * size, 2);
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, size), &size, |bench, &s| {
                bench.iter(|| matmul_nn(exec, black_box(&a), black_box(&b), s, s, s))
            });
        }
    }
    g.finish();
}

fn bench_lookup(c: &mut Criterion) {
    let mut g = c.benchmark_group("lookup");
    // Channel-wise tokens at the default geometry: 16-dim codewords.
    for n in [64, 512] {
        let v = Tensor::new(vec![2048, 16], random(2048 * 16, 3)).unwrap();
        let e = Tensor::new(vec![n, 16], random(n * 16, 4)).unwrap();
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                bench.iter(|| lookup(black_box(&v), black_box(&e), exec).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_lookup);
criterion_main!(benches);
