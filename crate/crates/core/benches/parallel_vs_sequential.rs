//! Per-sample `L_opt` evaluation over a batch, rayon pool vs plain loop.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use styleinv_core::corpus::gen_corpus;
use styleinv_core::iterator::{objective, InitContext};
use styleinv_core::{parallel, Generator, GeneratorConfig, PerceptualNet};

fn bench(c: &mut Criterion) {
    let g = Generator::build(1, GeneratorConfig::default()).expect("generator");
    let phi = PerceptualNet::build(2, g.image_shape()[0]);
    let corpus = gen_corpus(&g, 16, 3).expect("corpus");
    let mean = InitContext::new(&g, None).expect("mean").mean;
    let eval = |_: usize, s: &styleinv_core::corpus::CorpusSample| objective(&g, &phi, &s.image, &mean, 1.0).expect("objective").total;

    let mut group = c.benchmark_group("objective_batch");
    group.sample_size(20);
    let n = corpus.train.len();
    group.bench_with_input(BenchmarkId::new("sequential", n), &corpus.train, |b, xs| {
        b.iter(|| parallel::map_sequential(xs, eval))
    });
    group.bench_with_input(BenchmarkId::new("parallel", n), &corpus.train, |b, xs| {
        b.iter(|| parallel::with_threads(0, || parallel::map(xs, eval)))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
