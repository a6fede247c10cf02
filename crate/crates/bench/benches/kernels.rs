use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttbnn_core::data::Split;
use ttbnn_core::inference::svgd_step;
use ttbnn_core::model::evaluate_posterior;
use ttbnn_core::tt::tt_matmul_with;
use ttbnn_core::{
    Activation, Bandwidth, Dataset, Ensemble, FactorizedShape, LambdaInit, LayerSpec, Network,
    Particle, Prior, ProductRoute, RankVector, TtMatrix,
};

const BATCH: usize = 100;

fn mnist_net(rank: usize) -> Network {
    Network::new(vec![
        LayerSpec {
            shape: FactorizedShape::new(vec![7, 4, 7, 4], vec![5, 5, 5, 5]).unwrap(),
            ranks: RankVector::uniform(4, rank).unwrap(),
            activation: Activation::Relu,
        },
        LayerSpec {
            shape: FactorizedShape::new(vec![25, 25], vec![5, 2]).unwrap(),
            ranks: RankVector::uniform(2, rank).unwrap(),
            activation: Activation::Softmax,
        },
    ])
    .unwrap()
}

fn random_data(rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..rows * 784).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..10)).collect();
    Dataset::from_labels(inputs, 784, &labels, 10, Split::Other).unwrap()
}

fn bench_product(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = FactorizedShape::new(vec![7, 4, 7, 4], vec![5, 5, 5, 5]).unwrap();
    let tt = TtMatrix::random(shape, RankVector::uniform(4, 20).unwrap(), 0.1, &mut rng).unwrap();
    let x: Vec<f64> = (0..BATCH * 784).map(|_| rng.random()).collect();
    let mut group = c.benchmark_group("tt_matmul_784x625_rank20_batch100");
    for (name, route) in [
        ("sequential", ProductRoute::Sequential),
        ("dense", ProductRoute::Dense),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| tt_matmul_with(&tt, &x, BATCH, route).unwrap())
        });
    }
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let net = mnist_net(20);
    let prior = Prior::default();
    let particle = Particle::init(&net, &prior, LambdaInit::PriorMean, 1).unwrap();
    let data = random_data(BATCH, 2);
    let idx: Vec<usize> = (0..BATCH).collect();
    let batch = data.batch(&idx);
    c.bench_function("log_posterior_gradient_mnist_batch100", |b| {
        b.iter(|| evaluate_posterior(&net, &prior, &particle, &batch, 60_000).unwrap())
    });
}

fn bench_svgd(c: &mut Criterion) {
    let net = mnist_net(8);
    let prior = Prior::default();
    let first = Particle::init(&net, &prior, LambdaInit::PriorMean, 3).unwrap();
    let ensemble = Ensemble::from_warm_start(first, 10, 4).unwrap();
    let data = random_data(BATCH, 5);
    let idx: Vec<usize> = (0..BATCH).collect();
    let batch = data.batch(&idx);
    c.bench_function("svgd_step_10_particles_rank8", |b| {
        b.iter_batched(
            || ensemble.clone(),
            |mut ens| {
                svgd_step(
                    &mut ens,
                    &net,
                    &prior,
                    &batch,
                    2000,
                    1e-6,
                    Bandwidth::Median,
                )
                .unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_product, bench_gradient, bench_svgd
}
criterion_main!(benches);
