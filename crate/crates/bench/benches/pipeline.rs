use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use t1d_bench::{dataset, quick_model};
use t1d_core::baselines::{log_posterior, LikelihoodConfig};
use t1d_core::npe::{infer, InferOptions};
use t1d_core::rng::stream;
use t1d_core::{PopulationConstants, PriorSpec, Scenario, SensorModel, Simulator, TwinParams};

fn simulation(c: &mut Criterion) {
    let k = PopulationConstants::default();
    let s = Scenario::canonical(k.basal_rate);
    let p = TwinParams::at_steady_state(PriorSpec::default().location(), &k);
    let sim = Simulator::new(k, s.clone(), SensorModel::default()).unwrap();
    c.bench_function("observe_22h", |b| {
        b.iter_batched(|| stream(1, 0, 0), |mut rng| sim.observe(black_box(&p), &mut rng).unwrap(), BatchSize::SmallInput)
    });
    let next = Simulator::new(k, s.extend_next_day(), SensorModel::ideal()).unwrap();
    c.bench_function("noiseless_46h", |b| b.iter(|| next.noiseless_cgm(black_box(&p), true).unwrap()));
    let y = sim.noiseless_cgm(&p, false).unwrap();
    let prior = PriorSpec::default();
    let lik = LikelihoodConfig::default();
    c.bench_function("log_posterior", |b| {
        b.iter(|| log_posterior(black_box(&p.theta), &y, &prior, &sim, &lik))
    });
}

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    g.bench_function("500_rows", |b| b.iter(|| dataset(500, black_box(3))));
    g.finish();
}

fn inference(c: &mut Criterion) {
    let model = quick_model();
    let ds = dataset(1, 9);
    let y = ds.obs_row(0).to_vec();
    let opts = InferOptions::default();
    let mut g = c.benchmark_group("infer");
    g.sample_size(10);
    g.bench_function("1000_samples", |b| b.iter(|| infer(&model, black_box(&y), 1000, 3, &opts).unwrap()));
    g.finish();
}

criterion_group!(benches, simulation, generation, inference);
criterion_main!(benches);
