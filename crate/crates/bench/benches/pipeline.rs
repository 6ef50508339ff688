use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pwrecon_bench::config;
use pwrecon_core::beamformer::{apodization_weights, build_beamformer};
use pwrecon_core::denoise::{Wavelet, WaveletDenoiser};
use pwrecon_core::sampler::{chain_rng, init_state, prepare, sample_step};
use pwrecon_core::spectral::{compose_bh, factorize, FactorizationRequest};
use pwrecon_core::system::build_system_matrix;
use pwrecon_core::Mode;

fn system_matrix(c: &mut Criterion) {
    let mut g = c.benchmark_group("build_h");
    g.sample_size(10);
    for n in [32, 64] {
        let cfg = config(n);
        let s = cfg.setup().unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| {
            b.iter(|| build_system_matrix(&s.probe, &s.acquisition, &s.grid, &s.pulse, 4096.0).unwrap())
        });
    }
    g.finish();
}

fn composite(c: &mut Criterion) {
    let mut g = c.benchmark_group("compose_bh");
    g.sample_size(10);
    for n in [16, 32] {
        let cfg = config(n);
        let s = cfg.setup().unwrap();
        let h = build_system_matrix(&s.probe, &s.acquisition, &s.grid, &s.pulse, 4096.0).unwrap();
        let w = apodization_weights(&s.probe, &s.grid, &cfg.apodization).unwrap();
        let bm = build_beamformer(&h, &w).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &(h, bm), |b, (h, bm)| {
            b.iter(|| compose_bh(bm, h, 4096.0).unwrap())
        });
    }
    g.finish();
}

fn sampler_step(c: &mut Criterion) {
    let n = 32;
    let mut cfg = config(n);
    cfg.sampler.mode = Mode::Drus;
    let s = cfg.setup().unwrap();
    let h = build_system_matrix(&s.probe, &s.acquisition, &s.grid, &s.pulse, 4096.0).unwrap();
    let w = apodization_weights(&s.probe, &s.grid, &cfg.apodization).unwrap();
    let bm = build_beamformer(&h, &w).unwrap();
    let bh = compose_bh(&bm, &h, 4096.0).unwrap();
    let fact = factorize(&bh, &FactorizationRequest::Exact, 1e-8).unwrap();
    let by: Vec<f64> = (0..s.grid.len()).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let prep = prepare(&cfg.sampler, &fact, &by).unwrap();
    let den = WaveletDenoiser::new(n, n, 3, 3.0, Wavelet::Db2).unwrap();
    c.bench_function("sampler_step_32x32", |b| {
        b.iter_batched(
            || init_state(&prep.measurement, &prep.schedule, chain_rng(1, 0)),
            |mut st| sample_step(&mut st, &prep, &fact, &den, None).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, system_matrix, composite, sampler_step);
criterion_main!(benches);
