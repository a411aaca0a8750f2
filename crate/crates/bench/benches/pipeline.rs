use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nuigo::metrics::ssim;
use nuigo::network::{forward_stage, ArchConfig};
use nuigo::raster::Image;
use nuigo::synthesis::{synthesize_pair, SynthesisConfig};
use nuigo::train::init_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(size, size, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

fn bench_forward_stage(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_stage");
    group.sample_size(10);
    for (channels, size) in [(16, 64), (64, 64), (64, 128)] {
        let arch = ArchConfig {
            channels,
            inner_channels: channels / 2,
            ..Default::default()
        };
        let params = init_params(arch, 0.02, 0).unwrap();
        let x = image(size, 1).to_tensor::<f32>();
        group.bench_with_input(
            BenchmarkId::new(format!("c{channels}"), size),
            &x,
            |b, x| b.iter(|| forward_stage(x, params.stage(0)).unwrap()),
        );
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let clean = image(256, 2);
    let config = SynthesisConfig::default();
    c.bench_function("synthesize_pair_256", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| synthesize_pair(&clean, 0.3, &config, &mut rng).unwrap())
    });
}

fn bench_ssim(c: &mut Criterion) {
    let (a, b) = (image(256, 4), image(256, 5));
    c.bench_function("ssim_256", |bench| bench.iter(|| ssim(&a, &b).unwrap()));
}

criterion_group!(benches, bench_forward_stage, bench_synthesis, bench_ssim);
criterion_main!(benches);
