use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmvq::channel::{generate_realization, ChannelConfig};
use mmvq::conv::{conv2d, conv2d_backward};
use mmvq::csi::CsiTransform;
use mmvq::models::{ModelSpec, MultimodalVqVae};
use mmvq::trainer::train_step;
use mmvq::vq::quantize_multimodal;
use mmvq::{Adam, AdamConfig, Codebook, ConvGeometry, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[64, 128, 14, 4], &mut rng);
    let w = random(&[128, 128, 3, 3], &mut rng);
    let geom = ConvGeometry::new((3, 3), (1, 1), (1, 1));
    c.bench_function("conv2d 64x128x14x4 k3", |b| b.iter(|| conv2d(black_box(&x), &w, None, geom).unwrap()));
    let y = conv2d(&x, &w, None, geom).unwrap();
    c.bench_function("conv2d backward 64x128x14x4 k3", |b| {
        b.iter(|| conv2d_backward(black_box(&x), &w, &y, geom, false).unwrap())
    });
}

fn quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[64, 128, 8, 8], &mut rng);
    let b2 = random(&[64, 128, 8, 8], &mut rng);
    let codebook = Codebook::<f32>::random(512, 128, &mut rng).unwrap();
    c.bench_function("quantize 2x64x8x8 k512", |b| {
        b.iter(|| quantize_multimodal(black_box(&[&a, &b2]), &codebook).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let spec = ModelSpec::csi_feedback(2, 28, 8);
    let mut model = MultimodalVqVae::<f32>::build(spec, 512, 3).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = vec![random(&[16, 2, 28, 8], &mut rng), random(&[16, 2, 28, 8], &mut rng)];
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step csi batch 16", |b| {
        b.iter(|| train_step(&mut model, &mut adam, black_box(&batch), 0.25).unwrap())
    });
    group.finish();
}

fn preprocess(c: &mut Criterion) {
    let config = ChannelConfig::default();
    let h = generate_realization(&config, 0).unwrap();
    let transform = CsiTransform::new(config.n_sc(), 28, config.n_tx).unwrap();
    c.bench_function("preprocess 624 subcarriers", |b| b.iter(|| transform.preprocess(black_box(&h)).unwrap()));
    let parts = transform.preprocess(&h).unwrap();
    c.bench_function("postprocess 624 subcarriers", |b| {
        b.iter(|| transform.postprocess(black_box(&parts), 1, config.subcarrier_spacing).unwrap())
    });
}

criterion_group!(benches, conv, quantize, step, preprocess);
criterion_main!(benches);
