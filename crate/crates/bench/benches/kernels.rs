use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pvsnet::fusion::{geometric_filter, DepthView, FusionConfig};
use pvsnet::model::{ForwardOptions, ModelConfig, PvsNet};
use pvsnet::synthetic::{Dataset, DatasetSpec};
use pvsnet::tensor::{conv2d, conv3d, no_grad, ConvSpec, Tensor};
use pvsnet::training::{top_sources, view_set};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn convolutions(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x2 = random(&[16, 64, 80], &mut rng);
    let w2 = random(&[16, 16, 3, 3], &mut rng);
    let s2 = ConvSpec::same(16, 16, 3, 1);
    c.bench_function("conv2d 16->16 64x80", |b| b.iter(|| conv2d(black_box(&x2), &s2, &w2, None).unwrap()));
    let x3 = random(&[8, 16, 16, 20], &mut rng);
    let w3 = random(&[8, 8, 3, 3, 3], &mut rng);
    let s3 = ConvSpec::same(8, 8, 3, 1);
    c.bench_function("conv3d 8->8 16x16x20", |b| b.iter(|| conv3d(black_box(&x3), &s3, &w3, None).unwrap()));
    c.bench_function("conv3d backward 8->8 16x16x20", |b| {
        b.iter(|| {
            let x = Tensor::param(x3.shape(), x3.to_vec()).unwrap();
            conv3d(&x, &s3, &w3, None).unwrap().sum().backward().unwrap();
        })
    });
}

fn pipeline(c: &mut Criterion) {
    let data = Dataset::generate(&DatasetSpec { seed: 1, train_scenes: 1, val_scenes: 0, ..DatasetSpec::default() }).unwrap();
    let scene = &data.train[0];
    let model = PvsNet::new(ModelConfig { depth_hypotheses: 16, ..ModelConfig::default() }, 0).unwrap();
    let views = view_set(scene, 0, &top_sources(scene, 0, 4).unwrap()).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("forward 5 views D=16", |b| {
        b.iter(|| no_grad(|| model.forward(black_box(&views), &ForwardOptions::eval())).unwrap())
    });
    group.bench_function("forward 5 views D=16 cascade", |b| {
        b.iter(|| no_grad(|| model.forward(black_box(&views), &ForwardOptions::eval().with_cascade(true))).unwrap())
    });
    let (h, w) = (scene.height(), scene.width());
    let depth_views: Vec<DepthView> = scene
        .views
        .iter()
        .map(|v| DepthView::new(v.camera, v.levels[0].depth.clone(), v.levels[0].mask.clone(), h, w, &v.image, h, w).unwrap())
        .collect();
    group.bench_function("geometric filter 20 views", |b| b.iter(|| geometric_filter(black_box(&depth_views), &FusionConfig::default())));
    group.finish();
}

criterion_group!(benches, convolutions, pipeline);
criterion_main!(benches);
