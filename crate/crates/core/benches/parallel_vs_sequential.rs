use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lsnif::fixtures;
use lsnif::model::ModelConfig;
use lsnif::renderer::{cornell, render, RenderConfig};
use lsnif::training::{sample_external_ray, TrainConfig, Trainer};
use lsnif::{Material, Parallelism, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn trainer(policy: Parallelism) -> Trainer {
    let train = TrainConfig { batch: 4096, policy, ..Default::default() };
    let mesh = Arc::new(fixtures::uv_sphere(1.0, 48, 24));
    Trainer::new(mesh, vec![Material::diffuse(Vec3::ONE)], ModelConfig::default(), train).unwrap()
}

fn bench(c: &mut Criterion) {
    let base = trainer(Parallelism::Sequential);
    let model = base.model().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rays: Vec<_> = (0..4096).map(|_| sample_external_ray(&model.frame.aabb, &mut rng)).collect();

    let mut group = c.benchmark_group("inference_4096_rays");
    for (name, policy) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.predict(&rays, policy)));
    }
    group.finish();

    let mut group = c.benchmark_group("train_step_batch_4096");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        let mut t = trainer(policy);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| t.step().unwrap()));
    }
    group.finish();

    let scene = cornell::cornell_scene(Some(Arc::new(model))).unwrap();
    let mut group = c.benchmark_group("render_cornell_32x32_4spp");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        let config = RenderConfig { width: 32, height: 32, spp: 4, policy, ..Default::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| render(&scene, &config)));
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
