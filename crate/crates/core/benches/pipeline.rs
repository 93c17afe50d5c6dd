//! One worker versus the full pool on the two parallel hot paths: building a
//! batch of augmented view pairs and one forward/backward training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pointsmile::augment::{make_batch_pairs, AugmentConfig, Curriculum};
use pointsmile::geometry::{generate_shapes, PointCloud, ShapeConfig};
use pointsmile::loss::LossConfig;
use pointsmile::model::{ModelConfig, ModelParams};
use pointsmile::par;
use pointsmile::train::batch_gradients;

fn pools() -> [(&'static str, usize); 2] {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    [("one_worker", 1), ("all_workers", all)]
}

fn bench(c: &mut Criterion) {
    let set = generate_shapes(&ShapeConfig::with_classes(6, 3, 256, 0)).unwrap();
    let clouds: Vec<PointCloud> = set.clouds.into_iter().take(16).map(|c| c.cloud).collect();
    let batch: Vec<(u64, &PointCloud)> = clouds.iter().enumerate().map(|(i, c)| (i as u64, c)).collect();
    let cfg = AugmentConfig::default();
    let cur = Curriculum::Fixed(0.5);
    let params = ModelParams::<f32>::init(ModelConfig::default(), 0).unwrap();
    let pairs = make_batch_pairs(&batch, &cur, 0, 0, 0, &cfg, Some(256)).unwrap();
    let loss = LossConfig::default();

    let mut g = c.benchmark_group("augment_batch");
    for (name, t) in pools() {
        g.bench_with_input(BenchmarkId::new(name, t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || make_batch_pairs(&batch, &cur, 0, 0, 0, &cfg, Some(256)).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, t) in pools() {
        g.bench_with_input(BenchmarkId::new(name, t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || batch_gradients(&params, &pairs, &loss).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
