use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;

use duofield::field::BranchOutput;
use duofield::render::{composite, BranchColumns, RaySamples};
use duofield::rng::{self, Substream};
use duofield::scene::{Ray, Vec3};
use duofield::train::{TrainConfig, Trainer};

fn hash_grid(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let mut rng = rng::stream(0, Substream::Init, 0);
    let grid = duofield::encoding::HashGrid::new(cfg.field.static_grid.clone(), &mut rng).unwrap();
    let n = 225 * 36;
    let points = Array2::from_shape_fn((n, 3), |(i, a)| ((i * 7919 + a * 104_729) % 1000) as f64 / 1000.0);
    c.bench_function("hash_grid_lookup_8100", |b| b.iter(|| black_box(grid.lookup_batch(points.view()))));
    let upstream = Array2::from_elem((n, grid.output_dim()), 1e-3);
    c.bench_function("hash_grid_backward_8100", |b| {
        b.iter_batched(
            || vec![0.0; cfg.field.static_grid.parameter_count()],
            |mut g| {
                grid.backward_batch(points.view(), upstream.view(), &mut g);
                g
            },
            BatchSize::LargeInput,
        )
    });
}

fn compositing(c: &mut Criterion) {
    let ray = Ray { origin: Vec3::zeros(), direction: Vec3::new(0.0, 0.0, 1.0), timestamp: 0.0, pixel: (0, 0), frame_index: 0 };
    let k = 36;
    let samples = RaySamples::new(&ray, (0..k).map(|i| 0.1 + 0.2 * i as f64).collect(), 7.5);
    let out = |i: usize, shadow: f64| BranchOutput {
        sigma: (i % 5) as f64 * 0.7,
        color: [0.2, 0.5, 0.8],
        semantic_logits: vec![0.1, -0.3, 0.4, 0.0],
        shadow,
    };
    let s = BranchColumns::from_outputs(&(0..k).map(|i| out(i, 0.0)).collect::<Vec<_>>(), false);
    let d = BranchColumns::from_outputs(&(0..k).map(|i| out(i + 2, 0.3)).collect::<Vec<_>>(), true);
    c.bench_function("composite_36_samples", |b| b.iter(|| black_box(composite(&samples, s.view(), d.view()))));
}

fn training_step(c: &mut Criterion) {
    let mut trainer = Trainer::new(TrainConfig { init_epochs: 0, steps: Some(u64::MAX / 2), ..TrainConfig::desk() }).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("full_phase_step", |b| b.iter(|| black_box(trainer.step_once().unwrap())));
    group.finish();
}

criterion_group!(benches, hash_grid, compositing, training_step);
criterion_main!(benches);
