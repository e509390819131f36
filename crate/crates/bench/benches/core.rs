use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lio_core::correspondence::{build_index, loss_gradient, match_nearest, total_loss, LossWeights};
use lio_core::kdtree::KdIndex;
use lio_core::nn::{EncoderConfig, Encoder, Tensor};
use lio_core::preprocess::{adaptive_voxel_downsample, PreprocessedCloud, VoxelParams};
use lio_core::range_image::{compute_normal_map, project, ProjectionConfig};
use lio_core::registration::{register, RegistrationOptions};
use lio_core::synth::{sample_scene, SceneSpec};
use lio_core::{Pose, PoseVector, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn room(seed: u64) -> PreprocessedCloud {
    let room = sample_scene(&SceneSpec::random_room(seed)).unwrap();
    PreprocessedCloud::new(room.cloud.points, room.cloud.normals.unwrap())
}

fn kdtree(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<Vec3> = (0..10240)
        .map(|_| Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0)))
        .collect();
    let queries: Vec<Vec3> = points.iter().map(|p| p + Vec3::new(0.05, -0.03, 0.01)).collect();
    c.bench_function("kdtree build 10240", |b| b.iter(|| KdIndex::build(black_box(&points)).unwrap()));
    let index = KdIndex::build(&points).unwrap();
    c.bench_function("kdtree 10240 nearest queries", |b| {
        b.iter(|| queries.iter().map(|q| index.nearest(q).dist_sq).sum::<f64>())
    });
}

fn range_image(c: &mut Criterion) {
    let cloud = sample_scene(&SceneSpec::random_room(2)).unwrap().cloud;
    let cfg = ProjectionConfig::hdl64();
    c.bench_function("project hdl64", |b| b.iter(|| project(black_box(&cloud), &cfg).unwrap()));
    let vertex = project(&cloud, &cfg).unwrap();
    c.bench_function("normal map hdl64", |b| b.iter(|| compute_normal_map(black_box(&vertex))));
}

fn preprocess(c: &mut Criterion) {
    let cloud = room(3);
    let params = VoxelParams { target: 2048, ..VoxelParams::default() };
    c.bench_function("adaptive voxel K=2048", |b| {
        b.iter(|| adaptive_voxel_downsample(&cloud.points, &cloud.normals, &params).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let target = room(4);
    let truth = Pose::new(Vec3::new(0.0, 0.0, 0.03), Vec3::new(0.2, -0.1, 0.0));
    let source = target.transformed(&truth.inverse());
    let index = build_index(&target).unwrap();
    let w = LossWeights::default();
    c.bench_function("match nearest", |b| b.iter(|| match_nearest(&source, &index, &target, 1.0).unwrap()));
    let pairs = match_nearest(&source, &index, &target, 1.0).unwrap();
    c.bench_function("total loss", |b| b.iter(|| total_loss(black_box(&pairs), &w).unwrap()));
    c.bench_function("loss gradient", |b| b.iter(|| loss_gradient(&PoseVector::zeros(), &source, &pairs, &w)));
    let opts = RegistrationOptions::default();
    c.bench_function("register room pair", |b| b.iter(|| register(&source, &target, &Pose::identity(), &opts).unwrap()));
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig::desk();
    let encoder = Encoder::new("bench", &cfg, &mut rng);
    let data = (0..cfg.in_channels * 16 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(&[cfg.in_channels, 16, 64], data).unwrap();
    c.bench_function("encoder forward 16x64", |b| b.iter(|| encoder.encode(black_box(&x)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kdtree, range_image, preprocess, losses, encoder
}
criterion_main!(benches);
