use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use worldtrack::adapt::{tta_optimize, AdaptState};
use worldtrack::camera::{estimate_focal_weiszfeld, solve_pnp_ransac, CameraSolverConfig, Correspondences2D3D};
use worldtrack::geometry::assemble_trajectories;
use worldtrack::losses::LossWeights;
use worldtrack::metrics::{eval_tracking, EvalOptions};
use worldtrack::oracle::{generate_scene, render, Preset};
use worldtrack_bench::{corrupted, fixture};

fn camera(c: &mut Criterion) {
    let seq = fixture(Preset::DynCamDynScene, 4);
    let first = &seq.recon_pointmaps[0];
    c.bench_function("weiszfeld_focal", |b| b.iter(|| estimate_focal_weiszfeld(first, seq.grid, 10).unwrap()));
    let (corr, _) = Correspondences2D3D::from_pointmap(&seq.recon_pointmaps[3]).unwrap();
    let cfg = CameraSolverConfig::default();
    c.bench_function("pnp_ransac", |b| b.iter(|| solve_pnp_ransac(&corr, &seq.intrinsics, &cfg.ransac).unwrap()));
}

fn oracle(c: &mut Criterion) {
    let spec = generate_scene(Preset::DynCamDynScene, 0);
    c.bench_function("render_24_frames", |b| b.iter(|| render(&spec).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let seq = fixture(Preset::DynCamDynScene, 24);
    let noisy = corrupted(&seq);
    let pred = assemble_trajectories(&noisy.tracking_pointmaps, &seq.queries).unwrap();
    let opts = EvalOptions::default();
    c.bench_function("eval_tracking", |b| {
        b.iter(|| eval_tracking(&pred, &seq.tracks3d_world, &seq.dynamic_mask, &opts).unwrap())
    });
}

fn adaptation(c: &mut Criterion) {
    let seq = fixture(Preset::DynCamDynScene, 24);
    let noisy = corrupted(&seq);
    let tracks = seq.track_supervision().unwrap();
    let depth = seq.depth_supervision().unwrap();
    let solver = CameraSolverConfig::default();
    c.bench_function("tta_10_steps", |b| {
        b.iter_batched(
            || {
                let mut s = AdaptState::new(noisy.tracking_pointmaps.clone(), noisy.recon_pointmaps.clone());
                s.steps = 10;
                s
            },
            |s| tta_optimize(s, &tracks, &depth, &LossWeights::default(), &solver).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = camera, oracle, metrics, adaptation
}
criterion_main!(benches);
