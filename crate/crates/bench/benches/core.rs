use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nsbform::diagnostics::bound_constants;
use nsbform::rotations::{expm_so3, logm_so3, Vec3};
use nsbform::simulator::Simulator;
use nsbform_bench::fixture;

fn rotations(c: &mut Criterion) {
    let d = Vec3::new(0.3, -1.1, 2.0);
    let r = expm_so3(&d);
    c.bench_function("expm_so3", |b| b.iter(|| expm_so3(black_box(&d))));
    c.bench_function("logm_so3", |b| b.iter(|| logm_so3(black_box(&r))));
}

fn simulation(c: &mut Criterion) {
    for name in ["spiral_mission.json", "six_vehicle.json"] {
        let cfg = fixture(name);
        let sim = Simulator::new(&cfg).unwrap();
        let start = sim.initial_world().unwrap();
        c.bench_function(&format!("step/{}", cfg.name), |b| {
            b.iter_batched(
                || (start.clone(), Vec::new()),
                |(mut w, mut events)| sim.step(&mut w, &mut events).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    let mut cfg = fixture("spiral_mission.json");
    cfg.sim.duration = 10.0;
    let mut group = c.benchmark_group("run");
    group.sample_size(10);
    group.bench_function("spiral_mission_10s", |b| b.iter(|| nsbform::simulator::run(black_box(&cfg)).unwrap()));
    group.finish();
}

fn bounds(c: &mut Criterion) {
    let cfg = fixture("spiral_mission.json");
    let derived = cfg.prepare().unwrap();
    let mut group = c.benchmark_group("diagnostics");
    group.sample_size(10);
    group.bench_function("bound_constants", |b| b.iter(|| bound_constants(black_box(&cfg), &derived).unwrap()));
    group.finish();
}

criterion_group!(benches, rotations, simulation, bounds);
criterion_main!(benches);
