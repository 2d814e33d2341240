//! Sequential vs parallel throughput for trace generation, plan execution and
//! multi-system comparison. Without the `parallel` feature both variants run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use epplan::executor::execute_with;
use epplan::synthgen::{self, Preset};
use epplan::systems::{compare, RunConfig, System};
use epplan::{ExecMode, InferenceCache, Plan, PlanAction};
use std::hint::black_box;

const FRAMES: u32 = 12_800;
const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn mode_name(mode: ExecMode) -> &'static str {
    match mode {
        ExecMode::Sequential => "sequential",
        ExecMode::Parallel => "parallel",
    }
}

fn generation(c: &mut Criterion) {
    let spec = Preset::Q2.spec(FRAMES, 0);
    let mut group = c.benchmark_group("generate");
    group.throughput(Throughput::Elements(u64::from(FRAMES)));
    for mode in MODES {
        group.bench_with_input(
            BenchmarkId::from_parameter(mode_name(mode)),
            &mode,
            |b, &mode| b.iter(|| synthgen::generate_with(black_box(&spec), mode).unwrap()),
        );
    }
    group.finish();
}

fn execution(c: &mut Criterion) {
    let store = synthgen::generate(&Preset::Q2.spec(FRAMES, 0)).unwrap();
    let query = Preset::Q2.query();
    // A new exit point every 64 frames: 200 chunks.
    let actions: Vec<PlanAction> = (0..FRAMES)
        .map(|f| PlanAction::UseEp(f / 64 % 5 + 1))
        .collect();
    let plan = Plan::from_frame_actions(&actions);
    let mut group = c.benchmark_group("execute");
    group.throughput(Throughput::Elements(u64::from(FRAMES)));
    for mode in MODES {
        group.bench_with_input(
            BenchmarkId::from_parameter(mode_name(mode)),
            &mode,
            |b, &mode| {
                b.iter(|| {
                    let mut cache = InferenceCache::new(&store);
                    execute_with(&store, &mut cache, black_box(&plan), &query, mode).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn comparison(c: &mut Criterion) {
    let store = synthgen::generate(&Preset::Q3.spec(FRAMES, 0)).unwrap();
    let query = Preset::Q3.query();
    let mut group = c.benchmark_group("compare");
    group.sample_size(10);
    for mode in MODES {
        let config = RunConfig {
            mode,
            ..RunConfig::default()
        };
        group.bench_with_input(
            BenchmarkId::from_parameter(mode_name(mode)),
            &config,
            |b, config| b.iter(|| compare(&store, &query, &System::ALL, config).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, generation, execution, comparison);
criterion_main!(benches);
