//! Parallel vs sequential evaluation of the planner's hot loops on the
//! demo workcell.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use laserguide::arm::ArmModel;
use laserguide::demo;
use laserguide::plan::{coverage_matrix, plan, PlanConfig};
use laserguide::Execution;

fn modes() -> [(&'static str, Execution); 2] {
    [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)]
}

fn coverage(c: &mut Criterion) {
    let (cell, arm, rig) = (demo::workcell(), ArmModel::default_6r(), demo::calibrated_rig());
    let mut g = c.benchmark_group("coverage_matrix");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| coverage_matrix(&cell, &arm, &rig, exec))
        });
    }
    g.finish();
}

fn full_plan(c: &mut Criterion) {
    let (cell, arm, rig) = (demo::workcell(), ArmModel::default_6r(), demo::calibrated_rig());
    let mut g = c.benchmark_group("plan");
    g.sample_size(10);
    for (name, exec) in modes() {
        let cfg = PlanConfig {
            execution: exec,
            ..PlanConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| plan(&cell, &arm, &rig, cfg))
        });
    }
    g.finish();
}

criterion_group!(benches, coverage, full_plan);
criterion_main!(benches);
