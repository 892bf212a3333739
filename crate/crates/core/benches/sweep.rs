// SPDX-License-Identifier: Apache-2.0

//! Sequential vs parallel execution of the data-parallel paths: the QPS
//! sweep and the JCT profiling grid.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prefillsim::exec::EngineVariant;
use prefillsim::jct;
use prefillsim::par::Parallelism;
use prefillsim::sim::{self, SimConfig};
use prefillsim::workload;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn qps_sweep(c: &mut Criterion) {
    let trace = workload::gen_post_recommendation(workload::DEFAULT_SEED);
    let mut config =
        SimConfig::from_presets("llama-3.1-8b", "l4", EngineVariant::PrefillOnlyHybrid).expect("bundled presets");
    let mut group = c.benchmark_group("qps_sweep");
    group.sample_size(10);
    for (name, par) in MODES {
        config.parallelism = par;
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, config| {
            b.iter(|| sim::sweep_qps(&trace, config, &sim::DEFAULT_MULTIPLIERS).expect("sweep"))
        });
    }
    group.finish();
}

fn profile_grid(c: &mut Criterion) {
    let config =
        SimConfig::from_presets("qwen-32b-fp8", "a100-40gb", EngineVariant::PrefillOnlyHybrid).expect("bundled presets");
    let engine = config.engine().expect("engine");
    let mut group = c.benchmark_group("profile_grid");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| jct::profile_grid(&engine, workload::CREDIT_RANGE.1, None, par).expect("grid"))
        });
    }
    group.finish();
}

criterion_group!(benches, qps_sweep, profile_grid);
criterion_main!(benches);
