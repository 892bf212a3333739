// SPDX-License-Identifier: Apache-2.0

use prefillsim::exec::EngineVariant;
use prefillsim::par::Parallelism;
use prefillsim::scheduler::Policy;
use prefillsim::sim::{self, SimConfig};
use prefillsim::workload;

fn config(model: &str, gpu: &str, variant: EngineVariant) -> SimConfig {
    SimConfig::from_presets(model, gpu, variant).unwrap()
}

#[test]
fn hybrid_beats_tensor_parallel_on_credit() {
    // Two GPUs either way: two hybrid instances or one TP(2) instance.
    let trace = workload::gen_credit_verification(workload::DEFAULT_SEED);
    let model = "llama-3.3-70b-fp8";
    let hybrid = sim::saturation_throughput(&trace, &config(model, "h100-pcie", EngineVariant::PrefillOnlyHybrid)).unwrap();
    let nvlink = sim::saturation_throughput(&trace, &config(model, "h100-nvlink", EngineVariant::TensorParallel(2))).unwrap();
    let pcie = sim::saturation_throughput(&trace, &config(model, "h100-pcie", EngineVariant::TensorParallel(2))).unwrap();
    assert!(hybrid > nvlink && nvlink > pcie, "{hybrid} {nvlink} {pcie}");
}

#[test]
fn calibrated_srjf_no_worse_than_fifo_at_high_load() {
    let trace = workload::gen_post_recommendation(workload::DEFAULT_SEED);
    let mut c = config("llama-3.1-8b", "l4", EngineVariant::PrefillOnlyHybrid);
    c.num_instances = 1;
    let qps = 2.0 * sim::saturation_throughput(&trace, &c).unwrap();
    c.policy = Policy::Fifo;
    let fifo = sim::run_at(&trace, &c, Some(qps)).unwrap();
    c.policy = Policy::calibrated(0.5);
    let cal = sim::run_at(&trace, &c, Some(qps)).unwrap();
    assert!(cal.mean_latency <= fifo.mean_latency);
    assert!(cal.cache_hit_tokens >= fifo.cache_hit_tokens);
}

#[test]
fn every_request_completes_once_after_arrival() {
    let trace = workload::gen_post_recommendation(3);
    for variant in [
        EngineVariant::PrefillOnlyHybrid,
        EngineVariant::PagedAttention,
        EngineVariant::ChunkedPrefill(8192),
        EngineVariant::TensorParallel(2),
        EngineVariant::PipelineParallel(2),
    ] {
        let c = config("llama-3.1-8b", "l4", variant);
        let qps = sim::saturation_throughput(&trace, &c).unwrap();
        let report = sim::run_at(&trace, &c, Some(qps)).unwrap();
        let mut ids: Vec<u64> = report.records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..trace.requests.len() as u64).collect::<Vec<_>>(), "{variant}");
        for r in &report.records {
            assert!(r.start >= r.arrival && r.completion > r.start, "{variant} {r:?}");
            assert!(r.n_cached <= r.n_input);
        }
        assert!(report.utilization.iter().all(|&u| (0.0..=1.0 + 1e-9).contains(&u)), "{variant}");
    }
}

#[test]
fn sweep_is_identical_sequential_and_parallel() {
    let trace = workload::gen_credit_verification(1);
    let mut c = config("qwen-32b-fp8", "a100-40gb", EngineVariant::PrefillOnlyHybrid);
    c.parallelism = Parallelism::Sequential;
    let a = sim::sweep_qps(&trace, &c, &sim::DEFAULT_MULTIPLIERS).unwrap();
    c.parallelism = Parallelism::Parallel;
    let b = sim::sweep_qps(&trace, &c, &sim::DEFAULT_MULTIPLIERS).unwrap();
    let csv = |rows: &[(f64, sim::SimReport)]| sim::reports_csv(rows.iter().map(|(_, r)| r));
    assert_eq!(csv(&a), csv(&b));
}
