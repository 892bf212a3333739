// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation of a fleet of prefill engines.
//!
//! Requests are routed to an instance by user id. Each instance owns a
//! waiting queue, a prefix cache and an engine, and admits one request at
//! a time (pipeline-parallel engines admit the next one after a stage's
//! share of the work). A request's KV enters the cache when it completes.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use crate::cache::{BlockHash, CacheConfig, PrefixCache, DEFAULT_BLOCK_TOKENS};
use crate::error::{Error, Result};
use crate::exec::{CostParams, Engine, EngineVariant};
use crate::geometry::{GpuSpec, ModelGeometry};
use crate::jct::JctProfile;
use crate::par::{self, Parallelism};
use crate::presets;
use crate::scheduler::{schedule_next, Policy, WaitingRequest, DEFAULT_LAMBDA};
use crate::workload::{self, Trace};

pub const DEFAULT_MULTIPLIERS: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 3.0, 4.0];

/// Total GPUs behind the default fleet.
pub const DEFAULT_FLEET_GPUS: u64 = 2;

pub const REPORT_CSV_HEADER: &str =
    "variant,policy,lambda,qps,mean_latency_s,p99_latency_s,throughput_rps,cache_hit_requests,cache_hit_tokens,utilization";

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub num_instances: usize,
    pub variant: EngineVariant,
    pub policy: Policy,
    /// Per-instance cache. Derived from the variant's memory model when unset.
    pub cache: Option<CacheConfig>,
    pub cost: CostParams,
    pub geometry: ModelGeometry,
    pub gpu: GpuSpec,
    /// JCT profile for scheduling. Calibrated on the engine when unset.
    pub profile: Option<JctProfile>,
    /// Longest request the cache must leave room for. Defaults to the
    /// trace's longest request.
    pub user_mil: Option<u64>,
    pub seed: u64,
    pub interleave_users: bool,
    pub parallelism: Parallelism,
}

impl SimConfig {
    /// Presets by name, the variant's native policy and a fleet of
    /// [`DEFAULT_FLEET_GPUS`] GPUs.
    pub fn from_presets(model: &str, gpu: &str, variant: EngineVariant) -> Result<Self> {
        variant.validate()?;
        let geometry = presets::model(model)?;
        let (gpu, knobs) = presets::gpu_with_knobs(gpu)?;
        let cost = CostParams::derive(&geometry, &gpu, &knobs);
        Ok(SimConfig {
            num_instances: default_instances(variant),
            variant,
            policy: native_policy(variant, DEFAULT_LAMBDA),
            cache: None,
            cost,
            geometry,
            gpu,
            profile: None,
            user_mil: None,
            seed: workload::DEFAULT_SEED,
            interleave_users: false,
            parallelism: Parallelism::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 {
            return Err(Error::config("num_instances must be >= 1"));
        }
        self.variant.validate()?;
        self.policy.validate()
    }

    pub fn engine(&self) -> Result<Engine> {
        Engine::new(self.variant, self.geometry.clone(), self.gpu.clone(), self.cost)
    }
}

pub fn default_instances(variant: EngineVariant) -> usize {
    (DEFAULT_FLEET_GPUS / variant.gpus()).max(1) as usize
}

/// Cache-aware SRJF for the prefill-only engine, FIFO for the baselines.
pub fn native_policy(variant: EngineVariant, lambda: f64) -> Policy {
    match variant {
        EngineVariant::PrefillOnlyHybrid => Policy::calibrated(lambda),
        _ => Policy::Fifo,
    }
}

/// Sticky round-robin assignment of users to instances.
pub fn route(user_id: u64, assignments: &mut HashMap<u64, usize>, next_rr: &mut usize, num_instances: usize) -> usize {
    *assignments.entry(user_id).or_insert_with(|| {
        let i = *next_rr % num_instances;
        *next_rr += 1;
        i
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: u64,
    pub user_id: u64,
    pub instance: usize,
    pub arrival: f64,
    pub start: f64,
    pub completion: f64,
    pub n_input: u64,
    pub n_cached: u64,
    pub exec_time: f64,
}

impl RequestRecord {
    pub fn latency(&self) -> f64 {
        self.completion - self.arrival
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub variant: EngineVariant,
    pub policy: Policy,
    /// Offered arrival rate, when the trace was given one.
    pub qps: Option<f64>,
    /// One record per request, ordered by id.
    pub records: Vec<RequestRecord>,
    pub mean_latency: f64,
    pub p99_latency: f64,
    pub throughput: f64,
    pub cache_hit_tokens: u64,
    pub cache_hit_requests: u64,
    pub utilization: Vec<f64>,
}

impl SimReport {
    pub fn mean_utilization(&self) -> f64 {
        if self.utilization.is_empty() {
            0.0
        } else {
            self.utilization.iter().sum::<f64>() / self.utilization.len() as f64
        }
    }

    pub fn csv_row(&self) -> String {
        let lambda = self.policy.lambda().map(|l| l.to_string()).unwrap_or_default();
        let qps = self.qps.map(|q| format!("{q:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.6}",
            self.variant,
            self.policy,
            lambda,
            qps,
            self.mean_latency,
            self.p99_latency,
            self.throughput,
            self.cache_hit_requests,
            self.cache_hit_tokens,
            self.mean_utilization()
        )
    }
}

pub fn reports_csv<'a>(reports: impl IntoIterator<Item = &'a SimReport>) -> String {
    let mut out = String::new();
    writeln!(out, "{REPORT_CSV_HEADER}").unwrap();
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Instance {
    queue: Vec<WaitingRequest>,
    cache: PrefixCache,
    /// Earliest time the engine can admit another request.
    free_at: f64,
    busy: f64,
}

/// Requests whose length exceeds the engine's max input length.
pub fn check_capacity(trace: &Trace, engine: &Engine) -> Result<()> {
    let ids: Vec<u64> = trace
        .requests
        .iter()
        .filter(|r| r.n_input() > engine.mil)
        .map(|r| r.id)
        .collect();
    if ids.is_empty() {
        Ok(())
    } else {
        Err(Error::Capacity { mil: engine.mil, ids })
    }
}

fn resolve_profile(config: &SimConfig, engine: &Engine, user_mil: u64) -> Result<JctProfile> {
    if let Some(p) = config.profile {
        return Ok(p);
    }
    match config.policy {
        Policy::Fifo => Ok(JctProfile {
            coef_input: 1.0,
            coef_cached: -1.0,
            intercept: 0.0,
            fit_r2: 1.0,
        }),
        _ => JctProfile::calibrate(engine, user_mil, Parallelism::Sequential),
    }
}

pub fn run(trace: &Trace, config: &SimConfig) -> Result<SimReport> {
    run_at(trace, config, None)
}

/// [`run`], recording `qps` as the offered rate in the report.
pub fn run_at(trace: &Trace, config: &SimConfig, qps: Option<f64>) -> Result<SimReport> {
    config.validate()?;
    trace.validate()?;
    let engine = config.engine()?;
    check_capacity(trace, &engine)?;
    let report = |records: Vec<RequestRecord>, utilization: Vec<f64>| {
        summarize(config, qps, records, utilization)
    };
    if trace.requests.is_empty() {
        return Ok(report(Vec::new(), vec![0.0; config.num_instances]));
    }
    let user_mil = config.user_mil.unwrap_or_else(|| trace.max_len()).clamp(1, engine.mil);
    let cache_config = match config.cache {
        Some(c) => c,
        None => derived_cache(config, user_mil)?,
    };
    let profile = resolve_profile(config, &engine, user_mil)?;
    let bt = cache_config.block_tokens;
    let mut index = HashMap::with_capacity(trace.requests.len());
    for (i, r) in trace.requests.iter().enumerate() {
        if index.insert(r.id, i).is_some() {
            return Err(Error::config(format!("duplicate request id {}", r.id)));
        }
    }
    let chains: Vec<Arc<[BlockHash]>> = par::map(config.parallelism, &trace.requests, |r| {
        crate::cache::block_hashes(&r.tokens, bt).into()
    });

    let mut instances: Vec<Instance> = (0..config.num_instances)
        .map(|_| Instance {
            queue: Vec::new(),
            cache: PrefixCache::new(cache_config),
            free_at: 0.0,
            busy: 0.0,
        })
        .collect();
    let mut assignments = HashMap::new();
    let mut next_rr = 0usize;
    // (completion time, request index, instance)
    let mut completions: BinaryHeap<Reverse<(Time, usize, usize)>> = BinaryHeap::new();
    let mut records: Vec<Option<RequestRecord>> = vec![None; trace.requests.len()];
    let mut next_arrival = 0usize;
    let n = trace.requests.len();

    loop {
        let t_arrival = trace.requests.get(next_arrival).map(|r| r.arrival);
        let t_completion = completions.peek().map(|Reverse((t, _, _))| t.0);
        let t_free = instances
            .iter()
            .filter(|i| !i.queue.is_empty())
            .map(|i| i.free_at)
            .min_by(f64::total_cmp);
        let Some(now) = [t_arrival, t_completion, t_free].into_iter().flatten().min_by(f64::total_cmp) else {
            break;
        };

        // Completions first so their KV is visible to same-time arrivals.
        while let Some(Reverse((t, idx, inst))) = completions.peek().copied() {
            if t.0 > now {
                break;
            }
            completions.pop();
            instances[inst].cache.insert_chain(&chains[idx], t.0);
        }
        while next_arrival < n && trace.requests[next_arrival].arrival <= now {
            let r = &trace.requests[next_arrival];
            let inst = route(r.user_id, &mut assignments, &mut next_rr, config.num_instances);
            let i = &mut instances[inst];
            let w = WaitingRequest::admit(r.clone(), chains[next_arrival].clone(), &i.cache, &profile);
            i.queue.push(w);
            next_arrival += 1;
        }
        for (inst, i) in instances.iter_mut().enumerate() {
            while i.free_at <= now && !i.queue.is_empty() {
                let k = schedule_next(&i.queue, &i.cache, &profile, config.policy, now)?;
                let w = i.queue.swap_remove(k);
                let idx = index[&w.id()];
                let n_cached = i.cache.match_chain(&w.chain);
                // Mark the reused prefix as recently used.
                i.cache.insert_chain(&w.chain[..(n_cached / bt) as usize], now);
                let exec_time = engine.time(w.n_input(), n_cached)?;
                let occupancy = engine.occupancy(exec_time, config.cost.pp_bubble_fraction);
                i.free_at = now + occupancy;
                i.busy += occupancy;
                completions.push(Reverse((Time(now + exec_time), idx, inst)));
                records[idx] = Some(RequestRecord {
                    id: w.id(),
                    user_id: w.request.user_id,
                    instance: inst,
                    arrival: w.arrival,
                    start: now,
                    completion: now + exec_time,
                    n_input: w.n_input(),
                    n_cached,
                    exec_time,
                });
            }
        }
    }

    let mut records: Vec<RequestRecord> = records.into_iter().map(|r| r.expect("every request served")).collect();
    let first = records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let last = records.iter().map(|r| r.completion).fold(0.0, f64::max);
    let span = last - first;
    let utilization = instances
        .iter()
        .map(|i| if span > 0.0 { (i.busy / span).min(1.0) } else { 0.0 })
        .collect();
    records.sort_by_key(|r| r.id);
    Ok(report(records, utilization))
}

fn summarize(config: &SimConfig, qps: Option<f64>, records: Vec<RequestRecord>, utilization: Vec<f64>) -> SimReport {
    let mut lat: Vec<f64> = records.iter().map(RequestRecord::latency).collect();
    lat.sort_by(f64::total_cmp);
    let served = records.len();
    let mean_latency = if served > 0 { lat.iter().sum::<f64>() / served as f64 } else { 0.0 };
    let first = records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let last = records.iter().map(|r| r.completion).fold(f64::NEG_INFINITY, f64::max);
    let throughput = if served > 0 && last > first { served as f64 / (last - first) } else { 0.0 };
    SimReport {
        variant: config.variant,
        policy: config.policy,
        qps,
        mean_latency,
        p99_latency: percentile(&lat, 99.0),
        throughput,
        cache_hit_tokens: records.iter().map(|r| r.n_cached).sum(),
        cache_hit_requests: records.iter().filter(|r| r.n_cached > 0).count() as u64,
        utilization,
        records,
    }
}

fn native_config(config: &SimConfig) -> SimConfig {
    let lambda = config.policy.lambda().unwrap_or(DEFAULT_LAMBDA);
    SimConfig {
        policy: match (config.variant, config.policy) {
            (EngineVariant::PrefillOnlyHybrid, p @ Policy::SrjfCalibrated { .. }) => p,
            (v, _) => native_policy(v, lambda),
        },
        ..config.clone()
    }
}

/// Requests per second when the whole trace arrives at once, under the
/// variant's native policy.
pub fn saturation_throughput(trace: &Trace, config: &SimConfig) -> Result<f64> {
    Ok(run(&trace.all_at_once(), &native_config(config))?.throughput)
}

/// Run the trace at each multiple of the saturation throughput.
pub fn sweep_qps(trace: &Trace, config: &SimConfig, multipliers: &[f64]) -> Result<Vec<(f64, SimReport)>> {
    if let Some(m) = multipliers.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::config(format!("multiplier must be positive, got {m}")));
    }
    let x = saturation_throughput(trace, config)?;
    if !(x > 0.0) {
        return Err(Error::config("trace has no measurable saturation throughput"));
    }
    let rates: Vec<f64> = multipliers.iter().map(|m| m * x).collect();
    let inner = SimConfig {
        parallelism: Parallelism::Sequential,
        ..config.clone()
    };
    par::try_map(config.parallelism, &rates, |&qps| {
        let t = workload::poisson_arrivals_with(trace, qps, config.seed, config.interleave_users)?;
        Ok((qps, run_at(&t, &inner, Some(qps))?))
    })
}

/// One run per lambda at a fixed arrival rate.
pub fn lambda_sweep(trace: &Trace, config: &SimConfig, qps: f64, lambdas: &[f64]) -> Result<Vec<SimReport>> {
    let scoring = match config.policy {
        Policy::SrjfCalibrated { scoring, .. } => scoring,
        other => return Err(Error::config(format!("lambda sweep needs srjf-calibrated, got {other}"))),
    };
    let t = workload::poisson_arrivals_with(trace, qps, config.seed, config.interleave_users)?;
    par::try_map(config.parallelism, lambdas, |&lambda| {
        let c = SimConfig {
            policy: Policy::SrjfCalibrated { lambda, scoring },
            parallelism: Parallelism::Sequential,
            ..config.clone()
        };
        run_at(&t, &c, Some(qps))
    })
}

/// Default cache for a variant when the expected longest request is
/// `user_mil` tokens.
pub fn derived_cache(config: &SimConfig, user_mil: u64) -> Result<CacheConfig> {
    let tokens = config.variant.cache_capacity(&config.geometry, &config.gpu, user_mil)?;
    CacheConfig::new(DEFAULT_BLOCK_TOKENS, tokens)
}
