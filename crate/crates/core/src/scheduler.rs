// SPDX-License-Identifier: Apache-2.0

//! Picking the next request to run on an idle engine.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::cache::{BlockHash, PrefixCache};
use crate::error::{Error, Result};
use crate::jct::JctProfile;
use crate::workload::Request;

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct WaitingRequest {
    pub request: Request,
    pub arrival: f64,
    /// JCT estimate taken once on arrival, for static SRJF.
    pub frozen_jct: f64,
    /// Block hash chain of the request's tokens.
    pub chain: Arc<[BlockHash]>,
}

impl WaitingRequest {
    /// Enqueue `request`, freezing its JCT against the cache as it is now.
    pub fn admit(request: Request, chain: Arc<[BlockHash]>, cache: &PrefixCache, profile: &JctProfile) -> Self {
        let n_cached = cache.match_chain(&chain);
        WaitingRequest {
            arrival: request.arrival,
            frozen_jct: profile.estimate(request.n_input(), n_cached),
            request,
            chain,
        }
    }

    pub fn id(&self) -> u64 {
        self.request.id
    }

    pub fn n_input(&self) -> u64 {
        self.request.n_input()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scoring {
    /// Cache-miss token count.
    #[default]
    Proxy,
    /// Fitted latency profile.
    Profile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Fifo,
    SrjfStatic,
    SrjfCalibrated { lambda: f64, scoring: Scoring },
}

impl Policy {
    pub fn calibrated(lambda: f64) -> Self {
        Policy::SrjfCalibrated {
            lambda,
            scoring: Scoring::Proxy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::SrjfCalibrated { lambda, .. } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Policy::Fifo => "fifo",
            Policy::SrjfStatic => "srjf",
            Policy::SrjfCalibrated { .. } => "srjf-calibrated",
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            Policy::SrjfCalibrated { lambda, .. } => Some(lambda),
            _ => None,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proxy" => Ok(Scoring::Proxy),
            "profile" => Ok(Scoring::Profile),
            _ => Err(Error::config(format!("unknown scoring '{s}'"))),
        }
    }
}

/// Score of a waiting request under the calibrated policy: estimated JCT
/// less `lambda` times its queueing time. Proxy scores are in miss tokens,
/// so the offset is converted with the profile's per-token cost to keep
/// `lambda` in seconds per second.
pub fn score(
    request: &WaitingRequest,
    n_cached: u64,
    policy: Policy,
    profile: &JctProfile,
    now: f64,
) -> Result<f64> {
    let Policy::SrjfCalibrated { lambda, scoring } = policy else {
        return Err(Error::config(format!("score undefined for policy {policy}")));
    };
    let waited = now - request.arrival;
    if waited < 0.0 {
        return Err(Error::config(format!(
            "request {} scored at {now} before its arrival {}",
            request.id(),
            request.arrival
        )));
    }
    let n_input = request.n_input();
    Ok(match scoring {
        Scoring::Proxy => {
            let miss = crate::jct::proxy_miss(n_input, n_cached)? as f64;
            if lambda == 0.0 {
                miss
            } else {
                miss - lambda * waited / profile.coef_input
            }
        }
        Scoring::Profile => profile.get_jct(n_input, n_cached)? - lambda * waited,
    })
}

/// Index into `queue` of the request to run next. Ties go to the earlier
/// arrival, then the smaller id. The cache is only read.
pub fn schedule_next(
    queue: &[WaitingRequest],
    cache: &PrefixCache,
    profile: &JctProfile,
    policy: Policy,
    now: f64,
) -> Result<usize> {
    if queue.is_empty() {
        return Err(Error::config("schedule_next on an empty queue"));
    }
    let keys: Vec<f64> = match policy {
        Policy::Fifo => vec![0.0; queue.len()],
        Policy::SrjfStatic => queue.iter().map(|r| r.frozen_jct).collect(),
        Policy::SrjfCalibrated { scoring, .. } => {
            if scoring == Scoring::Proxy && !(profile.coef_input > 0.0) {
                return Err(Error::config("proxy scoring needs a positive coef_input"));
            }
            queue
                .iter()
                .map(|r| score(r, cache.match_chain(&r.chain), policy, profile, now))
                .collect::<Result<_>>()?
        }
    };
    let order = |i: usize, j: usize| -> Ordering {
        keys[i]
            .total_cmp(&keys[j])
            .then(queue[i].arrival.total_cmp(&queue[j].arrival))
            .then(queue[i].id().cmp(&queue[j].id()))
    };
    Ok((1..queue.len()).fold(0, |best, i| if order(i, best) == Ordering::Less { i } else { best }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{block_hashes, CacheConfig, DEFAULT_BLOCK_TOKENS};
    use crate::workload::{self, request_tokens};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn profile() -> JctProfile {
        JctProfile {
            coef_input: 1e-4,
            coef_cached: -9e-5,
            intercept: 0.02,
            fit_r2: 1.0,
        }
    }

    fn waiting(id: u64, user: u64, profile_len: u64, len: u64, arrival: f64, cache: &PrefixCache) -> WaitingRequest {
        let tokens = request_tokens(1, user, id, profile_len, len);
        let chain: Arc<[BlockHash]> = block_hashes(&tokens, DEFAULT_BLOCK_TOKENS).into();
        let req = Request {
            id,
            user_id: user,
            tokens,
            arrival,
            profile_len,
        };
        WaitingRequest::admit(req, chain, cache, &profile())
    }

    fn empty_cache() -> PrefixCache {
        PrefixCache::new(CacheConfig::with_capacity(1 << 20))
    }

    /// Serve `queue` to exhaustion on one engine, starting once everything
    /// has arrived, every request taking one second. Returns the service order and the number of hits.
    fn replay(mut queue: Vec<WaitingRequest>, mut cache: PrefixCache, policy: Policy) -> (Vec<u64>, u64) {
        let p = profile();
        let mut now = queue.iter().map(|r| r.arrival).fold(0.0, f64::max);
        let (mut order, mut hits) = (Vec::new(), 0);
        while !queue.is_empty() {
            let i = schedule_next(&queue, &cache, &p, policy, now).unwrap();
            let r = queue.remove(i);
            if cache.match_chain(&r.chain) > 0 {
                hits += 1;
            }
            now += 1.0;
            cache.insert_chain(&r.chain, now);
            order.push(r.id());
        }
        (order, hits)
    }

    const POLICIES: [Policy; 3] = [
        Policy::Fifo,
        Policy::SrjfStatic,
        Policy::SrjfCalibrated {
            lambda: 0.0,
            scoring: Scoring::Proxy,
        },
    ];

    fn example_queue(trace: &workload::Trace, cache: &PrefixCache) -> Vec<WaitingRequest> {
        trace
            .requests
            .iter()
            .map(|r| {
                let chain: Arc<[BlockHash]> = block_hashes(&r.tokens, DEFAULT_BLOCK_TOKENS).into();
                WaitingRequest::admit(r.clone(), chain, cache, &profile())
            })
            .collect()
    }

    #[test]
    fn worked_example_hits_and_orders() {
        let (trace, cap) = workload::worked_example();
        let cache = PrefixCache::new(CacheConfig::with_capacity(cap));
        let queue = example_queue(&trace, &cache);
        let (a, b, c, d) = (0, 1, 2, 3);
        let want = [(vec![a, b, c, d], 1), (vec![a, c, b, d], 1), (vec![a, d, c, b], 2)];
        for (policy, want) in POLICIES.into_iter().zip(want) {
            assert_eq!(replay(queue.clone(), cache.clone(), policy), want, "{policy}");
        }
        for scoring in [Scoring::Proxy, Scoring::Profile] {
            let p = Policy::SrjfCalibrated { lambda: 0.0, scoring };
            assert_eq!(replay(queue.clone(), cache.clone(), p).1, 2);
        }
    }

    /// Search block-aligned lengths for fixtures that reproduce the
    /// example's outcome: A prefixes D, B and C share a prefix, and the
    /// cache holds one request.
    fn search(lengths: &[u64], shared: &[u64]) -> Vec<[u64; 5]> {
        let mut found = Vec::new();
        for &a in lengths {
            for &c in lengths.iter().filter(|&&c| c > a) {
                for &b in lengths.iter().filter(|&&b| b > c) {
                    for &d in lengths.iter().filter(|&&d| d > b) {
                        for &s in shared.iter().filter(|&&s| s < c) {
                            let reqs = [(0, 0, a, a), (1, 1, s, b), (2, 1, s, c), (3, 0, a, d)];
                            let cache = PrefixCache::new(CacheConfig::with_capacity(c));
                            let queue: Vec<_> = reqs
                                .iter()
                                .map(|&(id, u, p, n)| waiting(id, u, p, n, 0.0, &cache))
                                .collect();
                            let got: Vec<_> = POLICIES
                                .iter()
                                .map(|&p| replay(queue.clone(), cache.clone(), p))
                                .collect();
                            if got[0].1 == 1 && got[1].1 == 1 && got[2] == (vec![0, 3, 2, 1], 2) {
                                found.push([a, c, b, d, s]);
                            }
                        }
                    }
                }
            }
        }
        found
    }

    #[test]
    fn worked_example_lengths_from_search() {
        let grid: Vec<u64> = (1..=12).map(|k| k * 512).collect();
        let found = search(&grid, &[512, 1024]);
        assert!(found.contains(&[2048, 2560, 3072, 4096, 1024]));
        // Every solution needs D - A < C so D's miss undercuts C.
        assert!(found.iter().all(|&[a, c, _, d, _]| d - a < c));
        // Evenly spaced lengths cannot satisfy that.
        let even = search(&[1024, 2048, 3072, 4096], &[512, 1024]);
        assert!(even.is_empty());
    }

    #[test]
    fn single_request_always_chosen() {
        let cache = empty_cache();
        let q = vec![waiting(7, 0, 100, 500, 0.0, &cache)];
        for p in POLICIES {
            assert_eq!(schedule_next(&q, &cache, &profile(), p, 1.0).unwrap(), 0);
        }
        assert!(schedule_next(&[], &cache, &profile(), Policy::Fifo, 0.0).is_err());
    }

    #[test]
    fn score_examples() {
        let cache = empty_cache();
        let r = waiting(0, 0, 11_000, 14_000, 0.0, &cache);
        let p0 = Policy::calibrated(0.0);
        assert_eq!(score(&r, 11_000, p0, &profile(), 3.0).unwrap(), 3000.0);
        let prof = Policy::SrjfCalibrated {
            lambda: 0.0,
            scoring: Scoring::Profile,
        };
        assert_eq!(
            score(&r, 11_000, prof, &profile(), 3.0).unwrap(),
            profile().get_jct(14_000, 11_000).unwrap()
        );
        let older = waiting(1, 0, 11_000, 14_000, 0.0, &cache);
        let newer = waiting(2, 0, 11_000, 14_000, 1.0, &cache);
        let p = Policy::calibrated(0.5);
        assert!(score(&older, 0, p, &profile(), 2.0).unwrap() < score(&newer, 0, p, &profile(), 2.0).unwrap());
        assert!(score(&newer, 0, p, &profile(), 0.5).is_err());
        assert!(score(&older, 0, Policy::Fifo, &profile(), 1.0).is_err());
        assert!(Policy::calibrated(-1.0).validate().is_err());
        assert!(Policy::calibrated(f64::NAN).validate().is_err());
    }

    #[test]
    fn ties_break_on_arrival_then_id() {
        let cache = empty_cache();
        let q = vec![
            waiting(5, 0, 0, 1000, 1.0, &cache),
            waiting(3, 1, 0, 1000, 1.0, &cache),
            waiting(9, 2, 0, 1000, 0.5, &cache),
        ];
        for p in POLICIES {
            assert_eq!(schedule_next(&q, &cache, &profile(), p, 2.0).unwrap(), 2);
        }
        let q = &q[..2];
        for p in POLICIES {
            assert_eq!(schedule_next(q, &cache, &profile(), p, 2.0).unwrap(), 1);
        }
    }

    #[test]
    fn huge_lambda_serves_in_arrival_order() {
        let cache = empty_cache();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let queue: Vec<_> = (0..10)
            .map(|i| {
                let len = rng.random_range(100..20_000);
                waiting(i, i, len / 2, len, i as f64 * 0.25 + rng.random_range(0.0..0.2), &cache)
            })
            .collect();
        let fifo = replay(queue.clone(), cache.clone(), Policy::Fifo).0;
        for scoring in [Scoring::Proxy, Scoring::Profile] {
            let p = Policy::SrjfCalibrated { lambda: 1e9, scoring };
            // Start the clock after every arrival.
            let mut q = queue.clone();
            let mut c = cache.clone();
            let mut order = Vec::new();
            let mut now = 10.0;
            while !q.is_empty() {
                let i = schedule_next(&q, &c, &profile(), p, now).unwrap();
                let r = q.remove(i);
                now += 1.0;
                c.insert_chain(&r.chain, now);
                order.push(r.id());
            }
            assert_eq!(order, fifo);
        }
        let short_first = replay(queue, cache, Policy::calibrated(0.0)).0;
        assert_ne!(short_first, fifo);
    }

    #[test]
    fn selection_is_scale_invariant() {
        let cache = empty_cache();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q: Vec<_> = (0..8)
                .map(|i| waiting(i, i, 0, rng.random_range(500..30_000), rng.random_range(0.0..5.0), &cache))
                .collect();
            let base = profile();
            let lambda = rng.random_range(0.0..2.0);
            let k = rng.random_range(0.1..10.0);
            let scaled = JctProfile {
                coef_input: base.coef_input * k,
                coef_cached: base.coef_cached * k,
                intercept: base.intercept * k,
                ..base
            };
            for scoring in [Scoring::Proxy, Scoring::Profile] {
                let p = Policy::SrjfCalibrated { lambda, scoring };
                let pk = Policy::SrjfCalibrated {
                    lambda: lambda * k,
                    scoring,
                };
                assert_eq!(
                    schedule_next(&q, &cache, &base, p, 5.0).unwrap(),
                    schedule_next(&q, &cache, &scaled, pk, 5.0).unwrap()
                );
            }
        }
    }

    /// A long request waits behind a stream of short ones arriving every
    /// half second. Returns how many shorts were served before it, capped.
    fn starvation(lambda: f64, cap: usize) -> usize {
        let cache = empty_cache();
        let p = Policy::calibrated(lambda);
        let mut q = vec![waiting(0, 0, 0, 20_000, 0.0, &cache)];
        let (mut now, mut next_id) = (0.0f64, 1u64);
        for served in 0..cap {
            if q.len() < 2 {
                now = now.max(next_id as f64 * 0.5);
            }
            while next_id as f64 * 0.5 <= now {
                q.push(waiting(next_id, next_id, 0, 1_000, next_id as f64 * 0.5, &cache));
                next_id += 1;
            }
            let i = schedule_next(&q, &cache, &profile(), p, now).unwrap();
            let r = q.remove(i);
            if r.id() == 0 {
                return served;
            }
            now += 0.5;
        }
        cap
    }

    #[test]
    fn positive_lambda_bounds_starvation() {
        assert_eq!(starvation(0.0, 500), 500);
        let bounded = starvation(0.5, 500);
        assert!(bounded < 500, "{bounded}");
        assert!(starvation(5.0, 500) <= bounded);
    }
}
