// SPDX-License-Identifier: Apache-2.0

//! Synthetic traces and arrival processes.
//!
//! Every request is a per-user profile prefix followed by a per-request
//! suffix. Token ids are drawn from ChaCha streams keyed by the trace seed
//! and the user (for the prefix) or request (for the suffix), so a trace
//! file only needs lengths and a seed to be rebuilt exactly.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

pub const POST_REC_USERS: u64 = 20;
pub const POST_REC_REQUESTS_PER_USER: u64 = 50;
pub const POST_REC_PROFILE_MEAN: f64 = 14_000.0;
pub const POST_REC_PROFILE_STD: f64 = 3_000.0;
pub const POST_REC_PROFILE_RANGE: (u64, u64) = (11_000, 17_000);
pub const POST_REC_SUFFIX: u64 = 150;

pub const CREDIT_USERS: u64 = 60;
pub const CREDIT_RANGE: (u64, u64) = (40_000, 60_000);

/// Seed used by the CLI and the bundled experiments.
pub const DEFAULT_SEED: u64 = 7;

pub const TRACE_CSV_HEADER: &str = "id,user_id,arrival_seconds,profile_len,total_len,seed";

// Stream tags; the low 48 bits carry the user or request index.
const TAG_LENGTHS: u64 = 1 << 48;
const TAG_PROFILE: u64 = 2 << 48;
const TAG_SUFFIX: u64 = 3 << 48;
const TAG_ORDER: u64 = 4 << 48;
const TAG_GAPS: u64 = 5 << 48;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub user_id: u64,
    pub tokens: Arc<[u32]>,
    pub arrival: f64,
    /// Length of the user-profile prefix within `tokens`.
    pub profile_len: u64,
}

impl Request {
    pub fn n_input(&self) -> u64 {
        self.tokens.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub name: String,
    pub seed: u64,
    pub requests: Vec<Request>,
}

impl Trace {
    pub fn total_tokens(&self) -> u64 {
        self.requests.iter().map(Request::n_input).sum()
    }

    pub fn max_len(&self) -> u64 {
        self.requests.iter().map(Request::n_input).max().unwrap_or(0)
    }

    pub fn users(&self) -> u64 {
        let mut ids: Vec<u64> = self.requests.iter().map(|r| r.user_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len() as u64
    }

    /// Arrivals are nondecreasing and finite.
    pub fn validate(&self) -> Result<()> {
        let mut last = 0.0f64;
        for r in &self.requests {
            if !r.arrival.is_finite() || r.arrival < last {
                return Err(Error::config(format!(
                    "trace '{}' not time-ordered at request {}",
                    self.name, r.id
                )));
            }
            if r.tokens.is_empty() {
                return Err(Error::config(format!("request {} has no tokens", r.id)));
            }
            last = r.arrival;
        }
        Ok(())
    }

    /// Every request arrives at time zero, in trace order.
    pub fn all_at_once(&self) -> Trace {
        let mut t = self.clone();
        for r in &mut t.requests {
            r.arrival = 0.0;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    PostRecommendation,
    CreditVerification,
}

impl TraceKind {
    pub fn generate(self, seed: u64) -> Trace {
        match self {
            TraceKind::PostRecommendation => gen_post_recommendation(seed),
            TraceKind::CreditVerification => gen_credit_verification(seed),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TraceKind::PostRecommendation => "post-rec",
            TraceKind::CreditVerification => "credit",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post-rec" | "post-recommendation" => Ok(TraceKind::PostRecommendation),
            "credit" | "credit-verification" => Ok(TraceKind::CreditVerification),
            _ => Err(Error::config(format!("unknown trace '{s}'"))),
        }
    }
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag | (index & ((1 << 48) - 1)));
    rng
}

fn draw_tokens(seed: u64, tag: u64, index: u64, len: u64) -> impl Iterator<Item = u32> {
    let mut rng = stream(seed, tag, index);
    (0..len).map(move |_| rng.random::<u32>())
}

/// Rebuild a request's tokens from its lengths.
pub fn request_tokens(seed: u64, user_id: u64, id: u64, profile_len: u64, total_len: u64) -> Arc<[u32]> {
    draw_tokens(seed, TAG_PROFILE, user_id, profile_len)
        .chain(draw_tokens(seed, TAG_SUFFIX, id, total_len.saturating_sub(profile_len)))
        .collect()
}

fn build(name: &str, seed: u64, shapes: &[(u64, u64, u64, u64)]) -> Trace {
    let requests = par::map(Parallelism::default(), shapes, |&(id, user_id, profile_len, total)| {
        Request {
            id,
            user_id,
            tokens: request_tokens(seed, user_id, id, profile_len, total),
            arrival: 0.0,
            profile_len,
        }
    });
    Trace {
        name: name.to_string(),
        seed,
        requests,
    }
}

/// Per-user profile lengths of the post-recommendation trace.
pub fn post_rec_profile_lengths(seed: u64) -> Vec<u64> {
    let mut rng = stream(seed, TAG_LENGTHS, 0);
    let normal = Normal::new(POST_REC_PROFILE_MEAN, POST_REC_PROFILE_STD).expect("valid normal");
    let (lo, hi) = POST_REC_PROFILE_RANGE;
    (0..POST_REC_USERS)
        .map(|_| (normal.sample(&mut rng).round() as i64).clamp(lo as i64, hi as i64) as u64)
        .collect()
}

pub fn gen_post_recommendation(seed: u64) -> Trace {
    let mut shapes = Vec::new();
    for (user, profile) in (0..).zip(post_rec_profile_lengths(seed)) {
        for k in 0..POST_REC_REQUESTS_PER_USER {
            let id = user * POST_REC_REQUESTS_PER_USER + k;
            shapes.push((id, user, profile, profile + POST_REC_SUFFIX));
        }
    }
    build(TraceKind::PostRecommendation.label(), seed, &shapes)
}

pub fn gen_credit_verification(seed: u64) -> Trace {
    let mut rng = stream(seed, TAG_LENGTHS, 0);
    let (lo, hi) = CREDIT_RANGE;
    let shapes: Vec<_> = (0..CREDIT_USERS)
        .map(|user| {
            let len = rng.random_range(lo..=hi);
            (user, user, len, len)
        })
        .collect();
    build(TraceKind::CreditVerification.label(), seed, &shapes)
}

/// Four requests arriving together: A (2048 tokens) is a prefix of D
/// (4096); B (3072) and C (2560) share a 1024-token prefix. With room for
/// exactly C in the cache, FIFO and static SRJF each get one hit and
/// cache-aware SRJF gets two.
pub fn worked_example() -> (Trace, u64) {
    const SEED: u64 = 6;
    let shapes = [(0, 0, 2048, 2048), (1, 1, 1024, 3072), (2, 1, 1024, 2560), (3, 0, 2048, 4096)];
    (build("worked-example", SEED, &shapes), 2560)
}

/// Poisson arrivals at `rate` with each user's requests kept contiguous.
pub fn poisson_arrivals(trace: &Trace, rate: f64, seed: u64) -> Result<Trace> {
    poisson_arrivals_with(trace, rate, seed, false)
}

/// As [`poisson_arrivals`]; `interleave_users` shuffles individual
/// requests instead of whole user sessions.
pub fn poisson_arrivals_with(trace: &Trace, rate: f64, seed: u64, interleave_users: bool) -> Result<Trace> {
    if !(rate > 0.0) {
        return Err(Error::config(format!("arrival rate must be > 0, got {rate}")));
    }
    let mut order_rng = stream(seed, TAG_ORDER, 0);
    let mut requests = trace.requests.clone();
    requests.sort_by_key(|r| (r.user_id, r.id));
    if interleave_users {
        requests.shuffle(&mut order_rng);
    } else {
        let mut sessions: Vec<Vec<Request>> = Vec::new();
        for r in requests {
            match sessions.last_mut() {
                Some(s) if s[0].user_id == r.user_id => s.push(r),
                _ => sessions.push(vec![r]),
            }
        }
        sessions.shuffle(&mut order_rng);
        requests = sessions.into_iter().flatten().collect();
    }
    let mut gap_rng = stream(seed, TAG_GAPS, 0);
    let exp = Exp::new(rate).map_err(|e| Error::config(format!("arrival rate: {e}")))?;
    let mut now = 0.0;
    for r in &mut requests {
        if rate.is_finite() {
            now += exp.sample(&mut gap_rng);
        }
        r.arrival = now;
    }
    Ok(Trace {
        name: trace.name.clone(),
        seed: trace.seed,
        requests,
    })
}

pub fn write_trace_csv<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in &trace.requests {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.id,
            r.user_id,
            r.arrival,
            r.profile_len,
            r.n_input(),
            trace.seed
        )?;
    }
    Ok(())
}

pub fn read_trace_csv<R: BufRead>(name: &str, input: R) -> Result<Trace> {
    let mut lines = input.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == TRACE_CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "trace header: expected '{TRACE_CSV_HEADER}', got {other:?}"
            )))
        }
    }
    let mut seed = None;
    let mut shapes = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("trace line {}: {what}", lineno + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("bad integer '{s}'")));
        let arrival: f64 = f[2].parse().map_err(|_| bad("bad arrival"))?;
        let (profile_len, total) = (int(f[3])?, int(f[4])?);
        if profile_len > total || total == 0 {
            return Err(bad("lengths out of range"));
        }
        let row_seed = int(f[5])?;
        if *seed.get_or_insert(row_seed) != row_seed {
            return Err(bad("mixed seeds"));
        }
        shapes.push((int(f[0])?, int(f[1])?, arrival, profile_len, total));
    }
    let seed = seed.unwrap_or(0);
    let requests = par::map(Parallelism::default(), &shapes, |&(id, user_id, arrival, profile_len, total)| {
        Request {
            id,
            user_id,
            tokens: request_tokens(seed, user_id, id, profile_len, total),
            arrival,
            profile_len,
        }
    });
    let trace = Trace {
        name: name.to_string(),
        seed,
        requests,
    };
    trace.validate()?;
    Ok(trace)
}
