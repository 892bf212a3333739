// SPDX-License-Identifier: Apache-2.0

//! Per-request latency of each engine variant.
//!
//! Every variant shares one base cost: a fixed per-request overhead, linear
//! work on the cache-miss tokens, and causal attention between the miss
//! queries and every key. Variants then scale or extend that base.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    self, kv_bytes_per_token, Footprint, GpuSpec, ModelGeometry, PrefillMode, DEFAULT_CHUNK,
};

/// Chunk size, input length and throughput loss of the chunked-prefill
/// anchor the attention penalty is calibrated against.
pub const PENALTY_ANCHOR_CHUNK: u64 = 512;
pub const PENALTY_ANCHOR_INPUT: u64 = 20_000;
pub const PENALTY_ANCHOR_LOSS: f64 = 0.14;

pub const DEFAULT_PP_BUBBLE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineVariant {
    PrefillOnlyHybrid,
    PagedAttention,
    ChunkedPrefill(u64),
    TensorParallel(u64),
    PipelineParallel(u64),
}

impl EngineVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EngineVariant::ChunkedPrefill(0) => Err(Error::config("chunk must be >= 1")),
            EngineVariant::TensorParallel(p) | EngineVariant::PipelineParallel(p) if p < 2 => {
                Err(Error::config("parallel degree must be >= 2"))
            }
            _ => Ok(()),
        }
    }

    /// GPUs occupied by one engine instance.
    pub fn gpus(&self) -> u64 {
        match *self {
            EngineVariant::TensorParallel(p) | EngineVariant::PipelineParallel(p) => p,
            _ => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EngineVariant::PrefillOnlyHybrid => "prefillonly",
            EngineVariant::PagedAttention => "paged",
            EngineVariant::ChunkedPrefill(_) => "chunked",
            EngineVariant::TensorParallel(_) => "tp",
            EngineVariant::PipelineParallel(_) => "pp",
        }
    }

    /// Per-device memory footprint of one prefill.
    pub fn footprint(&self, geom: &ModelGeometry) -> Footprint {
        match *self {
            EngineVariant::PrefillOnlyHybrid => {
                Footprint::for_mode(geom, PrefillMode::Hybrid(DEFAULT_CHUNK))
            }
            EngineVariant::PagedAttention => Footprint::for_mode(geom, PrefillMode::Full),
            EngineVariant::ChunkedPrefill(c) => Footprint::for_mode(geom, PrefillMode::Chunked(c)),
            // Column/row sharding splits weights, KV heads and the MLP width.
            EngineVariant::TensorParallel(p) => {
                Footprint::for_mode(geom, PrefillMode::Full).sharded(p, true)
            }
            // Each stage owns a contiguous layer range and is fed fixed-size
            // chunks; the activation spike of a chunk is not split.
            EngineVariant::PipelineParallel(p) => {
                Footprint::for_mode(geom, PrefillMode::Chunked(DEFAULT_CHUNK)).sharded(p, false)
            }
        }
    }

    pub fn max_input_length(&self, geom: &ModelGeometry, gpu: &GpuSpec) -> Result<u64> {
        self.validate()?;
        if gpu.total_memory < geom.weight_bytes / self.gpus() {
            return Err(Error::config("budget below weight size"));
        }
        Ok(self.footprint(geom).max_tokens(gpu.total_memory))
    }

    /// Prefix-cache tokens available while a `user_mil`-token request can
    /// still run. Full-KV engines cache into the same pool the running
    /// request draws from; the hybrid engine reserves the whole prefill
    /// footprint first.
    pub fn cache_capacity(&self, geom: &ModelGeometry, gpu: &GpuSpec, user_mil: u64) -> Result<u64> {
        if let EngineVariant::PrefillOnlyHybrid = self {
            return geometry::prefix_cache_capacity(geom, gpu, user_mil);
        }
        let mil = self.max_input_length(geom, gpu)?;
        if user_mil == 0 || user_mil > mil {
            return Err(Error::config(format!(
                "user max input length {user_mil} outside 1..={mil}"
            )));
        }
        let fp = self.footprint(geom);
        let pool = gpu.total_memory as f64 - fp.weights - fp.activation(user_mil);
        Ok((pool / fp.kv_per_token).floor().max(0.0) as u64)
    }
}

impl fmt::Display for EngineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EngineVariant::ChunkedPrefill(c) => write!(f, "chunked:{c}"),
            EngineVariant::TensorParallel(p) => write!(f, "tp:{p}"),
            EngineVariant::PipelineParallel(p) => write!(f, "pp:{p}"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for EngineVariant {
    type Err = Error;

    /// `prefillonly`, `paged`, `chunked[:chunk]`, `tp[:degree]`, `pp[:degree]`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: u64| -> Result<u64> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::config(format!("bad variant argument '{a}'")))
            })
        };
        let v = match name {
            "prefillonly" | "hybrid" if arg.is_none() => EngineVariant::PrefillOnlyHybrid,
            "paged" if arg.is_none() => EngineVariant::PagedAttention,
            "chunked" => EngineVariant::ChunkedPrefill(num(DEFAULT_CHUNK)?),
            "tp" => EngineVariant::TensorParallel(num(2)?),
            "pp" => EngineVariant::PipelineParallel(num(2)?),
            _ => return Err(Error::config(format!("unknown variant '{s}'"))),
        };
        v.validate()?;
        Ok(v)
    }
}

/// Optional cost-model keys carried in GPU preset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostKnobs {
    #[serde(default = "default_bubble")]
    pub pp_bubble_fraction: f64,
    /// Overrides the calibrated chunked-attention penalty constant.
    #[serde(default)]
    pub chunk_penalty_k: Option<f64>,
    /// Defaults to one hidden-state row in activation precision.
    #[serde(default)]
    pub comm_bytes_per_token_per_layer: Option<f64>,
}

fn default_bubble() -> f64 {
    DEFAULT_PP_BUBBLE
}

impl Default for CostKnobs {
    fn default() -> Self {
        CostKnobs {
            pp_bubble_fraction: DEFAULT_PP_BUBBLE,
            chunk_penalty_k: None,
            comm_bytes_per_token_per_layer: None,
        }
    }
}

impl CostKnobs {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.pp_bubble_fraction) {
            return Err(Error::config("pp_bubble_fraction must lie in [0, 1)"));
        }
        if self.chunk_penalty_k.is_some_and(|k| !(k >= 0.0)) {
            return Err(Error::config("chunk_penalty_k must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Seconds per cache-miss token of dense-layer work.
    pub c_linear: f64,
    /// Seconds per (query, key) pair of attention.
    pub c_attn: f64,
    pub c_fixed: f64,
    /// `k` in the chunked-attention penalty `1 + k / chunk`.
    pub chunk_penalty_k: f64,
    pub comm_bytes_per_token_per_layer: f64,
    pub pp_bubble_fraction: f64,
}

impl CostParams {
    pub fn derive(geom: &ModelGeometry, gpu: &GpuSpec, knobs: &CostKnobs) -> Self {
        let mut params = CostParams {
            c_linear: geom.linear_flops_per_token() / gpu.linear_rate,
            c_attn: geom.attn_flops_per_pair() / gpu.attn_rate,
            c_fixed: gpu.fixed_overhead,
            chunk_penalty_k: 0.0,
            comm_bytes_per_token_per_layer: knobs
                .comm_bytes_per_token_per_layer
                .unwrap_or((geom.hidden_size * geom.act_dtype_bytes) as f64),
            pp_bubble_fraction: knobs.pp_bubble_fraction,
        };
        params.chunk_penalty_k = knobs
            .chunk_penalty_k
            .unwrap_or_else(|| params.calibrated_penalty_k());
        params
    }

    /// One-point calibration: chunking a `PENALTY_ANCHOR_INPUT`-token
    /// request at `PENALTY_ANCHOR_CHUNK` loses `PENALTY_ANCHOR_LOSS` of
    /// throughput relative to unchunked prefill.
    pub fn calibrated_penalty_k(&self) -> f64 {
        let n = PENALTY_ANCHOR_INPUT as f64;
        let attn = self.c_attn * n * n / 2.0;
        let base = self.c_fixed + self.c_linear * n + attn;
        let slowdown = 1.0 / (1.0 - PENALTY_ANCHOR_LOSS) - 1.0;
        PENALTY_ANCHOR_CHUNK as f64 * slowdown * base / attn
    }

    /// Attention slowdown from chunking `n_input` tokens at `chunk`.
    pub fn penalty(&self, chunk: u64, n_input: u64) -> f64 {
        if chunk >= n_input {
            1.0
        } else {
            1.0 + self.chunk_penalty_k / chunk as f64
        }
    }

    fn attn_time(&self, n_input: u64, n_cached: u64) -> f64 {
        let (n, c) = (n_input as f64, n_cached as f64);
        self.c_attn * (n * n - c * c) / 2.0
    }

    fn base(&self, n_input: u64, n_cached: u64) -> f64 {
        self.c_fixed
            + self.c_linear * (n_input - n_cached) as f64
            + self.attn_time(n_input, n_cached)
    }
}

/// A variant bound to its model, device and cost parameters, with the
/// maximum input length resolved once.
#[derive(Debug, Clone)]
pub struct Engine {
    pub variant: EngineVariant,
    pub geometry: ModelGeometry,
    pub gpu: GpuSpec,
    pub params: CostParams,
    pub mil: u64,
}

impl Engine {
    pub fn new(
        variant: EngineVariant,
        geometry: ModelGeometry,
        gpu: GpuSpec,
        params: CostParams,
    ) -> Result<Self> {
        let mil = variant.max_input_length(&geometry, &gpu)?;
        Ok(Engine {
            variant,
            geometry,
            gpu,
            params,
            mil,
        })
    }

    /// Latency of one request with `n_cached` of its `n_input` tokens
    /// served from the prefix cache.
    pub fn time(&self, n_input: u64, n_cached: u64) -> Result<f64> {
        if n_cached > n_input {
            return Err(Error::config(format!(
                "cached tokens {n_cached} exceed input {n_input}"
            )));
        }
        if n_input > self.mil {
            return Err(Error::Capacity {
                mil: self.mil,
                ids: Vec::new(),
            });
        }
        let p = &self.params;
        let miss = (n_input - n_cached) as f64;
        let base = p.base(n_input, n_cached);
        Ok(match self.variant {
            EngineVariant::PrefillOnlyHybrid
            | EngineVariant::PagedAttention
            | EngineVariant::PipelineParallel(_) => base,
            EngineVariant::ChunkedPrefill(c) => {
                p.c_fixed + p.c_linear * miss + p.penalty(c, n_input) * p.attn_time(n_input, n_cached)
            }
            EngineVariant::TensorParallel(degree) => {
                let d = degree as f64;
                let layers = self.geometry.num_layers as f64;
                let comm = layers * 2.0 * p.comm_bytes_per_token_per_layer * miss * (d - 1.0)
                    / (d * self.gpu.link_bandwidth);
                p.c_fixed + (base - p.c_fixed) / d + comm
            }
        })
    }

    /// How long the instance is blocked before it can admit another
    /// request. Pipeline stages free up after one stage's share of the
    /// work, derated by bubbles; every other variant runs one request at
    /// a time.
    pub fn occupancy(&self, latency: f64, bubble_fraction: f64) -> f64 {
        match self.variant {
            EngineVariant::PipelineParallel(p) => latency / (p as f64 * (1.0 - bubble_fraction)),
            _ => latency,
        }
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        kv_bytes_per_token(&self.geometry).total
    }
}

pub fn execute_time(
    variant: EngineVariant,
    geom: &ModelGeometry,
    gpu: &GpuSpec,
    params: &CostParams,
    n_input: u64,
    n_cached: u64,
) -> Result<f64> {
    Engine::new(variant, geom.clone(), gpu.clone(), *params)?.time(n_input, n_cached)
}
