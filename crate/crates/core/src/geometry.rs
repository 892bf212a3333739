// SPDX-License-Identifier: Apache-2.0

//! Byte arithmetic over transformer shapes.
//!
//! Every quantity here is a closed form of the model shape: KV bytes per
//! token, the gate/up activation spike, the peak footprint of one prefill
//! under each execution mode, the largest input that fits a memory budget,
//! and how much prefix cache is left once that budget is reserved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chunk size used for hybrid prefilling and the chunked-prefill baseline.
pub const DEFAULT_CHUNK: u64 = 8192;

/// Transformer shape constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGeometry {
    #[serde(default)]
    pub name: String,
    pub num_layers: u64,
    pub hidden_size: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub intermediate_size: u64,
    /// Total parameter storage in bytes.
    pub weight_bytes: u64,
    pub kv_dtype_bytes: u64,
    pub act_dtype_bytes: u64,
    /// Multiplier on the gate/up spike covering the other temporaries that
    /// are live at the same time.
    pub act_overhead_factor: f64,
}

impl ModelGeometry {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate_size", self.intermediate_size),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{field} must be positive")));
            }
        }
        for (field, v) in [
            ("kv_dtype_bytes", self.kv_dtype_bytes),
            ("act_dtype_bytes", self.act_dtype_bytes),
        ] {
            if !matches!(v, 1 | 2 | 4) {
                return Err(Error::config(format!("{field} must be 1, 2 or 4, got {v}")));
            }
        }
        if !(self.act_overhead_factor.is_finite() && self.act_overhead_factor >= 1.0) {
            return Err(Error::config("act_overhead_factor must be >= 1"));
        }
        Ok(())
    }

    /// Dense-layer FLOPs per token: q/o projections (hidden x hidden), k/v
    /// projections (hidden x kv width) and the three MLP matrices.
    pub fn linear_flops_per_token(&self) -> f64 {
        let h = self.hidden_size as f64;
        let kv_width = (self.num_kv_heads * self.head_dim) as f64;
        let i = self.intermediate_size as f64;
        let params_per_layer = 2.0 * h * h + 2.0 * h * kv_width + 3.0 * h * i;
        2.0 * params_per_layer * self.num_layers as f64
    }

    /// Attention FLOPs per (query, key) pair: QK^T plus AV across all heads.
    pub fn attn_flops_per_pair(&self) -> f64 {
        4.0 * self.hidden_size as f64 * self.num_layers as f64
    }
}

/// Memory budget and throughput of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    #[serde(default)]
    pub name: String,
    pub total_memory: u64,
    /// Effective FLOP/s achieved by dense layers.
    pub linear_rate: f64,
    /// Effective FLOP/s achieved by attention.
    pub attn_rate: f64,
    /// Per-request overhead in seconds.
    pub fixed_overhead: f64,
    /// Bytes/second available to collective communication.
    pub link_bandwidth: f64,
    pub has_nvlink: bool,
}

impl GpuSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_memory == 0 {
            return Err(Error::config("total_memory must be positive"));
        }
        for (field, v) in [
            ("linear_rate", self.linear_rate),
            ("attn_rate", self.attn_rate),
            ("link_bandwidth", self.link_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{field} must be positive")));
            }
        }
        if !(self.fixed_overhead.is_finite() && self.fixed_overhead >= 0.0) {
            return Err(Error::config("fixed_overhead must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrefillMode {
    /// All layers' KV retained, activations for the whole input at once.
    Full,
    /// Only the active layer's KV retained.
    KvDiscard,
    /// All KV retained, linear activations bounded by the chunk.
    Chunked(u64),
    /// Active layer's KV only, linear activations bounded by the chunk.
    Hybrid(u64),
}

impl PrefillMode {
    pub const ALL_DEFAULT: [PrefillMode; 4] = [
        PrefillMode::Full,
        PrefillMode::KvDiscard,
        PrefillMode::Chunked(DEFAULT_CHUNK),
        PrefillMode::Hybrid(DEFAULT_CHUNK),
    ];

    pub fn label(&self) -> &'static str {
        match self {
            PrefillMode::Full => "full",
            PrefillMode::KvDiscard => "kv-discard",
            PrefillMode::Chunked(_) => "chunked",
            PrefillMode::Hybrid(_) => "hybrid",
        }
    }

    fn chunk(&self) -> Option<u64> {
        match *self {
            PrefillMode::Chunked(c) | PrefillMode::Hybrid(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvBytes {
    pub per_layer: u64,
    pub total: u64,
}

pub fn kv_bytes_per_token(geom: &ModelGeometry) -> KvBytes {
    let per_layer = 2 * geom.num_kv_heads * geom.head_dim * geom.kv_dtype_bytes;
    KvBytes {
        per_layer,
        total: per_layer * geom.num_layers,
    }
}

/// Scalars in the concatenated gate/up projection output for one token.
pub fn intermediate_scalars_per_token(geom: &ModelGeometry) -> u64 {
    2 * geom.intermediate_size
}

pub fn intermediate_bytes_per_token(geom: &ModelGeometry) -> u64 {
    intermediate_scalars_per_token(geom) * geom.act_dtype_bytes
}

/// Linear-in-n memory footprint of one prefill on one device:
/// `weights + kv_per_token * n + act_per_token * min(n, act_cap)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub weights: f64,
    pub kv_per_token: f64,
    pub act_per_token: f64,
    /// Activations stop growing past this many tokens (the chunk size).
    pub act_cap: Option<u64>,
}

impl Footprint {
    pub fn for_mode(geom: &ModelGeometry, mode: PrefillMode) -> Self {
        let kv = kv_bytes_per_token(geom);
        let kv_per_token = match mode {
            PrefillMode::Full | PrefillMode::Chunked(_) => kv.total,
            PrefillMode::KvDiscard | PrefillMode::Hybrid(_) => kv.per_layer,
        };
        Footprint {
            weights: geom.weight_bytes as f64,
            kv_per_token: kv_per_token as f64,
            act_per_token: geom.act_overhead_factor * intermediate_bytes_per_token(geom) as f64,
            act_cap: mode.chunk(),
        }
    }

    /// Divide weights and KV across `degree` devices; activations are
    /// divided too when `shard_activations` is set.
    pub fn sharded(self, degree: u64, shard_activations: bool) -> Self {
        let d = degree as f64;
        Footprint {
            weights: self.weights / d,
            kv_per_token: self.kv_per_token / d,
            act_per_token: if shard_activations {
                self.act_per_token / d
            } else {
                self.act_per_token
            },
            act_cap: self.act_cap,
        }
    }

    /// Activation bytes for `n` tokens, rounded up.
    pub fn activation(&self, n: u64) -> f64 {
        let live = self.act_cap.map_or(n, |c| n.min(c));
        (self.act_per_token * live as f64).ceil()
    }

    pub fn peak(&self, n: u64) -> f64 {
        self.weights + self.kv_per_token * n as f64 + self.activation(n)
    }

    /// Largest `n` whose peak fits in `budget`; 0 when even one token
    /// does not fit.
    pub fn max_tokens(&self, budget: u64) -> u64 {
        let budget = budget as f64;
        if self.peak(1) > budget {
            return 0;
        }
        // Grow an upper bound, then bisect. Peak is strictly increasing in n
        // because kv_per_token > 0.
        let mut lo = 1u64;
        let mut hi = 2u64;
        while self.peak(hi) <= budget {
            lo = hi;
            hi = hi.saturating_mul(2);
            if hi == u64::MAX {
                return hi;
            }
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.peak(mid) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

pub fn peak_prefill_memory(geom: &ModelGeometry, n_tokens: u64, mode: PrefillMode) -> Result<u64> {
    if n_tokens == 0 {
        return Err(Error::config("peak memory needs at least one token"));
    }
    check_mode(mode)?;
    Ok(Footprint::for_mode(geom, mode).peak(n_tokens) as u64)
}

pub fn max_input_length(geom: &ModelGeometry, gpu: &GpuSpec, mode: PrefillMode) -> Result<u64> {
    check_mode(mode)?;
    if gpu.total_memory < geom.weight_bytes {
        return Err(Error::config(format!(
            "budget {} B is below the {} B of weights",
            gpu.total_memory, geom.weight_bytes
        )));
    }
    Ok(Footprint::for_mode(geom, mode).max_tokens(gpu.total_memory))
}

/// Tokens of prefix KV that fit beside a reserved hybrid prefill of
/// `user_mil` tokens.
pub fn prefix_cache_capacity(geom: &ModelGeometry, gpu: &GpuSpec, user_mil: u64) -> Result<u64> {
    let mode = PrefillMode::Hybrid(DEFAULT_CHUNK);
    let mil = max_input_length(geom, gpu, mode)?;
    if user_mil == 0 || user_mil > mil {
        return Err(Error::config(format!(
            "user max input length {user_mil} outside 1..={mil}"
        )));
    }
    let reserved = peak_prefill_memory(geom, user_mil, mode)?;
    let free = gpu.total_memory.saturating_sub(reserved);
    Ok(free / kv_bytes_per_token(geom).total)
}

/// Overhead factor that makes `MIL(KvDiscard) / MIL(Full)` equal `ratio`
/// (ignoring integer rounding of the two lengths).
pub fn calibrate_overhead_for_discard_ratio(geom: &ModelGeometry, ratio: f64) -> f64 {
    let kv = kv_bytes_per_token(geom);
    let inter = intermediate_bytes_per_token(geom) as f64;
    (kv.total as f64 - ratio * kv.per_layer as f64) / ((ratio - 1.0) * inter)
}

/// Overhead factor that makes `MIL(Full)` equal `target` tokens on `gpu`.
pub fn calibrate_overhead_for_full_mil(geom: &ModelGeometry, gpu: &GpuSpec, target: u64) -> f64 {
    let headroom = gpu.total_memory as f64 - geom.weight_bytes as f64;
    let kv = kv_bytes_per_token(geom).total as f64;
    (headroom / target as f64 - kv) / intermediate_bytes_per_token(geom) as f64
}

fn check_mode(mode: PrefillMode) -> Result<()> {
    match mode.chunk() {
        Some(0) => Err(Error::config("chunk size must be positive")),
        _ => Ok(()),
    }
}
