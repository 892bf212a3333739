// SPDX-License-Identifier: Apache-2.0

//! Memory model, cost model and discrete-event simulator for serving
//! prefill-only LLM requests.

// Validation is written `!(x > 0.0)` so NaN fails it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod cli;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod jct;
pub mod numerics;
pub mod par;
pub mod presets;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
