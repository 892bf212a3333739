// SPDX-License-Identifier: Apache-2.0

//! Job-completion-time estimation.
//!
//! A profile is a linear model `latency ~ a * n_input + b * n_cached + c`
//! fitted by ordinary least squares over a grid of (input, cached) pairs
//! sampled from an execution model. The cache-miss count is the cheap
//! proxy the scheduler uses by default.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Engine;
use crate::par::{self, Parallelism};

/// Spacing of the profiling grid, in tokens.
pub const GRID_STEP: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JctSample {
    pub n_input: u64,
    pub n_cached: u64,
    pub latency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JctProfile {
    pub coef_input: f64,
    pub coef_cached: f64,
    pub intercept: f64,
    pub fit_r2: f64,
}

impl JctProfile {
    /// Estimated latency in seconds, clamped at zero.
    pub fn get_jct(&self, n_input: u64, n_cached: u64) -> Result<f64> {
        if n_cached > n_input {
            return Err(Error::config(format!(
                "cached tokens {n_cached} exceed input {n_input}"
            )));
        }
        Ok(self.estimate(n_input, n_cached))
    }

    pub(crate) fn estimate(&self, n_input: u64, n_cached: u64) -> f64 {
        (self.coef_input * n_input as f64 + self.coef_cached * n_cached as f64 + self.intercept)
            .max(0.0)
    }

    /// More input costs more, more cache hits cost less.
    pub fn is_monotone(&self) -> bool {
        self.coef_input > 0.0 && self.coef_cached < 0.0
    }

    /// Profile the engine on the standard grid up to `user_mil` and fit.
    pub fn calibrate(engine: &Engine, user_mil: u64, par: Parallelism) -> Result<Self> {
        let samples = profile_grid(engine, user_mil, None, par)?;
        let profile = fit(&samples)?;
        if !profile.is_monotone() {
            return Err(Error::Fit(format!(
                "profile not monotone: coef_input {}, coef_cached {}",
                profile.coef_input, profile.coef_cached
            )));
        }
        Ok(profile)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let p: JctProfile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("jct profile: {e}")))?;
        if ![p.coef_input, p.coef_cached, p.intercept, p.fit_r2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Parse("jct profile: non-finite coefficient".into()));
        }
        Ok(p)
    }
}

/// Multiplicative Gaussian noise on profiled latencies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileNoise {
    pub rel_std: f64,
    pub seed: u64,
}

/// Grid `n_input in {1000, 2000, ...}` up to the first multiple of 1000
/// covering `user_mil`, and `n_cached in {0, 1000, ..., n_input}`.
pub fn profile_grid(
    engine: &Engine,
    user_mil: u64,
    noise: Option<ProfileNoise>,
    par: Parallelism,
) -> Result<Vec<JctSample>> {
    let top = user_mil.max(2 * GRID_STEP).div_ceil(GRID_STEP) * GRID_STEP;
    let top = top.min(engine.mil / GRID_STEP * GRID_STEP);
    if top < 2 * GRID_STEP {
        return Err(Error::config(format!(
            "engine max input length {} too short to profile",
            engine.mil
        )));
    }
    let rows: Vec<u64> = (1..=top / GRID_STEP).map(|k| k * GRID_STEP).collect();
    let per_row = par::try_map(par, &rows, |&n_input| -> Result<Vec<JctSample>> {
        let mut rng = noise.map(|nz| {
            let mut rng = ChaCha8Rng::seed_from_u64(nz.seed);
            rng.set_stream(n_input);
            (rng, Normal::new(1.0, nz.rel_std).expect("finite std"))
        });
        (0..=n_input / GRID_STEP)
            .map(|j| {
                let n_cached = j * GRID_STEP;
                let mut latency = engine.time(n_input, n_cached)?;
                if let Some((rng, dist)) = rng.as_mut() {
                    latency *= dist.sample(rng).max(0.05);
                }
                Ok(JctSample {
                    n_input,
                    n_cached,
                    latency,
                })
            })
            .collect()
    })?;
    Ok(per_row.into_iter().flatten().collect())
}

/// Ordinary least squares of latency on `(n_input, n_cached, 1)`.
pub fn fit(samples: &[JctSample]) -> Result<JctProfile> {
    if samples.len() < 3 {
        return Err(Error::Fit(format!("need >= 3 samples, got {}", samples.len())));
    }
    let first = samples[0].n_input;
    if samples.iter().all(|s| s.n_input == first) {
        return Err(Error::Fit("need >= 2 distinct input lengths".into()));
    }
    let m = samples.len() as f64;
    let mean = |f: &dyn Fn(&JctSample) -> f64| samples.iter().map(f).sum::<f64>() / m;
    let mx = mean(&|s| s.n_input as f64);
    let mc = mean(&|s| s.n_cached as f64);
    let my = mean(&|s| s.latency);

    // Centered normal equations.
    let (mut sxx, mut scc, mut sxc, mut sxy, mut scy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let x = s.n_input as f64 - mx;
        let c = s.n_cached as f64 - mc;
        let y = s.latency - my;
        sxx += x * x;
        scc += c * c;
        sxc += x * c;
        sxy += x * y;
        scy += c * y;
        syy += y * y;
    }
    let det = sxx * scc - sxc * sxc;
    if !(det > 1e-12 * sxx * scc) {
        return Err(Error::Fit("design matrix is rank deficient".into()));
    }
    let coef_input = (sxy * scc - scy * sxc) / det;
    let coef_cached = (scy * sxx - sxy * sxc) / det;
    let intercept = my - coef_input * mx - coef_cached * mc;

    let ss_res: f64 = samples
        .iter()
        .map(|s| {
            let pred = coef_input * s.n_input as f64 + coef_cached * s.n_cached as f64 + intercept;
            (s.latency - pred).powi(2)
        })
        .sum();
    let fit_r2 = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(JctProfile {
        coef_input,
        coef_cached,
        intercept,
        fit_r2,
    })
}

/// Number of cache-miss tokens.
pub fn proxy_miss(n_input: u64, n_cached: u64) -> Result<u64> {
    n_input.checked_sub(n_cached).ok_or_else(|| {
        Error::config(format!("cached tokens {n_cached} exceed input {n_input}"))
    })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::config("pearson needs two equal-length series of >= 2"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::config("pearson undefined for zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
