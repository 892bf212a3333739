// SPDX-License-Identifier: Apache-2.0

//! Toy decoder block: causal single-head attention, an output projection
//! with a residual, and a SiLU-gated MLP.
//!
//! The hybrid path runs attention over every row at once and everything
//! else chunk by chunk. Attention scores are formed one query row at a
//! time, so attention scratch is a single row of length n in both paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, ScratchTracker};
use crate::error::{Error, Result};

pub const STAGE_QKV: &str = "qkv";
pub const STAGE_ATTENTION: &str = "attention";
pub const STAGE_MLP: &str = "mlp";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlockParams {
    /// hidden x 3 hidden
    pub w_qkv: Matrix,
    /// hidden x hidden
    pub w_out: Matrix,
    /// hidden x 2 intermediate, gate columns first
    pub w_gate_up: Matrix,
    /// intermediate x hidden
    pub w_down: Matrix,
}

impl ToyBlockParams {
    pub fn hidden(&self) -> usize {
        self.w_out.rows()
    }

    pub fn intermediate(&self) -> usize {
        self.w_down.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden(), self.intermediate());
        let shapes = [
            ("w_qkv", &self.w_qkv, (h, 3 * h)),
            ("w_out", &self.w_out, (h, h)),
            ("w_gate_up", &self.w_gate_up, (h, 2 * i)),
            ("w_down", &self.w_down, (i, h)),
        ];
        for (name, m, want) in shapes {
            if (m.rows(), m.cols()) != want || h == 0 || i == 0 {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    want.0,
                    want.1
                )));
            }
        }
        Ok(())
    }

    /// Uniform weights scaled by 1/sqrt(fan_in).
    pub fn random(hidden: usize, intermediate: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            Matrix::from_vec(rows, cols, data).expect("finite weights")
        };
        ToyBlockParams {
            w_qkv: w(hidden, 3 * hidden),
            w_out: w(hidden, hidden),
            w_gate_up: w(hidden, 2 * intermediate),
            w_down: w(intermediate, hidden),
        }
    }
}

/// Uniform input in [-1, 1).
pub fn random_input(n: usize, hidden: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let data = (0..n * hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(n, hidden, data).expect("finite input")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridOptions {
    pub chunk: usize,
    /// Allocate each stage's output once before its chunk loop.
    pub prealloc: bool,
    /// Write a stage's output over its input when shapes match.
    pub inplace: bool,
}

impl HybridOptions {
    pub fn new(chunk: usize) -> Self {
        HybridOptions {
            chunk,
            prealloc: true,
            inplace: true,
        }
    }
}

fn check_input(params: &ToyBlockParams, x: &Matrix) -> Result<()> {
    params.validate()?;
    if x.cols() != params.hidden() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "input is {}x{}, block hidden size {}",
            x.rows(),
            x.cols(),
            params.hidden()
        )));
    }
    Ok(())
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn attention(qkv: &Matrix, t: &mut ScratchTracker) -> Matrix {
    let (n, h) = (qkv.rows(), qkv.cols() / 3);
    let scale = 1.0 / (h as f64).sqrt();
    let mut out = t.alloc("attn_out", n, h);
    let mut scores = t.alloc("scores", 1, n);
    for i in 0..n {
        let q = &qkv.row(i)[..h];
        let s = scores.row_mut(0);
        let mut max = f64::NEG_INFINITY;
        for (j, sj) in s[..=i].iter_mut().enumerate() {
            let k = &qkv.row(j)[h..2 * h];
            *sj = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*sj);
        }
        let mut sum = 0.0;
        for v in &mut s[..=i] {
            *v = (*v - max).exp();
            sum += *v;
        }
        let o = out.row_mut(i);
        for (j, sj) in s[..=i].iter().enumerate() {
            let p = sj / sum;
            for (dst, v) in o.iter_mut().zip(&qkv.row(j)[2 * h..]) {
                *dst += p * v;
            }
        }
    }
    t.free("scores", scores);
    out
}

fn out_proj(p: &ToyBlockParams, attn: &Matrix, start: usize, end: usize, t: &mut ScratchTracker) -> Result<Matrix> {
    let mut o = t.alloc("out_proj", end - start, p.hidden());
    attn.matmul_rows_into(start, end, &p.w_out, &mut o, 0)?;
    Ok(o)
}

/// Gate/up projection and SiLU gating for rows `start..end` of `src`.
fn gated_rows(p: &ToyBlockParams, src: &Matrix, start: usize, end: usize, t: &mut ScratchTracker) -> Result<Matrix> {
    let (rows, i) = (end - start, p.intermediate());
    let mut gu = t.alloc("gate_up", rows, 2 * i);
    src.matmul_rows_into(start, end, &p.w_gate_up, &mut gu, 0)?;
    let mut act = t.alloc("silu", rows, i);
    let mut gated = t.alloc("gated", rows, i);
    for r in 0..rows {
        let (gate, up) = gu.row(r).split_at(i);
        let a = act.row_mut(r);
        for (a, g) in a.iter_mut().zip(gate) {
            *a = silu(*g);
        }
        for ((dst, a), u) in gated.row_mut(r).iter_mut().zip(act.row(r)).zip(up) {
            *dst = a * u;
        }
    }
    t.free("gate_up", gu);
    t.free("silu", act);
    Ok(gated)
}

/// Down projection of `gated` plus the residual rows `res_start..` of
/// `residual`, written to rows `at..` of `dst`.
fn down_into(
    p: &ToyBlockParams,
    gated: &Matrix,
    residual: &Matrix,
    res_start: usize,
    dst: &mut Matrix,
    at: usize,
) -> Result<()> {
    gated.matmul_rows_into(0, gated.rows(), &p.w_down, dst, at)?;
    for r in 0..gated.rows() {
        for (d, v) in dst.row_mut(at + r).iter_mut().zip(residual.row(res_start + r)) {
            *d += v;
        }
    }
    Ok(())
}

/// Every stage over all rows at once.
pub fn block_forward_full(params: &ToyBlockParams, x: &Matrix, t: &mut ScratchTracker) -> Result<Matrix> {
    check_input(params, x)?;
    let n = x.rows();
    t.begin_stage(STAGE_QKV);
    let mut qkv = t.alloc("qkv", n, 3 * params.hidden());
    x.matmul_rows_into(0, n, &params.w_qkv, &mut qkv, 0)?;
    t.begin_stage(STAGE_ATTENTION);
    let attn = attention(&qkv, t);
    t.free("qkv", qkv);
    t.begin_stage(STAGE_MLP);
    let o = out_proj(params, &attn, 0, n, t)?;
    t.free("attn_out", attn);
    let g = gated_rows(params, &o, 0, n, t)?;
    let mut d = t.alloc("down", n, params.hidden());
    down_into(params, &g, &o, 0, &mut d, 0)?;
    t.free("gated", g);
    t.free("out_proj", o);
    Ok(d)
}

/// Attention over all rows; qkv, out-projection, gate/up and down
/// projections chunk by chunk. A single chunk is the full path.
pub fn block_forward_hybrid(
    params: &ToyBlockParams,
    x: &Matrix,
    opts: HybridOptions,
    t: &mut ScratchTracker,
) -> Result<Matrix> {
    if opts.chunk == 0 {
        return Err(Error::Shape("chunk must be >= 1".into()));
    }
    check_input(params, x)?;
    let n = x.rows();
    if opts.chunk >= n {
        return block_forward_full(params, x, t);
    }
    let h = params.hidden();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(opts.chunk).map(|s| (s, (s + opts.chunk).min(n))).collect();

    t.begin_stage(STAGE_QKV);
    let qkv = if opts.prealloc {
        let mut qkv = t.alloc("qkv", n, 3 * h);
        for &(s, e) in &chunks {
            x.matmul_rows_into(s, e, &params.w_qkv, &mut qkv, s)?;
        }
        qkv
    } else {
        let mut pieces = Vec::with_capacity(chunks.len());
        for &(s, e) in &chunks {
            let mut piece = t.alloc("qkv_chunk", e - s, 3 * h);
            x.matmul_rows_into(s, e, &params.w_qkv, &mut piece, 0)?;
            pieces.push(piece);
        }
        // Input and output shapes differ, so the concat always allocates.
        let mut qkv = t.alloc("qkv", n, 3 * h);
        concat("qkv_chunk", pieces, &mut qkv, t);
        qkv
    };

    t.begin_stage(STAGE_ATTENTION);
    let mut attn = attention(&qkv, t);
    t.free("qkv", qkv);

    t.begin_stage(STAGE_MLP);
    let out = match (opts.prealloc, opts.inplace) {
        (true, true) => {
            // The out-projection keeps the shape, so it overwrites its own
            // rows, and the down projection adds onto them as the residual.
            for &(s, e) in &chunks {
                attn.matmul_rows_in_place(s, e, &params.w_out)?;
                let g = gated_rows(params, &attn, s, e, t)?;
                g.matmul_rows_accumulate(0, e - s, &params.w_down, &mut attn, s)?;
                t.free("gated", g);
            }
            attn
        }
        (true, false) => {
            let mut out = t.alloc("down", n, h);
            for &(s, e) in &chunks {
                let o = out_proj(params, &attn, s, e, t)?;
                let g = gated_rows(params, &o, 0, e - s, t)?;
                down_into(params, &g, &o, 0, &mut out, s)?;
                t.free("gated", g);
                t.free("out_proj", o);
            }
            t.free("attn_out", attn);
            out
        }
        (false, inplace) => {
            let mut pieces = Vec::with_capacity(chunks.len());
            for &(s, e) in &chunks {
                let piece = if inplace {
                    attn.matmul_rows_in_place(s, e, &params.w_out)?;
                    let g = gated_rows(params, &attn, s, e, t)?;
                    let mut piece = t.alloc("down_chunk", e - s, h);
                    down_into(params, &g, &attn, s, &mut piece, 0)?;
                    t.free("gated", g);
                    piece
                } else {
                    let o = out_proj(params, &attn, s, e, t)?;
                    let g = gated_rows(params, &o, 0, e - s, t)?;
                    let mut piece = t.alloc("down_chunk", e - s, h);
                    down_into(params, &g, &o, 0, &mut piece, 0)?;
                    t.free("gated", g);
                    t.free("out_proj", o);
                    piece
                };
                pieces.push(piece);
            }
            if inplace {
                concat("down_chunk", pieces, &mut attn, t);
                attn
            } else {
                let mut out = t.alloc("down", n, h);
                concat("down_chunk", pieces, &mut out, t);
                t.free("attn_out", attn);
                out
            }
        }
    };
    Ok(out)
}

fn concat(label: &'static str, pieces: Vec<Matrix>, dst: &mut Matrix, t: &mut ScratchTracker) {
    let mut row = 0;
    for piece in pieces {
        for r in 0..piece.rows() {
            dst.row_mut(row).copy_from_slice(piece.row(r));
            row += 1;
        }
        t.free(label, piece);
    }
}

/// Hybrid peak over full peak.
pub fn peak_ratio(full: &ScratchTracker, hybrid: &ScratchTracker) -> Result<f64> {
    if full.peak() == 0 {
        return Err(Error::Shape("full-path peak is zero".into()));
    }
    Ok(hybrid.peak() as f64 / full.peak() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyReport {
    pub n: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub chunk: usize,
    pub max_rel_error: f64,
    pub bitwise_equal: bool,
    pub peak_ratio_prealloc: f64,
    pub peak_ratio_no_prealloc: f64,
}

impl VerifyReport {
    pub const CSV_HEADER: &'static str =
        "n,hidden,intermediate,chunk,max_rel_error,bitwise_equal,peak_ratio_prealloc,peak_ratio_no_prealloc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:e},{},{:.6},{:.6}",
            self.n,
            self.hidden,
            self.intermediate,
            self.chunk,
            self.max_rel_error,
            self.bitwise_equal,
            self.peak_ratio_prealloc,
            self.peak_ratio_no_prealloc
        )
    }
}

/// Run one random instance through the full path and the hybrid path
/// with and without preallocation (in-place on).
pub fn verify(n: usize, hidden: usize, intermediate: usize, chunk: usize, seed: u64) -> Result<VerifyReport> {
    let params = ToyBlockParams::random(hidden, intermediate, seed);
    let x = random_input(n, hidden, seed);
    let mut tf = ScratchTracker::new();
    let full = block_forward_full(&params, &x, &mut tf)?;
    let mut th = ScratchTracker::new();
    let hybrid = block_forward_hybrid(&params, &x, HybridOptions::new(chunk), &mut th)?;
    let mut tn = ScratchTracker::new();
    let opts = HybridOptions {
        prealloc: false,
        ..HybridOptions::new(chunk)
    };
    block_forward_hybrid(&params, &x, opts, &mut tn)?;
    Ok(VerifyReport {
        n,
        hidden,
        intermediate,
        chunk,
        max_rel_error: hybrid.max_rel_error(&full)?,
        bitwise_equal: hybrid == full,
        peak_ratio_prealloc: peak_ratio(&tf, &th)?,
        peak_ratio_no_prealloc: peak_ratio(&tf, &tn)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FIXTURE_CHECKSUM: u64 = 0x4691_c118_aa62_d2e3;

    fn instance(n: usize, h: usize, i: usize, seed: u64) -> (ToyBlockParams, Matrix) {
        (ToyBlockParams::random(h, i, seed), random_input(n, h, seed))
    }

    fn run_full(p: &ToyBlockParams, x: &Matrix) -> (Matrix, ScratchTracker) {
        let mut t = ScratchTracker::new();
        let y = block_forward_full(p, x, &mut t).unwrap();
        t.check_ledger().unwrap();
        (y, t)
    }

    fn run_hybrid(p: &ToyBlockParams, x: &Matrix, opts: HybridOptions) -> (Matrix, ScratchTracker) {
        let mut t = ScratchTracker::new();
        let y = block_forward_hybrid(p, x, opts, &mut t).unwrap();
        t.check_ledger().unwrap();
        (y, t)
    }

    /// Textbook forward pass on nested vectors.
    fn reference(p: &ToyBlockParams, x: &Matrix) -> Vec<Vec<f64>> {
        let mm = |a: &[Vec<f64>], w: &Matrix| -> Vec<Vec<f64>> {
            a.iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|c| row.iter().enumerate().map(|(k, v)| v * w.get(k, c)).sum())
                        .collect()
                })
                .collect()
        };
        let (n, h, inter) = (x.rows(), p.hidden(), p.intermediate());
        let xs: Vec<Vec<f64>> = (0..n).map(|r| x.row(r).to_vec()).collect();
        let qkv = mm(&xs, &p.w_qkv);
        let mut attn = vec![vec![0.0; h]; n];
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|j| (0..h).map(|d| qkv[i][d] * qkv[j][h + d]).sum::<f64>() / (h as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for d in 0..h {
                    attn[i][d] += e[j] / z * qkv[j][2 * h + d];
                }
            }
        }
        let o = mm(&attn, &p.w_out);
        let gu = mm(&o, &p.w_gate_up);
        let gated: Vec<Vec<f64>> = gu
            .iter()
            .map(|r| (0..inter).map(|k| r[k] / (1.0 + (-r[k]).exp()) * r[inter + k]).collect())
            .collect();
        let down = mm(&gated, &p.w_down);
        down.iter().zip(&o).map(|(d, o)| d.iter().zip(o).map(|(a, b)| a + b).collect()).collect()
    }

    #[test]
    fn seed_42_matches_reference_and_fixture() {
        let (p, x) = instance(64, 16, 64, 42);
        let (y, _) = run_full(&p, &x);
        let want = reference(&p, &x);
        let flat = Matrix::from_vec(64, 16, want.concat()).unwrap();
        assert!(y.max_rel_error(&flat).unwrap() <= 1e-12);
        assert_eq!(y.checksum(), FIXTURE_CHECKSUM, "{:#x}", y.checksum());
    }

    #[test]
    fn one_token_paths_agree() {
        let (p, x) = instance(1, 8, 16, 1);
        let (a, ta) = run_full(&p, &x);
        let (b, tb) = run_hybrid(&p, &x, HybridOptions::new(1));
        assert_eq!(a, b);
        assert_eq!(ta.peak(), tb.peak());
    }

    #[test]
    fn identity_weights_zero_input_give_zero() {
        let h = 4;
        let eye = Matrix::identity(h);
        let mut qkv = Matrix::zeros(h, 3 * h);
        let mut gu = Matrix::zeros(h, 2 * h);
        for r in 0..h {
            for k in 0..3 {
                qkv.row_mut(r)[k * h + r] = 1.0;
            }
            gu.row_mut(r)[r] = 1.0;
            gu.row_mut(r)[h + r] = 1.0;
        }
        let p = ToyBlockParams {
            w_qkv: qkv,
            w_out: eye.clone(),
            w_gate_up: gu,
            w_down: eye,
        };
        let x = Matrix::zeros(10, h);
        let (y, _) = run_full(&p, &x);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (z, _) = run_hybrid(&p, &x, HybridOptions::new(3));
        assert_eq!(y, z);
    }

    #[test]
    fn chunk_equal_to_n_is_the_full_path() {
        let (p, x) = instance(64, 16, 64, 42);
        let (a, ta) = run_full(&p, &x);
        let (b, tb) = run_hybrid(&p, &x, HybridOptions::new(64));
        assert_eq!(a, b);
        assert_eq!(ta.peak(), tb.peak());
    }

    #[test]
    fn chunk_8_matches_and_mlp_peak_is_bounded() {
        let (p, x) = instance(64, 16, 64, 42);
        let (a, ta) = run_full(&p, &x);
        let (b, tb) = run_hybrid(&p, &x, HybridOptions::new(8));
        assert!(b.max_rel_error(&a).unwrap() <= 1e-9);
        let full_mlp = ta.stage_peak(STAGE_MLP).unwrap() as f64;
        let hybrid_mlp = tb.stage_peak(STAGE_MLP).unwrap() as f64;
        let out_buffer = (64 * 16 * 8) as f64;
        assert!(hybrid_mlp <= 8.0 / 64.0 * full_mlp + out_buffer, "{hybrid_mlp} vs {full_mlp}");
    }

    #[test]
    fn peak_ratio_examples() {
        let (p, x) = instance(64, 16, 64, 42);
        let (_, tf) = run_full(&p, &x);
        assert_eq!(peak_ratio(&tf, &tf).unwrap(), 1.0);
        let (_, on) = run_hybrid(&p, &x, HybridOptions::new(4));
        let ratio_on = peak_ratio(&tf, &on).unwrap();
        assert!(ratio_on < 0.5, "{ratio_on}");
        for inplace in [true, false] {
            let opts = HybridOptions {
                chunk: 4,
                prealloc: false,
                inplace,
            };
            let (_, off) = run_hybrid(&p, &x, opts);
            assert!(peak_ratio(&tf, &off).unwrap() > ratio_on);
        }
        assert!(peak_ratio(&ScratchTracker::new(), &on).is_err());
    }

    #[test]
    fn preallocated_peak_shrinks_with_chunk() {
        let (p, x) = instance(48, 8, 32, 3);
        let (_, tf) = run_full(&p, &x);
        let mut last = tf.peak();
        for chunk in (1..48).rev() {
            let (_, t) = run_hybrid(&p, &x, HybridOptions::new(chunk));
            assert!(t.peak() <= last, "chunk {chunk}");
            assert!(t.peak() < tf.peak(), "chunk {chunk}");
            last = t.peak();
        }
    }

    #[test]
    fn prealloc_gap_needs_small_chunks() {
        // With 5 of 9 rows per chunk the first MLP chunk sets both peaks.
        let (p, x) = instance(9, 8, 24, 1);
        let peak = |chunk, prealloc| {
            run_hybrid(&p, &x, HybridOptions { chunk, prealloc, inplace: true }).1.peak()
        };
        assert_eq!(peak(5, false), peak(5, true));
        assert!(peak(2, false) > peak(2, true));
    }

    #[test]
    fn every_option_combination_gives_identical_output() {
        let (p, x) = instance(37, 8, 24, 5);
        let (want, _) = run_full(&p, &x);
        for chunk in [1, 2, 5, 36] {
            for prealloc in [true, false] {
                for inplace in [true, false] {
                    let (y, t) = run_hybrid(&p, &x, HybridOptions { chunk, prealloc, inplace });
                    assert_eq!(y, want);
                    // Only the output stays live.
                    assert_eq!(t.current(), y.bytes());
                }
            }
        }
    }

    #[test]
    fn random_instances_are_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..200 {
            let h = rng.random_range(2..=12);
            let inter = rng.random_range(h..=4 * h);
            let n = rng.random_range(1..=40);
            let chunk = rng.random_range(1..=n);
            let (p, x) = instance(n, h, inter, case);
            let (a, _) = run_full(&p, &x);
            let opts = HybridOptions {
                chunk,
                prealloc: rng.random(),
                inplace: rng.random(),
            };
            let (b, _) = run_hybrid(&p, &x, opts);
            assert!(b.max_rel_error(&a).unwrap() <= 1e-9, "case {case}");
        }
    }

    #[test]
    fn shape_errors() {
        let (p, x) = instance(4, 8, 16, 0);
        let mut t = ScratchTracker::new();
        let bad = Matrix::zeros(4, 7);
        assert!(matches!(block_forward_full(&p, &bad, &mut t), Err(Error::Shape(_))));
        assert!(block_forward_hybrid(&p, &x, HybridOptions::new(0), &mut t).is_err());
        let broken = ToyBlockParams {
            w_down: Matrix::zeros(3, 8),
            ..p
        };
        assert!(block_forward_full(&broken, &x, &mut t).is_err());
    }

    #[test]
    fn verify_report_row() {
        let r = verify(64, 16, 64, 4, 42).unwrap();
        assert!(r.bitwise_equal);
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.peak_ratio_prealloc < 0.5);
        assert!(r.peak_ratio_no_prealloc > r.peak_ratio_prealloc);
        assert_eq!(r.csv_row().split(',').count(), VerifyReport::CSV_HEADER.split(',').count());
    }
}
