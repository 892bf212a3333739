// SPDX-License-Identifier: Apache-2.0

//! A small dense f64 tensor core and a toy decoder block, used to check
//! that chunking the non-attention layers changes nothing numerically and
//! to measure what output preallocation and in-place reuse save.

mod block;
mod tracker;

pub use block::{
    block_forward_full, block_forward_hybrid, peak_ratio, random_input, verify, HybridOptions, ToyBlockParams,
    VerifyReport,
};
pub use tracker::{AllocKind, LedgerEvent, ScratchTracker};

use crate::error::{Error, Result};

pub const F64_BYTES: u64 = 8;

fn dot_row(x: &[f64], w: &Matrix, acc: &mut [f64]) {
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (p, &a) in x.iter().enumerate() {
        for (o, &b) in acc.iter_mut().zip(w.row(p)) {
            *o += a * b;
        }
    }
}

/// Row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() as u64) * F64_BYTES
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Rows `start..end` of `self` times `w`, written to rows
    /// `dst_start..` of `dst`. Every output row is a fixed-order dot
    /// product, so results do not depend on how rows are grouped.
    pub fn matmul_rows_into(
        &self,
        start: usize,
        end: usize,
        w: &Matrix,
        dst: &mut Matrix,
        dst_start: usize,
    ) -> Result<()> {
        self.check_rows(start, end, w, dst, dst_start)?;
        let mut acc = vec![0.0; w.cols];
        for (k, i) in (start..end).enumerate() {
            dot_row(self.row(i), w, &mut acc);
            dst.row_mut(dst_start + k).copy_from_slice(&acc);
        }
        Ok(())
    }

    /// As [`matmul_rows_into`](Self::matmul_rows_into) but adds the
    /// products onto the existing rows of `dst`.
    pub fn matmul_rows_accumulate(
        &self,
        start: usize,
        end: usize,
        w: &Matrix,
        dst: &mut Matrix,
        dst_start: usize,
    ) -> Result<()> {
        self.check_rows(start, end, w, dst, dst_start)?;
        let mut acc = vec![0.0; w.cols];
        for (k, i) in (start..end).enumerate() {
            dot_row(self.row(i), w, &mut acc);
            for (d, a) in dst.row_mut(dst_start + k).iter_mut().zip(&acc) {
                *d += a;
            }
        }
        Ok(())
    }

    /// Replace rows `start..end` with their product by the square `w`.
    /// Each row only reads itself, so one row of scratch suffices.
    pub fn matmul_rows_in_place(&mut self, start: usize, end: usize, w: &Matrix) -> Result<()> {
        if w.rows != self.cols || w.cols != self.cols || start > end || end > self.rows {
            return Err(Error::Shape(format!(
                "in-place rows {start}..{end} of {}x{} times {}x{}",
                self.rows, self.cols, w.rows, w.cols
            )));
        }
        let mut acc = vec![0.0; w.cols];
        for i in start..end {
            dot_row(self.row(i), w, &mut acc);
            self.row_mut(i).copy_from_slice(&acc);
        }
        Ok(())
    }

    fn check_rows(&self, start: usize, end: usize, w: &Matrix, dst: &Matrix, dst_start: usize) -> Result<()> {
        if self.cols != w.rows
            || dst.cols != w.cols
            || start > end
            || end > self.rows
            || dst_start + (end - start) > dst.rows
        {
            return Err(Error::Shape(format!(
                "rows {start}..{end} of {}x{} times {}x{} into {}x{} at {dst_start}",
                self.rows, self.cols, w.rows, w.cols, dst.rows, dst.cols
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, w: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, w.cols);
        self.matmul_rows_into(0, self.rows, w, &mut out, 0)?;
        Ok(out)
    }

    /// Largest elementwise relative error against `reference`.
    pub fn max_rel_error(&self, reference: &Matrix) -> Result<f64> {
        if (self.rows, self.cols) != (reference.rows, reference.cols) {
            return Err(Error::Shape("compared matrices differ in shape".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max))
    }

    /// FNV-1a over the bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
