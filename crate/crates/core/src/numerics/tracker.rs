// SPDX-License-Identifier: Apache-2.0

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub label: &'static str,
    pub bytes: u64,
    pub kind: AllocKind,
}

/// Byte accounting of every buffer a forward pass allocates.
#[derive(Debug, Clone, Default)]
pub struct ScratchTracker {
    current: u64,
    peak: u64,
    ledger: Vec<LedgerEvent>,
    stages: Vec<(&'static str, u64)>,
}

impl ScratchTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn ledger(&self) -> &[LedgerEvent] {
        &self.ledger
    }

    /// Peak bytes observed during each stage, in execution order.
    pub fn stage_peaks(&self) -> &[(&'static str, u64)] {
        &self.stages
    }

    pub fn stage_peak(&self, label: &str) -> Option<u64> {
        self.stages.iter().find(|(l, _)| *l == label).map(|&(_, p)| p)
    }

    /// Start a stage; its peak starts from whatever is live now.
    pub fn begin_stage(&mut self, label: &'static str) {
        self.stages.push((label, self.current));
    }

    pub fn alloc(&mut self, label: &'static str, rows: usize, cols: usize) -> Matrix {
        let m = Matrix::zeros(rows, cols);
        self.record(label, m.bytes());
        m
    }

    /// Account for a buffer produced outside [`alloc`](Self::alloc).
    pub fn adopt(&mut self, label: &'static str, m: &Matrix) {
        self.record(label, m.bytes());
    }

    fn record(&mut self, label: &'static str, bytes: u64) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
        if let Some((_, p)) = self.stages.last_mut() {
            *p = (*p).max(self.current);
        }
        self.ledger.push(LedgerEvent {
            label,
            bytes,
            kind: AllocKind::Alloc,
        });
    }

    pub fn free(&mut self, label: &'static str, m: Matrix) {
        let bytes = m.bytes();
        assert!(bytes <= self.current, "freeing {bytes} bytes with {} live", self.current);
        self.current -= bytes;
        self.ledger.push(LedgerEvent {
            label,
            bytes,
            kind: AllocKind::Free,
        });
    }

    /// Replay the ledger: live bytes never go negative, every prefix
    /// conserves bytes, and the recorded peak and current are reproduced.
    pub fn check_ledger(&self) -> Result<(), String> {
        let (mut allocated, mut freed, mut peak) = (0u64, 0u64, 0u64);
        for (i, e) in self.ledger.iter().enumerate() {
            match e.kind {
                AllocKind::Alloc => allocated += e.bytes,
                AllocKind::Free => freed += e.bytes,
            }
            if freed > allocated {
                return Err(format!("event {i} ({}) frees more than was allocated", e.label));
            }
            peak = peak.max(allocated - freed);
        }
        if allocated - freed != self.current {
            return Err(format!("ledger leaves {} live, tracker says {}", allocated - freed, self.current));
        }
        if peak != self.peak {
            return Err(format!("ledger peak {peak}, tracker peak {}", self.peak));
        }
        Ok(())
    }
}
