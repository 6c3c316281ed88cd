//! NPU core timing: matrix unit, vector unit, DMA engines, and the per-core
//! and PIM-control-unit state the scheduler keeps.

use std::collections::VecDeque;

use crate::config::HardwareConfig;
use crate::isa::{CmdId, Unit, VuOp};
use crate::Ps;

/// Systolic matrix unit cycles for an `m x k` by `k x n` product.
///
/// Each 128x64 tile (covering `mu_rows * macs_per_pe` of the reduction dim and
/// `mu_cols` outputs) pays a fill, streams the tokens in blocks of `mu_rows`,
/// and drains.
pub fn mu_cycles(hw: &HardwareConfig, m: u64, k: u64, n: u64) -> u64 {
    if m == 0 || k == 0 || n == 0 {
        return 0;
    }
    let rows = hw.mu_rows as u64;
    let cols = hw.mu_cols as u64;
    let tiles = k.div_ceil(rows * hw.macs_per_pe as u64) * n.div_ceil(cols);
    tiles * (rows + m.div_ceil(rows) * rows + cols)
}

/// Matrix-unit cycles for a product of two activations, which may be computed
/// as either `A x B` or `(B^T x A^T)^T`; the faster orientation is used.
pub fn mu_cycles_either(hw: &HardwareConfig, m: u64, k: u64, n: u64) -> u64 {
    mu_cycles(hw, m, k, n).min(mu_cycles(hw, n, k, m))
}

/// Passes over the data a vector kernel makes.
pub fn vu_passes(op: VuOp) -> u64 {
    match op {
        VuOp::LayerNorm => 2,
        _ => 1,
    }
}

pub fn vu_cycles(hw: &HardwareConfig, op: VuOp, elems: u64) -> u64 {
    if elems == 0 {
        return 0;
    }
    let per_pass = elems.div_ceil(hw.vu_lanes as u64 * hw.vu_width as u64);
    hw.vu_startup_cycles + vu_passes(op) * per_pass
}

/// Lane operations a vector kernel performs (energy accounting).
pub fn vu_lane_ops(op: VuOp, elems: u64) -> u64 {
    vu_passes(op) * elems
}

/// Cycles to stream `bytes` between the two scratchpads.
pub fn onchip_cycles(hw: &HardwareConfig, bytes: u64) -> u64 {
    bytes.div_ceil(hw.onchip_bytes_per_cycle)
}

/// Off-chip bandwidth the NPU sees in the current memory mode.
pub fn npu_mem_bw(hw: &HardwareConfig) -> f64 {
    hw.channel_bw() * hw.npu_channels().len() as f64
}

/// Estimated time for one core to move `bytes` while all cores stream concurrently.
pub fn dma_estimate_ps(hw: &HardwareConfig, bytes: u64) -> Ps {
    if bytes == 0 {
        return 0;
    }
    let share = npu_mem_bw(hw) / hw.num_cores as f64;
    (bytes as f64 / share * 1e12).round() as Ps + (hw.dma_overhead_ns * 1e3).round() as Ps
}

/// Double-buffered overlap of unequal stages: the loads back to back followed by
/// the last compute, or the first load followed by every compute, whichever is
/// longer. Reduces to [`pipe`] when all chunks are equal.
pub fn pipe_uneven(loads: Ps, first_load: Ps, computes: Ps, last_compute: Ps) -> Ps {
    (loads + last_compute).max(first_load + computes)
}

/// Double-buffered overlap of `chunks` equal (load, compute) pairs.
pub fn pipe(load: Ps, compute: Ps, chunks: u64) -> Ps {
    if chunks == 0 {
        return 0;
    }
    load.max(compute) * (chunks - 1) + load + compute
}

/// Per-core bookkeeping used by the scheduler.
#[derive(Debug, Clone)]
pub struct CoreState {
    /// Program-order command indices per unit, consumed from the front.
    pub queues: [VecDeque<usize>; 3],
    pub busy: [Option<CmdId>; 3],
    /// Program-order positions of this core's commands, for the pending window.
    pub program: Vec<usize>,
    /// Number of leading program entries that have completed.
    pub retired_prefix: usize,
    pub retired: Vec<bool>,
    /// Completion time of the last command on each unit.
    pub free_at: [Ps; 3],
    pub last_on_unit: [Option<usize>; 3],
}

impl CoreState {
    pub fn new() -> Self {
        CoreState {
            queues: Default::default(),
            busy: [None; 3],
            program: Vec::new(),
            retired_prefix: 0,
            retired: Vec::new(),
            free_at: [0; 3],
            last_on_unit: [None; 3],
        }
    }

    pub fn slot(unit: Unit) -> usize {
        match unit {
            Unit::Mu => 0,
            Unit::Vu => 1,
            Unit::Dma => 2,
            Unit::Pcu | Unit::Noc => unreachable!("device unit on a core"),
        }
    }

    /// Marks the command at program position `pos` complete and advances the window.
    pub fn retire(&mut self, pos: usize) {
        self.retired[pos] = true;
        while self.retired_prefix < self.retired.len() && self.retired[self.retired_prefix] {
            self.retired_prefix += 1;
        }
    }

    /// True when program position `pos` lies inside the pending window.
    pub fn in_window(&self, pos: usize, slots: usize) -> bool {
        pos < self.retired_prefix + slots
    }
}

impl Default for CoreState {
    fn default() -> Self {
        Self::new()
    }
}

/// PIM control unit: executes device macros in program order, one at a time.
#[derive(Debug, Clone, Default)]
pub struct PcuState {
    pub queue: VecDeque<usize>,
    pub active: Option<usize>,
    pub free_at: Ps,
    pub last: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw() -> HardwareConfig {
        HardwareConfig::default()
    }

    #[test]
    fn one_token_one_tile() {
        // single tile: fill 128, one token block, drain 64
        assert_eq!(mu_cycles(&hw(), 1, 512, 64), 128 + 128 + 64);
        assert_eq!(mu_cycles(&hw(), 0, 512, 64), 0);
    }

    #[test]
    fn mu_constant_for_small_batches() {
        let h = hw();
        let a = mu_cycles(&h, 4, 1024, 256);
        assert_eq!(a, mu_cycles(&h, 8, 1024, 256));
        assert_eq!(a, mu_cycles(&h, 16, 1024, 256));
        assert!(mu_cycles(&h, 129, 1024, 256) > a);
    }

    #[test]
    fn mu_peak_consistent() {
        // long token streams approach the per-core peak
        let h = hw();
        let m = 128 * 1000;
        let cyc = mu_cycles(&h, m, 512, 64) as f64;
        let flops = 2.0 * m as f64 * 512.0 * 64.0;
        let rate = flops / (cyc / h.npu_freq);
        let peak = h.derive_peaks().mu_flops_per_core;
        assert!(rate <= peak && rate > 0.99 * peak, "{rate} vs {peak}");
    }

    #[test]
    fn score_product_uses_faster_orientation() {
        let h = hw();
        // one query against 512 keys: keys stream through, query stays resident
        assert_eq!(mu_cycles_either(&h, 1, 64, 512), 128 + 512 + 64);
        assert!(mu_cycles_either(&h, 1, 64, 512) < mu_cycles(&h, 1, 64, 512));
        assert_eq!(mu_cycles_either(&h, 300, 64, 300), mu_cycles(&h, 300, 64, 300));
    }

    #[test]
    fn vu_layernorm_two_passes() {
        let h = hw();
        assert_eq!(vu_cycles(&h, VuOp::LayerNorm, 6400), 32 + 2 * 100);
        assert_eq!(vu_cycles(&h, VuOp::Residual, 6400), 32 + 100);
        assert_eq!(vu_cycles(&h, VuOp::Softmax, 0), 0);
    }

    #[test]
    fn transpose_bytes_over_bw() {
        // 64x64 BF16 block
        assert_eq!(onchip_cycles(&hw(), 64 * 64 * 2), 8192 / 256);
        assert_eq!(onchip_cycles(&hw(), 0), 0);
    }

    #[test]
    fn dma_four_mb() {
        let h = hw();
        // 4 MB split over four cores at 64 GB/s each
        let t = dma_estimate_ps(&h, (4 << 20) / 4) as f64 * 1e-12;
        let want = (4u64 << 20) as f64 / 256e9 + 200e-9;
        assert!((t - want).abs() < 1e-9, "{t} {want}");
    }

    #[test]
    fn pipe_composition() {
        assert_eq!(pipe(10, 4, 1), 14);
        assert_eq!(pipe(10, 4, 3), 10 * 2 + 14);
        assert_eq!(pipe(3, 7, 0), 0);
        for (a, b, t) in [(10, 4, 3), (3, 7, 5), (6, 6, 1)] {
            assert_eq!(pipe_uneven(a * t, a, b * t, b), pipe(a, b, t));
        }
    }

    #[test]
    fn window_advances_on_prefix() {
        let mut c = CoreState::new();
        c.retired = vec![false; 4];
        assert!(c.in_window(1, 2) && !c.in_window(2, 2));
        c.retire(1);
        assert_eq!(c.retired_prefix, 0);
        c.retire(0);
        assert_eq!(c.retired_prefix, 2);
        assert!(c.in_window(3, 2));
    }
}
