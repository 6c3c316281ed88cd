//! Closed-form latency estimates used to place FC layers on the matrix unit or PIM.

use serde::Serialize;

use crate::config::HardwareConfig;
use crate::npu::{dma_estimate_ps, mu_cycles, pipe_uneven};
use crate::Ps;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum FcKind {
    Qkv,
    Proj,
    Ffn1,
    Ffn2,
    Head,
}

impl FcKind {
    pub fn name(&self) -> &'static str {
        match self {
            FcKind::Qkv => "qkv",
            FcKind::Proj => "proj",
            FcKind::Ffn1 => "ffn1",
            FcKind::Ffn2 => "ffn2",
            FcKind::Head => "lm_head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Choice {
    Mu,
    Pim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FcDecision {
    pub kind: FcKind,
    pub tokens: u64,
    pub mu_ps: Ps,
    /// `None` when the weights have no PIM copy.
    pub pim_ps: Option<Ps>,
    pub prefetch_ps: Ps,
    pub choice: Choice,
}

/// Output rows per weight-load chunk for a `rows x k` per-core slice. Rows are
/// spread evenly over the fewest chunks that fit, in multiples of the MU width
/// once a chunk holds at least that many rows.
pub fn chunk_rows(hw: &HardwareConfig, k: u64, rows: u64) -> u64 {
    let per_row = k * HardwareConfig::DTYPE_BYTES;
    let cols = hw.mu_cols as u64;
    let mut fit = (hw.dma_chunk_bytes / per_row.max(1)).max(1);
    if fit >= rows {
        return rows.max(1);
    }
    if fit >= cols {
        fit = fit / cols * cols;
    }
    let chunks = rows.div_ceil(fit);
    let even = rows.div_ceil(chunks);
    if fit >= cols {
        even.div_ceil(cols) * cols
    } else {
        even
    }
}

/// Matrix-unit time for one core's `rows x k` weight slice: chunked weight loads
/// pipelined against compute, less the time a preceding vector op hides.
/// The last chunk's compute is taken at its one-row minimum so the estimate
/// never shrinks as the weight grows.
pub fn mu_fc_estimate(hw: &HardwareConfig, tokens: u64, k: u64, rows: u64, prefetch: Ps) -> Ps {
    if tokens == 0 || rows == 0 || k == 0 {
        return 0;
    }
    let bytes = rows * k * HardwareConfig::DTYPE_BYTES;
    let chunks = rows.div_ceil(chunk_rows(hw, k, rows));
    let overhead = (hw.dma_overhead_ns * 1e3).round() as Ps;
    let loads = dma_estimate_ps(hw, bytes) + (chunks - 1) * overhead;
    let first = dma_estimate_ps(hw, bytes.min(hw.dma_chunk_bytes));
    let compute = hw.npu_cycles_to_ps(mu_cycles(hw, tokens, k, rows));
    let tail = hw.npu_cycles_to_ps(mu_cycles(hw, tokens, k, 1));
    pipe_uneven(loads, first, compute, tail).saturating_sub(prefetch)
}

/// PIM time: every token replays the macro sequence.
pub fn pim_fc_estimate(hw: &HardwareConfig, tokens: u64, cycles_per_token: u64) -> Ps {
    tokens * cycles_per_token * hw.timing.tck_ps()
}

/// PIM wins only when strictly faster.
pub fn decide(mu: Ps, pim: Option<Ps>) -> Choice {
    match pim {
        Some(p) if p < mu => Choice::Pim,
        _ => Choice::Mu,
    }
}

/// Estimates both mappings of one FC layer and picks the faster.
pub fn adaptive_map_fc(
    hw: &HardwareConfig,
    kind: FcKind,
    tokens: u64,
    k: u64,
    rows_per_core: u64,
    pim_cycles_per_token: Option<u64>,
    prefetch: Ps,
) -> FcDecision {
    let mu_ps = mu_fc_estimate(hw, tokens, k, rows_per_core, prefetch);
    let pim_ps = pim_cycles_per_token.map(|c| pim_fc_estimate(hw, tokens, c));
    FcDecision {
        kind,
        tokens,
        mu_ps,
        pim_ps,
        prefetch_ps: prefetch,
        choice: decide(mu_ps, pim_ps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_keep_mu() {
        assert_eq!(decide(100, Some(100)), Choice::Mu);
        assert_eq!(decide(100, Some(99)), Choice::Pim);
        assert_eq!(decide(100, None), Choice::Mu);
    }

    #[test]
    fn pim_linear_in_tokens() {
        let hw = HardwareConfig::default();
        let one = pim_fc_estimate(&hw, 1, 2088);
        for n in [2, 7, 64] {
            assert_eq!(pim_fc_estimate(&hw, n, 2088), n * one);
        }
    }

    #[test]
    fn chunking() {
        let hw = HardwareConfig::default();
        // 256 KiB chunks of 1024-wide rows hold 128 rows
        assert_eq!(chunk_rows(&hw, 1024, 256), 128);
        assert_eq!(chunk_rows(&hw, 1024, 64), 64);
        assert_eq!(chunk_rows(&hw, 4096 * 64, 10), 1);
    }

    #[test]
    fn mu_estimate_zero_tokens() {
        let hw = HardwareConfig::default();
        assert_eq!(mu_fc_estimate(&hw, 0, 1024, 256, 0), 0);
    }

    #[test]
    fn prefetch_saturates() {
        let hw = HardwareConfig::default();
        assert_eq!(mu_fc_estimate(&hw, 1, 64, 64, Ps::MAX), 0);
    }
}
