//! Command set shared by the compiler, the NPU cores and the PIM control unit.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::memmap::{Footprint, MatrixId, ParamKey, TileMap};

pub type CmdId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum IsaError {
    #[error("dependency cycle through commands {0:?}")]
    Cycle(Vec<CmdId>),
    #[error("command {cmd} depends on unknown command {dep}")]
    UnknownDep { cmd: CmdId, dep: CmdId },
    #[error("duplicate command id {0}")]
    DuplicateId(CmdId),
    #[error("PIM macro window {rows}x{cols} exceeds matrix `{name}` ({mrows}x{mcols})")]
    Window {
        name: String,
        rows: u64,
        cols: u64,
        mrows: u64,
        mcols: u64,
    },
}

/// Execution resource a command occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Unit {
    Mu,
    Vu,
    Dma,
    /// PIM control unit (device-wide, executes macros in order).
    Pcu,
    /// On-chip network, used for inter-core synchronization.
    Noc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Target {
    Core(u32),
    Device,
}

/// Layer class used for latency breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OpClass {
    Embedding,
    LayerNorm,
    FcQkv,
    SelfAttention,
    FcProj,
    Ffn,
    Residual,
    LmHead,
    Sync,
}

impl OpClass {
    pub const ALL: [OpClass; 9] = [
        OpClass::Embedding,
        OpClass::LayerNorm,
        OpClass::FcQkv,
        OpClass::SelfAttention,
        OpClass::FcProj,
        OpClass::Ffn,
        OpClass::Residual,
        OpClass::LmHead,
        OpClass::Sync,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpClass::Embedding => "embedding",
            OpClass::LayerNorm => "layernorm",
            OpClass::FcQkv => "fc_qkv",
            OpClass::SelfAttention => "self_attention",
            OpClass::FcProj => "fc_proj",
            OpClass::Ffn => "ffn",
            OpClass::Residual => "residual",
            OpClass::LmHead => "lm_head",
            OpClass::Sync => "sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Spad {
    Am,
    Wm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SpadAddr {
    pub mem: Spad,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MuOp {
    Fc,
    QkT,
    Sv,
}

/// Matrix-unit GEMM: `m x k` activations times `k x n` operand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuOperand {
    pub op: MuOp,
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub weight: Option<ParamKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum VuOp {
    LayerNorm,
    Softmax,
    Gelu,
    Residual,
    Concat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VuOperand {
    pub op: VuOp,
    pub elems: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DmaOp {
    Load,
    Store,
    /// On-chip AM to WM copy with transposition.
    Transpose,
    /// On-chip AM to WM copy.
    Move,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DmaOperand {
    pub op: DmaOp,
    pub bytes: u64,
    pub footprint: Footprint,
    pub param: Option<ParamKey>,
}

impl DmaOperand {
    pub fn is_offchip(&self) -> bool {
        matches!(self.op, DmaOp::Load | DmaOp::Store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PimOp {
    Fc,
    QkT,
    Sv,
}

/// GEMV over the top-left `rows x cols` window of a tiled matrix, repeated per token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PimOperand {
    pub op: PimOp,
    pub matrix: MatrixId,
    pub rows: u64,
    pub cols: u64,
    pub tokens: u64,
    pub gelu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncOperand {
    /// Bytes all-gathered between the cores of one device.
    pub bytes: u64,
    /// Bytes each device contributes to a cross-device all-gather (0 on one device).
    pub gather_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CommandKind {
    Mu(MuOperand),
    Vu(VuOperand),
    Dma(DmaOperand),
    Pim(PimOperand),
    Sync(SyncOperand),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Command {
    pub id: CmdId,
    pub kind: CommandKind,
    pub target: Target,
    pub deps: Vec<CmdId>,
    pub class: OpClass,
    pub block: u32,
    pub out_addr: Option<SpadAddr>,
}

impl Command {
    pub fn unit(&self) -> Unit {
        match self.kind {
            CommandKind::Mu(_) => Unit::Mu,
            CommandKind::Vu(_) => Unit::Vu,
            CommandKind::Dma(_) => Unit::Dma,
            CommandKind::Pim(_) => Unit::Pcu,
            CommandKind::Sync(_) => Unit::Noc,
        }
    }

    pub fn is_offchip_dma(&self) -> bool {
        matches!(&self.kind, CommandKind::Dma(d) if d.is_offchip())
    }
}

/// Checks that ids are unique, deps exist, and the dependency graph is acyclic.
/// Returns a topological order of the commands' indices.
pub fn topo_validate(cmds: &[Command]) -> Result<Vec<usize>, IsaError> {
    let mut index: HashMap<CmdId, usize> = HashMap::with_capacity(cmds.len());
    for (i, c) in cmds.iter().enumerate() {
        if index.insert(c.id, i).is_some() {
            return Err(IsaError::DuplicateId(c.id));
        }
    }
    let mut indeg = vec![0usize; cmds.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); cmds.len()];
    for (i, c) in cmds.iter().enumerate() {
        for d in &c.deps {
            let j = *index.get(d).ok_or(IsaError::UnknownDep { cmd: c.id, dep: *d })?;
            indeg[i] += 1;
            users[j].push(i);
        }
    }
    let mut order = Vec::with_capacity(cmds.len());
    let mut stack: Vec<usize> = (0..cmds.len()).filter(|&i| indeg[i] == 0).rev().collect();
    while let Some(i) = stack.pop() {
        order.push(i);
        for &u in &users[i] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                stack.push(u);
            }
        }
    }
    if order.len() == cmds.len() {
        return Ok(order);
    }
    Err(IsaError::Cycle(find_cycle(cmds, &index, &indeg)))
}

fn find_cycle(cmds: &[Command], index: &HashMap<CmdId, usize>, indeg: &[usize]) -> Vec<CmdId> {
    // every unresolved node has an unresolved dep; walk deps until a node repeats
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut path = Vec::new();
    let mut cur = (0..cmds.len()).find(|&i| indeg[i] > 0).unwrap_or(0);
    loop {
        if let Some(&pos) = seen.get(&cur) {
            return path[pos..].iter().map(|&i: &usize| cmds[i].id).collect();
        }
        seen.insert(cur, path.len());
        path.push(cur);
        cur = cmds[cur]
            .deps
            .iter()
            .map(|d| index[d])
            .find(|&j| indeg[j] > 0)
            .unwrap_or(cur);
    }
}

/// PIM micro-commands issued by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MicroKind {
    /// Write one column (16 elements) of the input vector into the global buffer.
    WriteGb,
    ActAll,
    /// All-bank multiply-accumulate over one column burst.
    MacAll,
    /// Apply the activation-function lookup to the accumulators.
    ActFunc,
    /// Read the accumulators of every bank out over the data bus.
    ReadAcc,
    PreAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MicroPimCommand {
    pub kind: MicroKind,
    pub row: u64,
    pub col: u64,
}

/// Per-channel micro-command streams of one macro, for a single token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroProgram {
    pub channels: Vec<(u32, Vec<MicroPimCommand>)>,
}

impl MacroProgram {
    pub fn count(&self, kind: MicroKind) -> u64 {
        self.channels
            .iter()
            .flat_map(|(_, s)| s.iter())
            .filter(|m| m.kind == kind)
            .count() as u64
    }
}

/// Expands a GEMV over the `rows x cols` window of `tm` into per-channel streams.
///
/// Tiles are visited row-major. The global buffer is refilled whenever the
/// column tile changes; accumulators are read out after the last column tile of
/// each row group.
pub fn expand_macro(
    tm: &TileMap,
    rows: u64,
    cols: u64,
    gelu: bool,
) -> Result<MacroProgram, IsaError> {
    if rows > tm.rows || cols > tm.cols {
        return Err(IsaError::Window {
            name: tm.name.clone(),
            rows,
            cols,
            mrows: tm.rows,
            mcols: tm.cols,
        });
    }
    let mut channels: Vec<(u32, Vec<MicroPimCommand>)> =
        tm.channels.iter().map(|&c| (c, Vec::new())).collect();
    if rows == 0 || cols == 0 {
        return Ok(MacroProgram { channels });
    }
    let banks = tm.banks_per_channel as u64;
    let epc = tm.elems_per_column;
    let tile_rows = rows.div_ceil(tm.rows_per_tile);
    let tile_cols = cols.div_ceil(tm.cols_per_tile);
    for (ci, (_, seq)) in channels.iter_mut().enumerate() {
        let lane_lo = ci as u64 * banks;
        let mut gb_segment: Option<u64> = None;
        for tr in 0..tile_rows {
            let row_start = tr * tm.rows_per_tile;
            let active = (rows - row_start).min(tm.rows_per_tile);
            if active <= lane_lo {
                continue;
            }
            for tc in 0..tile_cols {
                let t = tm.tile(tr * tm.grid().1 + tc);
                let col_extent = (cols - t.col_start).min(tm.cols_per_tile);
                let bursts = col_extent.div_ceil(epc);
                if gb_segment != Some(tc) {
                    for k in 0..bursts {
                        seq.push(MicroPimCommand {
                            kind: MicroKind::WriteGb,
                            row: 0,
                            col: k,
                        });
                    }
                    gb_segment = Some(tc);
                }
                seq.push(MicroPimCommand {
                    kind: MicroKind::ActAll,
                    row: t.dram_row,
                    col: 0,
                });
                for k in 0..bursts {
                    seq.push(MicroPimCommand {
                        kind: MicroKind::MacAll,
                        row: t.dram_row,
                        col: k,
                    });
                }
                if tc + 1 == tile_cols {
                    if gelu {
                        seq.push(MicroPimCommand {
                            kind: MicroKind::ActFunc,
                            row: t.dram_row,
                            col: 0,
                        });
                    }
                    seq.push(MicroPimCommand {
                        kind: MicroKind::ReadAcc,
                        row: t.dram_row,
                        col: 0,
                    });
                }
                seq.push(MicroPimCommand {
                    kind: MicroKind::PreAll,
                    row: t.dram_row,
                    col: 0,
                });
            }
        }
    }
    Ok(MacroProgram { channels })
}

/// Kind of a DRAM command as it appears in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TraceKind {
    Act,
    Rd,
    Wr,
    Pre,
    ActAll,
    MacAll,
    WriteGb,
    ActFunc,
    ReadAcc,
    PreAll,
}

impl TraceKind {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            TraceKind::Act => "ACT",
            TraceKind::Rd => "RD",
            TraceKind::Wr => "WR",
            TraceKind::Pre => "PRE",
            TraceKind::ActAll => "ACT_ALL",
            TraceKind::MacAll => "MAC_ALL",
            TraceKind::WriteGb => "WRITE_GB",
            TraceKind::ActFunc => "ACT_FUNC",
            TraceKind::ReadAcc => "READ_ACC",
            TraceKind::PreAll => "PRE_ALL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ACT" => TraceKind::Act,
            "RD" => TraceKind::Rd,
            "WR" => TraceKind::Wr,
            "PRE" => TraceKind::Pre,
            "ACT_ALL" => TraceKind::ActAll,
            "MAC_ALL" => TraceKind::MacAll,
            "WRITE_GB" => TraceKind::WriteGb,
            "ACT_FUNC" => TraceKind::ActFunc,
            "READ_ACC" => TraceKind::ReadAcc,
            "PRE_ALL" => TraceKind::PreAll,
            _ => return None,
        })
    }

    pub fn all_bank(&self) -> bool {
        !matches!(
            self,
            TraceKind::Act | TraceKind::Rd | TraceKind::Wr | TraceKind::Pre
        )
    }

    pub fn from_micro(k: MicroKind) -> Self {
        match k {
            MicroKind::WriteGb => TraceKind::WriteGb,
            MicroKind::ActAll => TraceKind::ActAll,
            MicroKind::MacAll => TraceKind::MacAll,
            MicroKind::ActFunc => TraceKind::ActFunc,
            MicroKind::ReadAcc => TraceKind::ReadAcc,
            MicroKind::PreAll => TraceKind::PreAll,
        }
    }
}

/// One issued DRAM command, timestamped in memory clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub channel: u32,
    /// `None` for commands addressed to every bank.
    pub bank: Option<u32>,
    pub kind: TraceKind,
    pub row: u64,
    pub col: u64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bank = match self.bank {
            Some(b) => b.to_string(),
            None => "*".to_string(),
        };
        write!(
            f,
            "{} {} {} {} {} {}",
            self.cycle,
            self.channel,
            bank,
            self.kind.mnemonic(),
            self.row,
            self.col
        )
    }
}

impl std::str::FromStr for TraceRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, got {}: `{s}`", f.len()));
        }
        let num = |x: &str| x.parse::<u64>().map_err(|e| format!("`{x}`: {e}"));
        Ok(TraceRecord {
            cycle: num(f[0])?,
            channel: num(f[1])? as u32,
            bank: if f[2] == "*" {
                None
            } else {
                Some(num(f[2])? as u32)
            },
            kind: TraceKind::parse(f[3]).ok_or_else(|| format!("unknown command `{}`", f[3]))?,
            row: num(f[4])?,
            col: num(f[5])?,
        })
    }
}
