//! Weight tiling, DRAM address mapping and parameter allocation.
//!
//! Physical addresses follow a Row | Channel | Bank | Column | byte layout
//! (MSB to LSB). A weight matrix destined for PIM compute is cut into tiles of
//! `banks x channels` rows by up to one DRAM row of columns; every matrix row of
//! a tile lands on its own (channel, bank) pair at the tile's shared DRAM row.

use std::collections::HashMap;
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::config::{HardwareConfig, MemoryMode, ModelConfig};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MemError {
    #[error("matrix `{name}` does not fit: needs {needed} DRAM rows, {available} available")]
    Capacity {
        name: String,
        needed: u64,
        available: u64,
    },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("empty matrix `{0}`")]
    Empty(String),
    #[error(
        "model needs {needed} bytes but the device holds {available}; use more devices"
    )]
    ModelTooLarge { needed: u64, available: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MatrixId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PhysAddr {
    pub row: u64,
    pub channel: u32,
    pub bank: u32,
    pub column: u64,
    pub byte_offset: u64,
}

impl PhysAddr {
    /// Packs into a flat byte address (mixed radix, row most significant).
    pub fn to_linear(&self, hw: &HardwareConfig) -> u64 {
        let cols = hw.row_size / hw.column_bytes;
        let mut a = self.row;
        a = a * hw.num_channels as u64 + self.channel as u64;
        a = a * hw.banks_per_channel as u64 + self.bank as u64;
        a = a * cols + self.column;
        a * hw.column_bytes + self.byte_offset
    }

    pub fn from_linear(addr: u64, hw: &HardwareConfig) -> Self {
        let cols = hw.row_size / hw.column_bytes;
        let byte_offset = addr % hw.column_bytes;
        let mut rest = addr / hw.column_bytes;
        let column = rest % cols;
        rest /= cols;
        let bank = (rest % hw.banks_per_channel as u64) as u32;
        rest /= hw.banks_per_channel as u64;
        let channel = (rest % hw.num_channels as u64) as u32;
        let row = rest / hw.num_channels as u64;
        PhysAddr {
            row,
            channel,
            bank,
            column,
            byte_offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TilePlacement {
    pub index: u64,
    pub tile_row: u64,
    pub tile_col: u64,
    pub row_start: u64,
    pub col_start: u64,
    pub row_extent: u64,
    pub col_extent: u64,
    pub dram_row: u64,
}

/// Placement of one weight matrix (rows = output features, cols = input features).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileMap {
    pub matrix_id: MatrixId,
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub channels: Vec<u32>,
    pub banks_per_channel: u32,
    pub rows_per_tile: u64,
    pub cols_per_tile: u64,
    pub elems_per_column: u64,
    pub base_row: u64,
}

impl TileMap {
    pub fn grid(&self) -> (u64, u64) {
        (
            self.rows.div_ceil(self.rows_per_tile),
            self.cols.div_ceil(self.cols_per_tile),
        )
    }

    pub fn num_tiles(&self) -> u64 {
        let (r, c) = self.grid();
        r * c
    }

    /// Tiles are linearized row-major: all column tiles of a row group are consecutive.
    pub fn tile(&self, index: u64) -> TilePlacement {
        let (_, gc) = self.grid();
        let tile_row = index / gc;
        let tile_col = index % gc;
        let row_start = tile_row * self.rows_per_tile;
        let col_start = tile_col * self.cols_per_tile;
        TilePlacement {
            index,
            tile_row,
            tile_col,
            row_start,
            col_start,
            row_extent: (self.rows - row_start).min(self.rows_per_tile),
            col_extent: (self.cols - col_start).min(self.cols_per_tile),
            dram_row: self.base_row + index,
        }
    }

    pub fn tiles(&self) -> impl Iterator<Item = TilePlacement> + '_ {
        (0..self.num_tiles()).map(move |i| self.tile(i))
    }

    /// (channel, bank) holding a row within a tile. Bank index varies fastest.
    pub fn lane_of(&self, row_in_tile: u64) -> (u32, u32) {
        let banks = self.banks_per_channel as u64;
        let bank = (row_in_tile % banks) as u32;
        let channel = self.channels[(row_in_tile / banks) as usize];
        (channel, bank)
    }

    pub fn dram_rows(&self) -> Range<u64> {
        self.base_row..self.base_row + self.num_tiles()
    }

    /// Elements of allocated tile area that hold no weight.
    pub fn wasted_elems(&self) -> u64 {
        self.num_tiles() * self.rows_per_tile * self.cols_per_tile - self.rows * self.cols
    }

    pub fn bytes(&self) -> u64 {
        self.rows * self.cols * HardwareConfig::DTYPE_BYTES
    }
}

/// Tiles a `rows x cols` matrix over the given PIM channels starting at `base_row`.
pub fn tile_matrix(
    id: MatrixId,
    name: &str,
    rows: u64,
    cols: u64,
    hw: &HardwareConfig,
    channels: &[u32],
    base_row: u64,
) -> Result<TileMap, MemError> {
    if rows == 0 || cols == 0 {
        return Err(MemError::Empty(name.to_string()));
    }
    if channels.is_empty() {
        return Err(MemError::Capacity {
            name: name.to_string(),
            needed: 1,
            available: 0,
        });
    }
    let tm = TileMap {
        matrix_id: id,
        name: name.to_string(),
        rows,
        cols,
        channels: channels.to_vec(),
        banks_per_channel: hw.banks_per_channel,
        rows_per_tile: hw.banks_per_channel as u64 * channels.len() as u64,
        cols_per_tile: hw.elems_per_row(),
        elems_per_column: hw.elems_per_column(),
        base_row,
    };
    let end = base_row + tm.num_tiles();
    if end > hw.rows_per_bank() {
        return Err(MemError::Capacity {
            name: name.to_string(),
            needed: tm.num_tiles(),
            available: hw.rows_per_bank().saturating_sub(base_row),
        });
    }
    Ok(tm)
}

/// Tiles a matrix across every PIM channel of `hw`, starting at DRAM row 0.
pub fn tile_weight_matrix(rows: u64, cols: u64, hw: &HardwareConfig) -> Result<TileMap, MemError> {
    let channels: Vec<u32> = if hw.pim_channels().is_empty() {
        (0..hw.num_channels).collect()
    } else {
        hw.pim_channels()
    };
    tile_matrix(MatrixId(0), "w", rows, cols, hw, &channels, 0)
}

pub fn map_address(
    tm: &TileMap,
    tile_idx: u64,
    row_in_tile: u64,
    col_in_tile: u64,
) -> Result<PhysAddr, MemError> {
    if tile_idx >= tm.num_tiles() {
        return Err(MemError::OutOfRange(format!(
            "tile {tile_idx} of {} in `{}`",
            tm.num_tiles(),
            tm.name
        )));
    }
    let t = tm.tile(tile_idx);
    if row_in_tile >= t.row_extent || col_in_tile >= t.col_extent {
        return Err(MemError::OutOfRange(format!(
            "({row_in_tile}, {col_in_tile}) outside tile extent {}x{} of `{}`",
            t.row_extent, t.col_extent, tm.name
        )));
    }
    let (channel, bank) = tm.lane_of(row_in_tile);
    Ok(PhysAddr {
        row: t.dram_row,
        channel,
        bank,
        column: col_in_tile / tm.elems_per_column,
        byte_offset: (col_in_tile % tm.elems_per_column) * HardwareConfig::DTYPE_BYTES,
    })
}

/// Which physical memory a region lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MemSpace {
    /// Channels that carry PIM compute.
    Pim,
    /// Channels serving plain NPU traffic.
    Npu,
}

/// Column accesses and row activations one transfer places on a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ChannelLoad {
    pub channel: u32,
    pub cols: u64,
    pub acts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Footprint {
    pub loads: Vec<ChannelLoad>,
    /// True when the region sits on channels that PIM macros also use.
    pub touches_pim: bool,
}

impl Footprint {
    pub fn total_cols(&self) -> u64 {
        self.loads.iter().map(|l| l.cols).sum()
    }
    pub fn total_acts(&self) -> u64 {
        self.loads.iter().map(|l| l.acts).sum()
    }
}

/// A linear region of `rows x cols` elements on a set of channels. Row-major data
/// is striped over the channels one DRAM row (2 KB) at a time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearRegion {
    pub space: MemSpace,
    pub channels: Vec<u32>,
    pub base_row: u64,
    /// Byte offset within the space (above `base_row`).
    pub offset: u64,
    pub rows: u64,
    pub cols: u64,
}

impl LinearRegion {
    pub fn bytes(&self) -> u64 {
        self.rows * self.cols * HardwareConfig::DTYPE_BYTES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Region {
    Tiled(MatrixId),
    Linear(LinearRegion),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum QkvPart {
    Q,
    K,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ParamKey {
    /// Q/K/V weights of head group `group` (one head per core) in `block`.
    Qkv { block: u32, part: QkvPart, group: u32 },
    Proj { block: u32 },
    Ffn1 { block: u32 },
    Ffn2 { block: u32 },
    /// Output head; also serves token-embedding lookups.
    Head,
    KCache { block: u32, head: u32 },
    VCache { block: u32, head: u32 },
    /// Causal-mask bitmap, one bit per (query, key) pair packed 16 to an element.
    Mask,
    /// Token-embedding table when it is not shared with the output head.
    Embedding,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamKey::Qkv { block, part, group } => {
                let p = match part {
                    QkvPart::Q => 'q',
                    QkvPart::K => 'k',
                    QkvPart::V => 'v',
                };
                write!(f, "b{block}.w{p}.g{group}")
            }
            ParamKey::Proj { block } => write!(f, "b{block}.proj"),
            ParamKey::Ffn1 { block } => write!(f, "b{block}.ffn1"),
            ParamKey::Ffn2 { block } => write!(f, "b{block}.ffn2"),
            ParamKey::Head => write!(f, "head"),
            ParamKey::KCache { block, head } => write!(f, "b{block}.k_cache.h{head}"),
            ParamKey::VCache { block, head } => write!(f, "b{block}.v_cache.h{head}"),
            ParamKey::Mask => write!(f, "mask"),
            ParamKey::Embedding => write!(f, "embedding"),
        }
    }
}

impl ParamKey {
    pub fn is_fc(&self) -> bool {
        !matches!(
            self,
            ParamKey::KCache { .. } | ParamKey::VCache { .. } | ParamKey::Mask | ParamKey::Embedding
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Placement {
    pub key: ParamKey,
    pub rows: u64,
    pub cols: u64,
    /// Copy used by PIM compute, if any.
    pub pim: Option<Region>,
    /// Copy the NPU loads from, if it differs from the PIM copy.
    pub npu: Option<Region>,
}

impl Placement {
    /// Region the NPU reads when it runs this layer itself.
    pub fn npu_region(&self) -> &Region {
        self.npu
            .as_ref()
            .or(self.pim.as_ref())
            .expect("placement has at least one region")
    }
    pub fn duplicated(&self) -> bool {
        self.pim.is_some() && self.npu.is_some()
    }
}

/// How attention K/V caches are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Default)]
pub enum KvLayout {
    /// Row-major token x head_dim, linear.
    #[default]
    Linear,
    /// K as a (tokens x head_dim) PIM matrix, V transposed as (head_dim x tokens).
    PimTiled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AllocOptions {
    pub kv_layout: KvLayout,
    /// Number of devices the model is sharded over (head- and column-wise).
    pub devices: u32,
    pub ignore_capacity: bool,
}

impl Default for AllocOptions {
    fn default() -> Self {
        AllocOptions {
            kv_layout: KvLayout::Linear,
            devices: 1,
            ignore_capacity: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AllocStats {
    pub footprint_bytes: u64,
    pub tiled_bytes: u64,
    pub linear_bytes: u64,
    pub duplicated_bytes: u64,
    pub wasted_elems: u64,
    pub pim_rows_used: u64,
    pub npu_only_fc: u64,
    pub pim_only_fc: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationPlan {
    pub mode: MemoryMode,
    pub placements: Vec<Placement>,
    pub tile_maps: Vec<TileMap>,
    pub stats: AllocStats,
    #[serde(skip)]
    index: HashMap<ParamKey, usize>,
}

struct LinearCursor {
    space: MemSpace,
    channels: Vec<u32>,
    base_row: u64,
    next: u64,
    capacity: u64,
}

impl LinearCursor {
    fn alloc(&mut self, rows: u64, cols: u64, align: u64) -> Option<LinearRegion> {
        let bytes = rows * cols * HardwareConfig::DTYPE_BYTES;
        let offset = self.next.div_ceil(align) * align;
        if offset + bytes > self.capacity {
            return None;
        }
        self.next = offset + bytes;
        Some(LinearRegion {
            space: self.space,
            channels: self.channels.clone(),
            base_row: self.base_row,
            offset,
            rows,
            cols,
        })
    }
}

/// Per-device matrix shapes of one block, after head/column sharding over devices.
#[derive(Debug, Clone, Copy)]
pub struct ShardDims {
    pub heads: u64,
    pub head_groups: u64,
    pub cores: u64,
    pub proj_rows: u64,
    pub ffn1_rows: u64,
    pub ffn2_rows: u64,
    pub head_rows: u64,
}

impl ShardDims {
    pub fn new(model: &ModelConfig, hw: &HardwareConfig, devices: u32) -> Self {
        let d = devices as u64;
        let cores = hw.num_cores as u64;
        let heads = model.num_heads / d;
        ShardDims {
            heads,
            head_groups: heads.div_ceil(cores),
            cores,
            proj_rows: model.embedding_dim.div_ceil(d),
            ffn1_rows: model.ffn_dim().div_ceil(d),
            ffn2_rows: model.embedding_dim.div_ceil(d),
            head_rows: model.head_params().div_ceil(model.embedding_dim).div_ceil(d),
        }
    }

    /// Heads (one per core) that make up head group `g`.
    pub fn heads_in_group(&self, g: u64) -> u64 {
        (self.heads - g * self.cores).min(self.cores)
    }
}

impl AllocationPlan {
    pub fn get(&self, key: &ParamKey) -> Option<&Placement> {
        self.index.get(key).map(|&i| &self.placements[i])
    }

    pub fn tile_map(&self, id: MatrixId) -> &TileMap {
        &self.tile_maps[id.0 as usize]
    }

    pub fn empty(mode: MemoryMode) -> Self {
        AllocationPlan {
            mode,
            placements: Vec::new(),
            tile_maps: Vec::new(),
            stats: AllocStats::default(),
            index: HashMap::new(),
        }
    }

    /// Channel footprint of reading/writing `rows x cols` of a region.
    pub fn footprint(
        &self,
        region: &Region,
        rows: Range<u64>,
        cols: Range<u64>,
        hw: &HardwareConfig,
    ) -> Footprint {
        match region {
            Region::Tiled(id) => tiled_footprint(self.tile_map(*id), rows, cols, hw),
            Region::Linear(lr) => linear_footprint(lr, rows, cols, hw),
        }
    }
}

fn push_load(acc: &mut Vec<ChannelLoad>, channel: u32, cols: u64, acts: u64) {
    if let Some(l) = acc.iter_mut().find(|l| l.channel == channel) {
        l.cols += cols;
        l.acts += acts;
    } else {
        acc.push(ChannelLoad {
            channel,
            cols,
            acts,
        });
    }
}

fn tiled_footprint(
    tm: &TileMap,
    rows: Range<u64>,
    cols: Range<u64>,
    _hw: &HardwareConfig,
) -> Footprint {
    let mut loads: Vec<ChannelLoad> = Vec::new();
    let (_, gc) = tm.grid();
    let epc = tm.elems_per_column;
    // columns per tile column touched by the requested column range
    let mut per_row_cols = 0;
    let mut per_row_acts = 0;
    for tc in 0..gc {
        let c0 = (tc * tm.cols_per_tile).max(cols.start);
        let c1 = ((tc + 1) * tm.cols_per_tile).min(cols.end).min(tm.cols);
        if c1 > c0 {
            per_row_cols += c1.div_ceil(epc) - c0 / epc;
            per_row_acts += 1;
        }
    }
    let mut r = rows.start;
    while r < rows.end.min(tm.rows) {
        let in_tile = r % tm.rows_per_tile;
        let banks = tm.banks_per_channel as u64;
        // rows sharing a channel within this tile
        let run_end = ((in_tile / banks + 1) * banks - in_tile + r)
            .min(rows.end)
            .min((r / tm.rows_per_tile + 1) * tm.rows_per_tile);
        let n = run_end - r;
        let (ch, _) = tm.lane_of(in_tile);
        push_load(&mut loads, ch, n * per_row_cols, n * per_row_acts);
        r = run_end;
    }
    loads.sort_by_key(|l| l.channel);
    Footprint {
        loads,
        touches_pim: true,
    }
}

fn linear_footprint(
    lr: &LinearRegion,
    rows: Range<u64>,
    cols: Range<u64>,
    hw: &HardwareConfig,
) -> Footprint {
    let db = HardwareConfig::DTYPE_BYTES;
    let mut ranges: Vec<(u64, u64)> = Vec::new();
    let c1 = cols.end.min(lr.cols);
    if cols.start == 0 && c1 == lr.cols {
        let a = lr.offset + rows.start * lr.cols * db;
        let b = lr.offset + rows.end.min(lr.rows) * lr.cols * db;
        if b > a {
            ranges.push((a, b));
        }
    } else {
        for r in rows.start..rows.end.min(lr.rows) {
            let a = lr.offset + (r * lr.cols + cols.start) * db;
            let b = lr.offset + (r * lr.cols + c1) * db;
            if b <= a {
                continue;
            }
            match ranges.last_mut() {
                Some(last) if last.1 == a => last.1 = b,
                _ => ranges.push((a, b)),
            }
        }
    }
    let row_size = hw.row_size;
    let nch = lr.channels.len() as u64;
    let mut loads: Vec<ChannelLoad> = Vec::new();
    for (a, b) in ranges {
        let mut unit = a / row_size;
        while unit * row_size < b {
            let lo = (unit * row_size).max(a);
            let hi = ((unit + 1) * row_size).min(b);
            let ncols = (hi - 1) / hw.column_bytes - lo / hw.column_bytes + 1;
            let ch = lr.channels[(unit % nch) as usize];
            push_load(&mut loads, ch, ncols, 1);
            unit += 1;
        }
    }
    loads.sort_by_key(|l| l.channel);
    Footprint {
        loads,
        touches_pim: lr.space == MemSpace::Pim,
    }
}

/// Lays out parameters and K/V caches for one device.
pub fn plan_allocation(
    model: &ModelConfig,
    hw: &HardwareConfig,
    opts: AllocOptions,
) -> Result<AllocationPlan, MemError> {
    let mode = hw.memory_mode;
    let mut plan = AllocationPlan::empty(mode);
    if model.num_blocks == 0 {
        return Ok(plan);
    }
    let e = model.embedding_dim;
    let dims = ShardDims::new(model, hw, opts.devices);
    let rows_per_bank = if opts.ignore_capacity {
        u64::MAX / 4
    } else {
        hw.rows_per_bank()
    };
    let hw_cap = HardwareConfig {
        chip_capacity: if opts.ignore_capacity {
            u64::MAX / 64
        } else {
            hw.chip_capacity
        },
        ..hw.clone()
    };

    // FC weights in allocation order
    let mut fcs: Vec<(ParamKey, u64, u64)> = Vec::new();
    for b in 0..model.num_blocks as u32 {
        for part in [QkvPart::Q, QkvPart::K, QkvPart::V] {
            for g in 0..dims.head_groups as u32 {
                let rows = dims.heads_in_group(g as u64) * model.head_dim;
                fcs.push((ParamKey::Qkv { block: b, part, group: g }, rows, e));
            }
        }
        fcs.push((ParamKey::Proj { block: b }, dims.proj_rows, e));
        fcs.push((ParamKey::Ffn1 { block: b }, dims.ffn1_rows, e));
        fcs.push((ParamKey::Ffn2 { block: b }, dims.ffn2_rows, model.ffn_dim()));
    }
    let head_key = (ParamKey::Head, dims.head_rows, e);
    let is_gpt = model.family == crate::config::Family::Gpt;

    let kv_rows = model.max_context();
    let kv: Vec<(ParamKey, u64, u64)> = (0..model.num_blocks as u32)
        .flat_map(|b| {
            (0..dims.heads as u32).flat_map(move |h| {
                [
                    (ParamKey::KCache { block: b, head: h }, kv_rows, model.head_dim),
                    (ParamKey::VCache { block: b, head: h }, kv_rows, model.head_dim),
                ]
            })
        })
        .chain(is_gpt.then_some((ParamKey::Mask, kv_rows, kv_rows.div_ceil(16))))
        .chain((!is_gpt).then_some((ParamKey::Embedding, model.vocab_size, e)))
        .collect();

    let pim_channels = hw.pim_channels();
    let npu_channels = hw.npu_channels();
    let mut pim_row = 0u64;
    let tile = |plan: &mut AllocationPlan,
                    name: String,
                    rows: u64,
                    cols: u64,
                    pim_row: &mut u64|
     -> Result<Region, MemError> {
        let id = MatrixId(plan.tile_maps.len() as u32);
        let tm = tile_matrix(id, &name, rows, cols, &hw_cap, &pim_channels, *pim_row);
        let tm = match tm {
            Ok(t) if t.dram_rows().end <= rows_per_bank => t,
            Ok(t) => {
                return Err(MemError::Capacity {
                    name,
                    needed: t.num_tiles(),
                    available: rows_per_bank.saturating_sub(*pim_row),
                })
            }
            Err(e) => return Err(e),
        };
        *pim_row = tm.dram_rows().end;
        plan.stats.wasted_elems += tm.wasted_elems();
        plan.stats.tiled_bytes += tm.bytes();
        plan.tile_maps.push(tm);
        Ok(Region::Tiled(id))
    };

    let push = |plan: &mut AllocationPlan, p: Placement| {
        plan.index.insert(p.key, plan.placements.len());
        plan.placements.push(p);
    };

    let align = hw.row_size * hw.banks_per_channel as u64;
    match mode {
        MemoryMode::Plain => {
            let cap = hw_cap.total_capacity();
            let mut cur = LinearCursor {
                space: MemSpace::Npu,
                channels: npu_channels.clone(),
                base_row: 0,
                next: 0,
                capacity: cap,
            };
            let all = fcs
                .iter()
                .chain(std::iter::once(&head_key).filter(|_| true))
                .chain(kv.iter());
            for &(key, rows, cols) in all {
                let lr = cur.alloc(rows, cols, align).ok_or(MemError::ModelTooLarge {
                    needed: total_bytes(&fcs, &head_key, &kv),
                    available: cap,
                })?;
                plan.stats.linear_bytes += lr.bytes();
                push(
                    &mut plan,
                    Placement {
                        key,
                        rows,
                        cols,
                        pim: None,
                        npu: Some(Region::Linear(lr)),
                    },
                );
            }
        }
        MemoryMode::Unified => {
            let needed = total_bytes(&fcs, &head_key, &kv);
            if !opts.ignore_capacity && needed > hw.total_capacity() {
                return Err(MemError::ModelTooLarge {
                    needed,
                    available: hw.total_capacity(),
                });
            }
            let tiled_iter = fcs.iter().chain(std::iter::once(&head_key).filter(|_| is_gpt));
            for &(key, rows, cols) in tiled_iter {
                let region = tile(&mut plan, key.to_string(), rows, cols, &mut pim_row)?;
                push(
                    &mut plan,
                    Placement {
                        key,
                        rows,
                        cols,
                        pim: Some(region),
                        npu: None,
                    },
                );
            }
            if opts.kv_layout == KvLayout::PimTiled {
                for &(key, rows, cols) in kv.iter().filter(|k| !matches!(k.0, ParamKey::Mask | ParamKey::Embedding)) {
                    // V is stored transposed so score-times-V becomes a GEMV over it
                    let (r, c) = match key {
                        ParamKey::VCache { .. } => (cols, rows),
                        _ => (rows, cols),
                    };
                    let region = tile(&mut plan, key.to_string(), r, c, &mut pim_row)?;
                    push(
                        &mut plan,
                        Placement {
                            key,
                            rows: r,
                            cols: c,
                            pim: Some(region),
                            npu: None,
                        },
                    );
                }
            }
            // linear data above the tiled rows
            let channels: Vec<u32> = (0..hw.num_channels).collect();
            let cap = hw_cap.total_capacity().saturating_sub(
                pim_row * hw.row_size * hw.banks_per_channel as u64 * hw.num_channels as u64,
            );
            let mut cur = LinearCursor {
                space: MemSpace::Pim,
                channels,
                base_row: pim_row,
                next: 0,
                capacity: cap,
            };
            let linear_head = std::iter::once(&head_key).filter(|_| !is_gpt);
            for &(key, rows, cols) in linear_head {
                let lr = cur.alloc(rows, cols, align).ok_or(MemError::ModelTooLarge {
                    needed,
                    available: hw.total_capacity(),
                })?;
                plan.stats.linear_bytes += lr.bytes();
                push(
                    &mut plan,
                    Placement {
                        key,
                        rows,
                        cols,
                        pim: None,
                        npu: Some(Region::Linear(lr)),
                    },
                );
            }
            let tiled_kv = opts.kv_layout == KvLayout::PimTiled;
            for &(key, rows, cols) in kv.iter().filter(|k| !tiled_kv || matches!(k.0, ParamKey::Mask | ParamKey::Embedding)) {
                {
                    let lr = cur.alloc(rows, cols, align).ok_or(MemError::ModelTooLarge {
                        needed,
                        available: hw.total_capacity(),
                    })?;
                    plan.stats.linear_bytes += lr.bytes();
                    push(
                        &mut plan,
                        Placement {
                            key,
                            rows,
                            cols,
                            pim: None,
                            npu: Some(Region::Linear(lr)),
                        },
                    );
                }
            }
        }
        MemoryMode::Partitioned => {
            let half = hw_cap.total_capacity() / 2;
            let mut npu_cur = LinearCursor {
                space: MemSpace::Npu,
                channels: npu_channels.clone(),
                base_row: 0,
                next: 0,
                capacity: half,
            };
            let needed = total_bytes(&fcs, &head_key, &kv);
            let too_large = MemError::ModelTooLarge {
                needed,
                available: hw.total_capacity(),
            };
            // non-FC data first: the NPU cannot run without it
            for &(key, rows, cols) in kv.iter() {
                let cache = matches!(key, ParamKey::KCache { .. } | ParamKey::VCache { .. });
                if cache && opts.kv_layout == KvLayout::PimTiled {
                    let (r, c) = match key {
                        ParamKey::VCache { .. } => (cols, rows),
                        _ => (rows, cols),
                    };
                    let region = tile(&mut plan, key.to_string(), r, c, &mut pim_row)?;
                    push(
                        &mut plan,
                        Placement {
                            key,
                            rows: r,
                            cols: c,
                            pim: Some(region),
                            npu: None,
                        },
                    );
                    continue;
                }
                let lr = npu_cur.alloc(rows, cols, align).ok_or(too_large.clone())?;
                plan.stats.linear_bytes += lr.bytes();
                push(
                    &mut plan,
                    Placement {
                        key,
                        rows,
                        cols,
                        pim: None,
                        npu: Some(Region::Linear(lr)),
                    },
                );
            }
            // every FC gets one home first, PIM side preferred; spare NPU space
            // then holds copies so the NPU can run those layers without PIM traffic
            let fc_list: Vec<_> = fcs.iter().chain(std::iter::once(&head_key)).collect();
            let mut first = Vec::with_capacity(fc_list.len());
            for &&(key, rows, cols) in &fc_list {
                let pim = if key == ParamKey::Head && !is_gpt {
                    None
                } else {
                    let mut probe = pim_row;
                    match tile(&mut plan, key.to_string(), rows, cols, &mut probe) {
                        Ok(r) => {
                            pim_row = probe;
                            Some(r)
                        }
                        Err(MemError::Capacity { .. }) => None,
                        Err(e) => return Err(e),
                    }
                };
                let npu = if pim.is_none() {
                    let lr = npu_cur.alloc(rows, cols, align).ok_or(too_large.clone())?;
                    plan.stats.linear_bytes += lr.bytes();
                    Some(Region::Linear(lr))
                } else {
                    None
                };
                first.push(plan.placements.len());
                push(
                    &mut plan,
                    Placement {
                        key,
                        rows,
                        cols,
                        pim,
                        npu,
                    },
                );
            }
            for i in first {
                let p = &mut plan.placements[i];
                if p.npu.is_some() {
                    plan.stats.npu_only_fc += 1;
                    continue;
                }
                match npu_cur.alloc(p.rows, p.cols, align) {
                    Some(lr) => {
                        plan.stats.linear_bytes += lr.bytes();
                        plan.stats.duplicated_bytes += lr.bytes();
                        p.npu = Some(Region::Linear(lr));
                    }
                    None => plan.stats.pim_only_fc += 1,
                }
            }
        }
    }
    plan.stats.pim_rows_used = plan.tile_maps.iter().map(|t| t.dram_rows().end).max().unwrap_or(0);
    plan.stats.footprint_bytes = plan.stats.tiled_bytes + plan.stats.linear_bytes;
    Ok(plan)
}

fn total_bytes(
    fcs: &[(ParamKey, u64, u64)],
    head: &(ParamKey, u64, u64),
    kv: &[(ParamKey, u64, u64)],
) -> u64 {
    let elems: u64 = fcs
        .iter()
        .chain(std::iter::once(head))
        .chain(kv.iter())
        .map(|(_, r, c)| r * c)
        .sum();
    elems * HardwareConfig::DTYPE_BYTES
}

/// One CSV line per (matrix, tile, row-in-tile) with its physical placement.
pub fn allocation_csv(plan: &AllocationPlan) -> String {
    let mut out = String::from("matrix,tile,row,channel,bank,dram_row\n");
    for tm in &plan.tile_maps {
        for t in tm.tiles() {
            for r in 0..t.row_extent {
                let (ch, bank) = tm.lane_of(r);
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    tm.name,
                    t.index,
                    t.row_start + r,
                    ch,
                    bank,
                    t.dram_row
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn hw() -> HardwareConfig {
        HardwareConfig::default()
    }

    #[test]
    fn tile_grid_2048() {
        let tm = tile_weight_matrix(2048, 2048, &hw()).unwrap();
        assert_eq!(tm.grid(), (16, 2));
        assert_eq!(tm.num_tiles(), 32);
    }

    #[test]
    fn tile_grid_xl_edge() {
        let tm = tile_weight_matrix(1536, 1536, &hw()).unwrap();
        // independent ceil computation
        let gr = 1536_u64.div_ceil(128);
        let gc = 1536_u64.div_ceil(1024);
        assert_eq!(tm.grid(), (gr, gc));
        assert_eq!(tm.num_tiles(), 24);
        let second = tm.tile(1);
        assert_eq!(second.col_extent, 512);
        assert_eq!(second.col_start, 1024);
    }

    #[test]
    fn one_by_one() {
        let tm = tile_weight_matrix(1, 1, &hw()).unwrap();
        assert_eq!(tm.num_tiles(), 1);
        let t = tm.tile(0);
        assert_eq!((t.row_extent, t.col_extent), (1, 1));
    }

    #[test]
    fn zero_rows_rejected() {
        assert!(matches!(
            tile_weight_matrix(0, 4, &hw()),
            Err(MemError::Empty(_))
        ));
    }

    #[test]
    fn capacity_exceeded_names_matrix() {
        let hw = hw();
        let rows = hw.rows_per_bank() * 128 + 1;
        let err = tile_matrix(MatrixId(0), "huge", rows, 1024, &hw, &[0, 1, 2, 3, 4, 5, 6, 7], 0)
            .unwrap_err();
        assert!(err.to_string().contains("huge"));
    }

    #[test]
    fn address_examples() {
        let tm = tile_weight_matrix(256, 1024, &hw()).unwrap();
        let a = map_address(&tm, 0, 0, 0).unwrap();
        assert_eq!((a.row, a.channel, a.bank, a.column), (0, 0, 0, 0));
        let a = map_address(&tm, 0, 17, 0).unwrap();
        assert_eq!((a.channel, a.bank), (1, 1));
        let b = map_address(&tm, 1, 17, 0).unwrap();
        assert_eq!((b.row, b.channel, b.bank), (1, 1, 1));
        let c = map_address(&tm, 0, 5, 37).unwrap();
        assert_eq!((c.column, c.byte_offset), (2, 10));
    }

    #[test]
    fn address_out_of_range() {
        let tm = tile_weight_matrix(100, 100, &hw()).unwrap();
        assert!(map_address(&tm, 1, 0, 0).is_err());
        assert!(map_address(&tm, 0, 100, 0).is_err());
        assert!(map_address(&tm, 0, 0, 100).is_err());
    }

    #[test]
    fn linear_roundtrip() {
        let hw = hw();
        let a = PhysAddr {
            row: 77,
            channel: 5,
            bank: 9,
            column: 40,
            byte_offset: 6,
        };
        assert_eq!(PhysAddr::from_linear(a.to_linear(&hw), &hw), a);
    }

    #[test]
    fn tile_rows_fill_every_lane() {
        let tm = tile_weight_matrix(1024, 3000, &hw()).unwrap();
        for t in tm.tiles() {
            let lanes: HashSet<_> = (0..t.row_extent).map(|r| tm.lane_of(r)).collect();
            assert_eq!(lanes.len() as u64, t.row_extent);
        }
    }

    #[test]
    fn xl_unified_footprint() {
        let m = ModelConfig::preset("gpt2-xl").unwrap().with_tokens(256, 512);
        let plan = plan_allocation(&m, &hw(), AllocOptions::default()).unwrap();
        // parameter-count oracle: 12 E^2 per block plus the tied output head
        let e = 1536u64;
        let params = 48 * 12 * e * e + 50257 * e;
        let bytes = plan.stats.tiled_bytes;
        assert_eq!(bytes, params * 2);
        assert!(plan.stats.footprint_bytes < 8 << 30);
        assert!((bytes as f64 / 1e9 - 3.0).abs() < 0.35);
        assert_eq!(plan.stats.duplicated_bytes, 0);
    }

    #[test]
    fn partitioned_25b_not_fully_duplicated() {
        let m = ModelConfig::preset("gpt2-2.5b").unwrap().with_tokens(256, 512);
        let hw = HardwareConfig {
            memory_mode: MemoryMode::Partitioned,
            ..hw()
        };
        let plan = plan_allocation(&m, &hw, AllocOptions::default()).unwrap();
        assert!(plan.stats.npu_only_fc + plan.stats.pim_only_fc > 0);
    }

    #[test]
    fn partitioned_xl_duplicates_everything() {
        let m = ModelConfig::preset("gpt2-xl").unwrap().with_tokens(256, 512);
        let part = HardwareConfig {
            memory_mode: MemoryMode::Partitioned,
            ..hw()
        };
        let p = plan_allocation(&m, &part, AllocOptions::default()).unwrap();
        assert_eq!(p.stats.npu_only_fc + p.stats.pim_only_fc, 0);
        let u = plan_allocation(&m, &hw(), AllocOptions::default()).unwrap();
        let ratio = p.stats.footprint_bytes as f64 / u.stats.footprint_bytes as f64;
        assert!(ratio > 1.7 && ratio <= 2.0, "{ratio}");
    }

    #[test]
    fn empty_model_empty_plan() {
        let mut m = ModelConfig::preset("gpt2-m").unwrap();
        m.num_blocks = 0;
        let plan = plan_allocation(&m, &hw(), AllocOptions::default()).unwrap();
        assert!(plan.placements.is_empty());
        assert!(plan.tile_maps.is_empty());
    }

    #[test]
    fn too_large_model() {
        let m = ModelConfig::preset("gpt-6.7b").unwrap().with_tokens(256, 64);
        assert!(matches!(
            plan_allocation(&m, &hw(), AllocOptions::default()),
            Err(MemError::ModelTooLarge { .. })
        ));
        let two = AllocOptions {
            devices: 2,
            ..AllocOptions::default()
        };
        assert!(plan_allocation(&m, &hw(), two).is_ok());
    }

    #[test]
    fn linear_footprint_interleaves_channels() {
        let hw = hw();
        let lr = LinearRegion {
            space: MemSpace::Npu,
            channels: (0..8).collect(),
            base_row: 0,
            offset: 0,
            rows: 1,
            cols: 2048 * 17 / 2,
        };
        let plan = AllocationPlan::empty(MemoryMode::Plain);
        let fp = plan.footprint(&Region::Linear(lr), 0..1, 0..u64::MAX, &hw);
        // 17 rows of 2 KB round-robin over 8 channels
        assert_eq!(fp.loads.len(), 8);
        assert_eq!(fp.loads[0], ChannelLoad { channel: 0, cols: 3 * 64, acts: 3 });
        assert_eq!(fp.loads[1], ChannelLoad { channel: 1, cols: 2 * 64, acts: 2 });
    }

    #[test]
    fn tiled_footprint_counts() {
        let hw = hw();
        let m = ModelConfig::preset("gpt2-m").unwrap();
        let plan = plan_allocation(&m, &hw, AllocOptions::default()).unwrap();
        let p = plan.get(&ParamKey::Proj { block: 0 }).unwrap();
        let fp = plan.footprint(p.pim.as_ref().unwrap(), 0..1024, 0..1024, &hw);
        assert_eq!(fp.loads.len(), 8);
        for l in &fp.loads {
            assert_eq!(l.cols, 128 * 64);
            assert_eq!(l.acts, 128);
        }
    }
}
