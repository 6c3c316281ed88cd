//! Hardware and model configuration.
//!
//! Everything is a plain record that can be read from (and written back to) a
//! TOML document with optional `[hardware]` and `[model]` tables. Missing
//! hardware keys fall back to the baseline machine; the model table either
//! names a preset or spells out every dimension.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {check}")]
    Invariant { check: String },
    #[error("unknown model preset `{0}`")]
    UnknownModel(String),
}

impl ConfigError {
    fn invariant(check: impl Into<String>) -> Self {
        ConfigError::Invariant {
            check: check.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    /// PIM doubles as the NPU main memory.
    #[default]
    Unified,
    /// Half the channels are PIM, half are plain NPU memory; shared weights duplicated.
    Partitioned,
    /// Plain GDDR6 only, no PIM compute.
    Plain,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::Unified => "unified",
            MemoryMode::Partitioned => "partitioned",
            MemoryMode::Plain => "plain",
        })
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unified" => Ok(MemoryMode::Unified),
            "partitioned" => Ok(MemoryMode::Partitioned),
            "plain" => Ok(MemoryMode::Plain),
            other => Err(ConfigError::Parse(format!("unknown memory mode `{other}`"))),
        }
    }
}

/// DRAM timing constraints in nanoseconds, plus the PIM-specific cycle knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_ck: f64,
    pub t_ccd_s: f64,
    pub t_ccd_l: f64,
    pub t_ras: f64,
    pub t_wr: f64,
    pub t_rp: f64,
    pub t_rcdrd: f64,
    pub t_rcdwr: f64,
    /// Controller cycles one MAC_ALL_BANKS burst occupies the column bus.
    pub pim_mac_cycles_per_column_burst: u64,
    /// Controller cycles one WRITE_GB segment occupies the column bus.
    pub pim_gb_write_cycles: u64,
    /// Controller cycles for one LUT-interpolated activation pass over the accumulators.
    pub pim_act_func_cycles: u64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            t_ck: 0.5,
            t_ccd_s: 1.0,
            t_ccd_l: 1.0,
            t_ras: 21.0,
            t_wr: 36.0,
            t_rp: 30.0,
            t_rcdrd: 36.0,
            t_rcdwr: 24.0,
            pim_mac_cycles_per_column_burst: 2,
            pim_gb_write_cycles: 2,
            pim_act_func_cycles: 16,
        }
    }
}

/// Timing constraints converted to whole controller clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingCycles {
    pub ccd_s: u64,
    pub ccd_l: u64,
    pub ras: u64,
    pub wr: u64,
    pub rp: u64,
    pub rcdrd: u64,
    pub rcdwr: u64,
    pub mac: u64,
    pub gb_write: u64,
    pub act_func: u64,
}

impl TimingParams {
    pub fn cycles(&self) -> TimingCycles {
        let c = |ns: f64| (ns / self.t_ck - 1e-9).ceil().max(0.0) as u64;
        TimingCycles {
            ccd_s: c(self.t_ccd_s),
            ccd_l: c(self.t_ccd_l),
            ras: c(self.t_ras),
            wr: c(self.t_wr),
            rp: c(self.t_rp),
            rcdrd: c(self.t_rcdrd),
            rcdwr: c(self.t_rcdwr),
            mac: self.pim_mac_cycles_per_column_burst,
            gb_write: self.pim_gb_write_cycles,
            act_func: self.pim_act_func_cycles,
        }
    }

    /// Controller clock period in picoseconds.
    pub fn tck_ps(&self) -> u64 {
        (self.t_ck * 1000.0).round() as u64
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let named = [
            ("tCK", self.t_ck),
            ("tCCD_S", self.t_ccd_s),
            ("tCCD_L", self.t_ccd_l),
            ("tRAS", self.t_ras),
            ("tWR", self.t_wr),
            ("tRP", self.t_rp),
            ("tRCDRD", self.t_rcdrd),
            ("tRCDWR", self.t_rcdwr),
        ];
        for (name, v) in named {
            if !v.is_finite() || v <= 0.0 {
                return Err(ConfigError::invariant(format!(
                    "timing {name} must be strictly positive (got {v})"
                )));
            }
        }
        if self.pim_mac_cycles_per_column_burst == 0 || self.pim_gb_write_cycles == 0 {
            return Err(ConfigError::invariant(
                "PIM burst cycle counts must be strictly positive",
            ));
        }
        Ok(())
    }
}

/// Dynamic energy per event, in joules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub e_dram_read: f64,
    pub e_dram_write: f64,
    pub e_dram_activate: f64,
    /// One MAC_ALL_BANKS burst on one channel. Must equal 3 x `e_dram_read`.
    pub e_pim_op: f64,
    pub e_mu_mac: f64,
    pub e_vu_op: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        let read = 1.2e-9;
        EnergyParams {
            e_dram_read: read,
            e_dram_write: 1.3e-9,
            e_dram_activate: 1.0e-9,
            e_pim_op: 3.0 * read,
            e_mu_mac: 1.0e-12,
            e_vu_op: 2.0e-12,
        }
    }
}

impl EnergyParams {
    fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("e_dram_read", self.e_dram_read),
            ("e_dram_write", self.e_dram_write),
            ("e_dram_activate", self.e_dram_activate),
            ("e_pim_op", self.e_pim_op),
            ("e_mu_mac", self.e_mu_mac),
            ("e_vu_op", self.e_vu_op),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::invariant(format!("{name} must be >= 0")));
            }
        }
        let want = 3.0 * self.e_dram_read;
        if (self.e_pim_op - want).abs() > 1e-9 * want.abs().max(1e-30) {
            return Err(ConfigError::invariant(format!(
                "e_pim_op must equal 3 x e_dram_read ({} != {})",
                self.e_pim_op, want
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub num_cores: u32,
    pub npu_freq: f64,
    pub mu_rows: u32,
    pub mu_cols: u32,
    pub macs_per_pe: u32,
    pub vu_lanes: u32,
    pub vu_width: u32,
    pub am_capacity: u64,
    pub wm_capacity: u64,
    pub issue_queue_slots: u32,
    pub pending_queue_slots: u32,
    pub num_channels: u32,
    pub banks_per_channel: u32,
    pub channels_per_chip: u32,
    /// Chips whose banks carry processing units. The remaining chips behave as plain GDDR6.
    pub pim_chips: u32,
    pub chip_capacity: u64,
    pub row_size: u64,
    pub pin_rate: f64,
    pub pins_per_channel: u32,
    pub column_bytes: u64,
    pub pu_freq: f64,
    pub pu_flops: f64,
    pub global_buffer_size: u64,
    pub timing: TimingParams,
    pub pcie_bw: f64,
    pub pcie_latency_ns: f64,
    pub energy: EnergyParams,
    pub memory_mode: MemoryMode,
    pub dma_overhead_ns: f64,
    pub dma_chunk_bytes: u64,
    pub onchip_bytes_per_cycle: u64,
    pub vu_startup_cycles: u64,
    pub noc_hop_cycles: u64,
    pub noc_bytes_per_cycle: u64,
    pub sync_overhead_cycles: u64,
    pub pcu_decode_cycles: u64,
    /// Latency from a macro's inputs being ready to the PIM control unit accepting it.
    pub macro_issue_ns: f64,
    pub mc_queue_depth: usize,
    pub deadlock_budget_ns: f64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            num_cores: 4,
            npu_freq: 700e6,
            mu_rows: 128,
            mu_cols: 64,
            macs_per_pe: 4,
            vu_lanes: 16,
            vu_width: 4,
            am_capacity: 12 << 20,
            wm_capacity: 4 << 20,
            issue_queue_slots: 4,
            pending_queue_slots: 256,
            num_channels: 8,
            banks_per_channel: 16,
            channels_per_chip: 2,
            pim_chips: 4,
            chip_capacity: 2 << 30,
            row_size: 2048,
            pin_rate: 16e9,
            pins_per_channel: 16,
            column_bytes: 32,
            pu_freq: 1e9,
            pu_flops: 32e9,
            global_buffer_size: 2048,
            timing: TimingParams::default(),
            pcie_bw: 64e9,
            pcie_latency_ns: 1000.0,
            energy: EnergyParams::default(),
            memory_mode: MemoryMode::Unified,
            dma_overhead_ns: 200.0,
            dma_chunk_bytes: 256 << 10,
            onchip_bytes_per_cycle: 256,
            vu_startup_cycles: 32,
            noc_hop_cycles: 1,
            noc_bytes_per_cycle: 256,
            sync_overhead_cycles: 64,
            pcu_decode_cycles: 8,
            macro_issue_ns: 200.0,
            mc_queue_depth: 32,
            deadlock_budget_ns: 1e12,
        }
    }
}

/// Closed-form peak numbers of a machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakReport {
    pub mu_flops_per_core: f64,
    pub npu_flops: f64,
    pub pim_flops_per_chip: f64,
    pub pim_flops: f64,
    pub external_bw: f64,
    pub internal_bw_per_chip: f64,
    pub internal_bw: f64,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("num_cores", self.num_cores as u64),
            ("mu_rows", self.mu_rows as u64),
            ("mu_cols", self.mu_cols as u64),
            ("macs_per_pe", self.macs_per_pe as u64),
            ("vu_lanes", self.vu_lanes as u64),
            ("vu_width", self.vu_width as u64),
            ("issue_queue_slots", self.issue_queue_slots as u64),
            ("pending_queue_slots", self.pending_queue_slots as u64),
            ("num_channels", self.num_channels as u64),
            ("banks_per_channel", self.banks_per_channel as u64),
            ("channels_per_chip", self.channels_per_chip as u64),
            ("row_size", self.row_size),
            ("column_bytes", self.column_bytes),
            ("global_buffer_size", self.global_buffer_size),
            ("dma_chunk_bytes", self.dma_chunk_bytes),
            ("onchip_bytes_per_cycle", self.onchip_bytes_per_cycle),
            ("noc_bytes_per_cycle", self.noc_bytes_per_cycle),
            ("mc_queue_depth", self.mc_queue_depth as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::invariant(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("npu_freq", self.npu_freq),
            ("pin_rate", self.pin_rate),
            ("pu_freq", self.pu_freq),
            ("pcie_bw", self.pcie_bw),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(ConfigError::invariant(format!("{name} must be > 0")));
            }
        }
        if !self.pu_flops.is_finite() || self.pu_flops < 0.0 {
            return Err(ConfigError::invariant("pu_flops must be >= 0"));
        }
        if !self.num_channels.is_multiple_of(self.channels_per_chip) {
            return Err(ConfigError::invariant(
                "num_channels must be a multiple of channels_per_chip",
            ));
        }
        if self.pim_chips > self.num_chips() {
            return Err(ConfigError::invariant(format!(
                "pim_chips ({}) exceeds the number of chips ({})",
                self.pim_chips,
                self.num_chips()
            )));
        }
        if !self.row_size.is_multiple_of(self.column_bytes) {
            return Err(ConfigError::invariant(
                "row_size must be a multiple of column_bytes",
            ));
        }
        if self.global_buffer_size < self.row_size {
            return Err(ConfigError::invariant(
                "global buffer must hold at least one DRAM row of input",
            ));
        }
        if self.am_entry_bytes() != 2 * self.wm_entry_bytes() {
            return Err(ConfigError::invariant(format!(
                "AM entry size ({}) must be twice the WM entry size ({})",
                self.am_entry_bytes(),
                self.wm_entry_bytes()
            )));
        }
        if self.dma_chunk_bytes * 2 > self.wm_capacity {
            return Err(ConfigError::invariant(
                "two DMA chunks must fit in the weight scratch-pad",
            ));
        }
        if self.memory_mode == MemoryMode::Partitioned && self.num_chips() < 2 {
            return Err(ConfigError::invariant(
                "partitioned mode needs at least two chips",
            ));
        }
        self.timing.validate()?;
        self.energy.validate()?;
        Ok(())
    }

    pub fn num_chips(&self) -> u32 {
        self.num_channels / self.channels_per_chip
    }

    /// Bytes of one BF16 element. The data type is fixed.
    pub const DTYPE_BYTES: u64 = 2;

    pub fn am_entry_bytes(&self) -> u64 {
        self.mu_rows as u64 * Self::DTYPE_BYTES
    }

    pub fn wm_entry_bytes(&self) -> u64 {
        self.mu_cols as u64 * Self::DTYPE_BYTES
    }

    pub fn elems_per_column(&self) -> u64 {
        self.column_bytes / Self::DTYPE_BYTES
    }

    pub fn elems_per_row(&self) -> u64 {
        self.row_size / Self::DTYPE_BYTES
    }

    pub fn channel_capacity(&self) -> u64 {
        self.chip_capacity / self.channels_per_chip as u64
    }

    pub fn rows_per_bank(&self) -> u64 {
        self.channel_capacity() / self.banks_per_channel as u64 / self.row_size
    }

    pub fn total_capacity(&self) -> u64 {
        self.chip_capacity * self.num_chips() as u64
    }

    /// Channels that carry PIM compute in the configured memory mode.
    pub fn pim_channels(&self) -> Vec<u32> {
        match self.memory_mode {
            MemoryMode::Plain => Vec::new(),
            MemoryMode::Unified => (0..self.pim_chips * self.channels_per_chip).collect(),
            MemoryMode::Partitioned => {
                let half = self.num_chips() / 2;
                (0..self.pim_chips.min(half) * self.channels_per_chip).collect()
            }
        }
    }

    /// Channels the NPU reads and writes as its main memory.
    pub fn npu_channels(&self) -> Vec<u32> {
        match self.memory_mode {
            MemoryMode::Partitioned => {
                let half = self.num_chips() / 2;
                (half * self.channels_per_chip..self.num_channels).collect()
            }
            _ => (0..self.num_channels).collect(),
        }
    }

    pub fn npu_cycle_ps(&self) -> f64 {
        1e12 / self.npu_freq
    }

    /// Converts NPU cycles to picoseconds, rounding up.
    pub fn npu_cycles_to_ps(&self, cycles: u64) -> u64 {
        (cycles as f64 * self.npu_cycle_ps() - 1e-6).ceil().max(0.0) as u64
    }

    pub fn channel_bw(&self) -> f64 {
        self.pins_per_channel as f64 * self.pin_rate / 8.0
    }

    pub fn derive_peaks(&self) -> PeakReport {
        let mu = self.mu_rows as f64
            * self.mu_cols as f64
            * self.macs_per_pe as f64
            * 2.0
            * self.npu_freq;
        let chip_pim =
            self.banks_per_channel as f64 * self.channels_per_chip as f64 * self.pu_flops;
        let chip_internal = self.channels_per_chip as f64
            * self.banks_per_channel as f64
            * self.column_bytes as f64
            * self.pu_freq;
        PeakReport {
            mu_flops_per_core: mu,
            npu_flops: mu * self.num_cores as f64,
            pim_flops_per_chip: chip_pim,
            pim_flops: chip_pim * self.pim_chips as f64,
            external_bw: self.channel_bw() * self.num_channels as f64,
            internal_bw_per_chip: chip_internal,
            internal_bw: chip_internal * self.pim_chips as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gpt,
    Bert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    pub embedding_dim: u64,
    pub head_dim: u64,
    pub num_heads: u64,
    pub num_blocks: u64,
    pub num_params: u64,
    #[serde(default = "default_dtype")]
    pub dtype_bytes: u64,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: u64,
    pub vocab_size: u64,
    #[serde(default = "default_in")]
    pub input_tokens: u64,
    #[serde(default = "default_out")]
    pub output_tokens: u64,
}

fn default_dtype() -> u64 {
    2
}
fn default_ffn_mult() -> u64 {
    4
}
fn default_in() -> u64 {
    128
}
fn default_out() -> u64 {
    1
}

const GPT2_VOCAB: u64 = 50257;
const BERT_VOCAB: u64 = 30522;

/// (name, family, embedding, head_dim, heads, blocks, params)
const PRESETS: &[(&str, Family, u64, u64, u64, u64, u64)] = &[
    ("bert-b", Family::Bert, 768, 64, 12, 12, 110_000_000),
    ("bert-l", Family::Bert, 1024, 64, 16, 24, 340_000_000),
    ("bert-1.3b", Family::Bert, 2048, 64, 32, 24, 1_300_000_000),
    ("bert-3.9b", Family::Bert, 2560, 64, 40, 48, 3_900_000_000),
    ("gpt2-m", Family::Gpt, 1024, 64, 16, 24, 345_000_000),
    ("gpt2-l", Family::Gpt, 1280, 64, 20, 36, 762_000_000),
    ("gpt2-xl", Family::Gpt, 1536, 64, 24, 48, 1_500_000_000),
    ("gpt2-2.5b", Family::Gpt, 1920, 96, 20, 54, 2_500_000_000),
    ("gpt-6.7b", Family::Gpt, 4096, 128, 32, 32, 6_700_000_000),
    ("gpt-13b", Family::Gpt, 5120, 128, 40, 40, 13_000_000_000),
    ("gpt-30b", Family::Gpt, 7168, 128, 56, 48, 30_000_000_000),
];

impl ModelConfig {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    /// Looks up a preset. Short aliases such as `M`, `XL` or `2.5B` resolve to GPT-2.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let lower = name.to_ascii_lowercase();
        let key = match lower.as_str() {
            "m" => "gpt2-m",
            "l" => "gpt2-l",
            "xl" => "gpt2-xl",
            "2.5b" => "gpt2-2.5b",
            "6.7b" => "gpt-6.7b",
            "13b" => "gpt-13b",
            "30b" => "gpt-30b",
            other => other,
        };
        let p = PRESETS
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| ConfigError::UnknownModel(name.to_string()))?;
        Ok(ModelConfig {
            name: p.0.to_string(),
            family: p.1,
            embedding_dim: p.2,
            head_dim: p.3,
            num_heads: p.4,
            num_blocks: p.5,
            num_params: p.6,
            dtype_bytes: 2,
            ffn_mult: 4,
            vocab_size: match p.1 {
                Family::Gpt => GPT2_VOCAB,
                Family::Bert => BERT_VOCAB,
            },
            input_tokens: 128,
            output_tokens: 1,
        })
    }

    pub fn with_tokens(mut self, input: u64, output: u64) -> Self {
        self.input_tokens = input;
        self.output_tokens = output;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dtype_bytes != 2 {
            return Err(ConfigError::invariant(format!(
                "only BF16 (2-byte) data is supported, got dtype_bytes = {}",
                self.dtype_bytes
            )));
        }
        if self.embedding_dim == 0 || self.head_dim == 0 || self.num_heads == 0 {
            return Err(ConfigError::invariant("model dimensions must be > 0"));
        }
        if self.embedding_dim != self.head_dim * self.num_heads {
            return Err(ConfigError::invariant(format!(
                "embedding_dim ({}) != head_dim ({}) x num_heads ({})",
                self.embedding_dim, self.head_dim, self.num_heads
            )));
        }
        if self.input_tokens == 0 {
            return Err(ConfigError::invariant("input_tokens must be >= 1"));
        }
        match self.family {
            Family::Gpt if self.output_tokens == 0 => {
                Err(ConfigError::invariant("GPT models need output_tokens >= 1"))
            }
            Family::Bert if self.output_tokens != 1 => Err(ConfigError::invariant(
                "BERT models produce exactly one output (output_tokens = 1)",
            )),
            _ => Ok(()),
        }
    }

    pub fn ffn_dim(&self) -> u64 {
        self.embedding_dim * self.ffn_mult
    }

    /// Parameter bytes of the FC layers of one block (QKV, projection, two FFN layers).
    pub fn fc_params_per_block(&self) -> u64 {
        let e = self.embedding_dim;
        4 * e * e + 2 * e * self.ffn_dim()
    }

    /// Weight count of the output head (tied token embedding for GPT, span head for BERT).
    pub fn head_params(&self) -> u64 {
        match self.family {
            Family::Gpt => self.vocab_size * self.embedding_dim,
            Family::Bert => 2 * self.embedding_dim,
        }
    }

    pub fn max_context(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

/// A configuration document: both tables optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub model: Option<ModelSpec>,
}

/// Either a preset name with optional token counts, or a full model record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset {
        preset: String,
        #[serde(default)]
        input_tokens: Option<u64>,
        #[serde(default)]
        output_tokens: Option<u64>,
    },
    Full(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig, ConfigError> {
        match self {
            ModelSpec::Preset {
                preset,
                input_tokens,
                output_tokens,
            } => {
                let mut m = ModelConfig::preset(preset)?;
                if let Some(i) = input_tokens {
                    m.input_tokens = *i;
                }
                if let Some(o) = output_tokens {
                    m.output_tokens = *o;
                }
                Ok(m)
            }
            ModelSpec::Full(m) => Ok(m.clone()),
        }
    }
}

pub fn parse_config(text: &str) -> Result<(HardwareConfig, ModelConfig), ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    file.hardware.validate()?;
    let model = match &file.model {
        Some(spec) => spec.resolve()?,
        None => ModelConfig::preset("gpt2-xl")?,
    };
    model.validate()?;
    Ok((file.hardware, model))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<(HardwareConfig, ModelConfig), ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Reads a hardware-only document (a `[hardware]` table, or bare hardware keys).
pub fn load_hardware(path: impl AsRef<Path>) -> Result<HardwareConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let hw = match toml::from_str::<ConfigFile>(&text) {
        Ok(file) => file.hardware,
        Err(_) => toml::from_str::<HardwareConfig>(&text)
            .map_err(|e| ConfigError::Parse(e.to_string()))?,
    };
    hw.validate()?;
    Ok(hw)
}

/// Reads a model from a preset name or a TOML file holding a `[model]` table.
pub fn load_model(name_or_path: &str) -> Result<ModelConfig, ConfigError> {
    if let Ok(m) = ModelConfig::preset(name_or_path) {
        return Ok(m);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(ConfigError::UnknownModel(name_or_path.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let m = file
        .model
        .ok_or_else(|| ConfigError::Parse(format!("{name_or_path}: no [model] table")))?
        .resolve()?;
    m.validate()?;
    Ok(m)
}

pub fn to_toml(hw: &HardwareConfig, model: &ModelConfig) -> String {
    let file = ConfigFile {
        hardware: hw.clone(),
        model: Some(ModelSpec::Full(model.clone())),
    };
    toml::to_string(&file).expect("configuration serializes")
}
