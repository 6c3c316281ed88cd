//! Lowers a model and stage into per-core command streams.

mod estimate;
mod lower;

pub use estimate::{
    adaptive_map_fc, chunk_rows, decide, mu_fc_estimate, pim_fc_estimate, Choice, FcDecision,
    FcKind,
};
pub use lower::{build_commands, Program};

use serde::Serialize;
use thiserror::Error;

use crate::isa::{CommandKind, IsaError, Target};
use crate::memmap::MemError;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(
        "{heads} attention heads per device cannot be spread evenly over {cores} cores; \
         reduce num_heads to a multiple of the core count"
    )]
    HeadsNotDivisible { heads: u64, cores: u64 },
    #[error("{what} needs {needed} bytes of {mem} but only {available} are available")]
    Scratchpad {
        what: String,
        mem: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("context of {context} tokens exceeds the {max} the model was planned for")]
    ContextTooLong { context: u64, max: u64 },
    #[error("{0} has no generation stage")]
    NoGeneration(String),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Isa(#[from] IsaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Summarization,
    /// One generation step; `context` counts tokens in the K/V cache after the step.
    Generation { context: u64 },
}

/// How attention runs during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Default)]
pub enum AttnMapping {
    /// Q/K/V generation on PIM, score and context products on the matrix unit.
    #[default]
    MuQkt,
    /// Score and context products as PIM macros over K/V caches kept in PIM layout.
    PimQkt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Default)]
pub enum Scheduling {
    /// Commands carry only data and buffer dependencies.
    #[default]
    Aware,
    /// Every command also waits for the previous one on its core.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Default)]
pub enum FcPolicy {
    #[default]
    Adaptive,
    AllMu,
    AllPim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CompileOptions {
    pub attention: AttnMapping,
    pub scheduling: Scheduling,
    pub fc_policy: FcPolicy,
    pub devices: u32,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            attention: AttnMapping::MuQkt,
            scheduling: Scheduling::Aware,
            fc_policy: FcPolicy::Adaptive,
            devices: 1,
        }
    }
}

/// Line-oriented dump: `id kind target class block deps=[..] operands`.
pub fn emit_plan(p: &Program) -> String {
    let mut out = String::new();
    for c in &p.cmds {
        let target = match c.target {
            Target::Core(i) => format!("core{i}"),
            Target::Device => "device".to_string(),
        };
        let (kind, ops) = match &c.kind {
            CommandKind::Mu(m) => ("MU", format!("{:?} m={} k={} n={}", m.op, m.m, m.k, m.n)),
            CommandKind::Vu(v) => ("VU", format!("{:?} elems={}", v.op, v.elems)),
            CommandKind::Dma(d) => (
                "DMA",
                format!(
                    "{:?} bytes={} channels={}",
                    d.op,
                    d.bytes,
                    d.footprint.loads.len()
                ),
            ),
            CommandKind::Pim(m) => (
                "PIM",
                format!(
                    "{:?} matrix={} rows={} cols={} tokens={} gelu={}",
                    m.op, m.matrix.0, m.rows, m.cols, m.tokens, m.gelu
                ),
            ),
            CommandKind::Sync(s) => ("SYNC", format!("gather_bytes={}", s.gather_bytes)),
        };
        let deps: Vec<String> = c.deps.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{} {} {} {} {} deps=[{}] {}\n",
            c.id,
            kind,
            target,
            c.class.name(),
            c.block,
            deps.join(","),
            ops
        ));
    }
    out
}
