//! Cycle-level performance and energy model of an NPU paired with PIM-capable
//! GDDR6 that serves as the NPU's only main memory.

pub mod compiler;
pub mod config;
pub mod engine;
pub mod isa;
pub mod memmap;
pub mod npu;
pub mod pim;
pub mod scenario;

/// Simulation time in picoseconds.
pub type Ps = u64;
