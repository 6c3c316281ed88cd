//! Discrete-event simulation of compiled programs on one device, and the
//! end-to-end driver over summarization and generation stages.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::compiler::{
    build_commands, AttnMapping, CompileError, CompileOptions, FcDecision, Program, Stage,
};
use crate::config::{ConfigError, Family, HardwareConfig, MemoryMode, ModelConfig};
use crate::isa::{CmdId, CommandKind, DmaOp, MuOp, OpClass, Target, TraceRecord, Unit};
use crate::memmap::{plan_allocation, AllocOptions, AllocationPlan, KvLayout, MemError};
use crate::npu::{mu_cycles, mu_cycles_either, onchip_cycles, vu_cycles, vu_lane_ops, CoreState, PcuState};
use crate::pim::{simulate_dma_stream, simulate_macro, TimingCache};
use crate::Ps;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("no progress with {remaining} commands outstanding; stuck: {stuck}")]
    Deadlock { remaining: usize, stuck: String },
    #[error("simulated time exceeded the {0} ns budget")]
    Budget(f64),
}

/// Raw event counts that energy is charged against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyEvents {
    pub mu_macs: f64,
    pub vu_lane_ops: f64,
    pub dram_read_cols: f64,
    pub dram_write_cols: f64,
    pub dram_acts: f64,
    /// All-bank MAC commands, counted once per channel.
    pub pim_macs: f64,
    /// Bank activations caused by all-bank ACTs.
    pub pim_bank_acts: f64,
    pub gb_write_cols: f64,
    /// Accumulator read-outs, one column each per bank.
    pub acc_read_cols: f64,
}

impl EnergyEvents {
    fn add(&mut self, o: &EnergyEvents, w: f64) {
        self.mu_macs += o.mu_macs * w;
        self.vu_lane_ops += o.vu_lane_ops * w;
        self.dram_read_cols += o.dram_read_cols * w;
        self.dram_write_cols += o.dram_write_cols * w;
        self.dram_acts += o.dram_acts * w;
        self.pim_macs += o.pim_macs * w;
        self.pim_bank_acts += o.pim_bank_acts * w;
        self.gb_write_cols += o.gb_write_cols * w;
        self.acc_read_cols += o.acc_read_cols * w;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Energy {
    pub core_compute: f64,
    pub normal_mem: f64,
    pub pim_ops: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.core_compute + self.normal_mem + self.pim_ops
    }
}

/// Converts event counts into joules.
///
/// PIM compute is charged per all-bank MAC per channel together with the row
/// activations it needs; buffer writes and accumulator read-outs travel over the
/// data bus and count as normal memory traffic.
pub fn account_energy(ev: &EnergyEvents, hw: &HardwareConfig) -> Energy {
    let e = &hw.energy;
    Energy {
        core_compute: ev.mu_macs * e.e_mu_mac + ev.vu_lane_ops * e.e_vu_op,
        normal_mem: ev.dram_read_cols * e.e_dram_read
            + ev.dram_write_cols * e.e_dram_write
            + ev.dram_acts * e.e_dram_activate,
        // global-buffer writes and accumulator reads are issued only inside PIM macros
        pim_ops: ev.pim_macs * e.e_pim_op
            + ev.pim_bank_acts * e.e_dram_activate
            + ev.gb_write_cols * e.e_dram_write
            + ev.acc_read_cols * e.e_dram_read,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Counters {
    pub commands: f64,
    pub pim_macros: f64,
    pub offchip_dma: f64,
    pub dma_bytes: f64,
    pub noc_bytes: f64,
    pub pcie_bytes: f64,
}

impl Counters {
    fn add(&mut self, o: &Counters, w: f64) {
        self.commands += o.commands * w;
        self.pim_macros += o.pim_macros * w;
        self.offchip_dma += o.offchip_dma * w;
        self.dma_bytes += o.dma_bytes * w;
        self.noc_bytes += o.noc_bytes * w;
        self.pcie_bytes += o.pcie_bytes * w;
    }
}

/// Busy time per unit kind, summed over cores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UnitBusy {
    pub mu: f64,
    pub vu: f64,
    pub dma: f64,
    pub pim: f64,
    pub noc: f64,
}

impl UnitBusy {
    fn add(&mut self, o: &UnitBusy, w: f64) {
        self.mu += o.mu * w;
        self.vu += o.vu * w;
        self.dma += o.dma * w;
        self.pim += o.pim * w;
        self.noc += o.noc * w;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimelineEntry {
    pub id: CmdId,
    pub unit: Unit,
    pub target: Target,
    pub class: OpClass,
    pub start_ps: Ps,
    pub end_ps: Ps,
}

/// Result of simulating one program.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageStats {
    pub time_ps: f64,
    pub breakdown_ps: BTreeMap<OpClass, f64>,
    pub events: EnergyEvents,
    pub counters: Counters,
    pub busy_ps: UnitBusy,
    /// Time during which some off-chip DMA and some PIM macro both held channels.
    pub dma_macro_overlap_ps: f64,
    /// PIM-macro occupied time.
    pub pim_active_ps: f64,
}

impl StageStats {
    fn add(&mut self, o: &StageStats, w: f64) {
        self.time_ps += o.time_ps * w;
        for (k, v) in &o.breakdown_ps {
            *self.breakdown_ps.entry(*k).or_insert(0.0) += v * w;
        }
        self.events.add(&o.events, w);
        self.counters.add(&o.counters, w);
        self.busy_ps.add(&o.busy_ps, w);
        self.dma_macro_overlap_ps += o.dma_macro_overlap_ps * w;
        self.pim_active_ps += o.pim_active_ps * w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[derive(Default)]
pub struct SimOptions {
    pub record_trace: bool,
    pub record_timeline: bool,
}


/// Detailed output of one program simulation.
#[derive(Debug, Clone, Default)]
pub struct ProgramRun {
    pub stats: StageStats,
    pub trace: Vec<TraceRecord>,
    pub timeline: Vec<TimelineEntry>,
    /// Channel-occupancy intervals of off-chip DMAs and PIM macros.
    pub dma_intervals: Vec<(Ps, Ps)>,
    pub macro_intervals: Vec<(Ps, Ps)>,
}

struct Sim<'a> {
    hw: &'a HardwareConfig,
    plan: &'a AllocationPlan,
    prog: &'a Program,
    cache: &'a mut TimingCache,
    opts: SimOptions,
    devices: u32,
    tck: Ps,
    remaining: Vec<u32>,
    /// Latest completion among each command's dependencies.
    ready_at: Vec<Ps>,
    users: Vec<Vec<u32>>,
    start: Vec<Ps>,
    end: Vec<Ps>,
    done: Vec<bool>,
    enabler: Vec<Option<u32>>,
    cores: Vec<CoreState>,
    core_pos: Vec<usize>,
    pcu: PcuState,
    noc: VecDeque<usize>,
    noc_busy: bool,
    ch_free: Vec<Ps>,
    heap: BinaryHeap<Reverse<(Ps, u32)>>,
    run: ProgramRun,
}

impl<'a> Sim<'a> {
    fn align(&self, t: Ps) -> Ps {
        t.div_ceil(self.tck) * self.tck
    }

    fn unit_ready(&self, i: usize) -> bool {
        self.remaining[i] == 0
    }

    /// Starts every unit head whose dependencies are met; `cause` is the
    /// command whose completion triggered this pass.
    fn dispatch(&mut self, now: Ps, cause: Option<u32>) {
        loop {
            let mut progressed = false;
            // PCU first so a ready macro claims the channels before new DMAs
            if self.pcu.active.is_none() {
                if let Some(&i) = self.pcu.queue.front() {
                    if self.unit_ready(i) {
                        self.pcu.queue.pop_front();
                        self.pcu.active = Some(i);
                        self.start_cmd(i, now, cause);
                        progressed = true;
                    }
                }
            }
            if !self.noc_busy {
                if let Some(&i) = self.noc.front() {
                    if self.unit_ready(i) {
                        self.noc.pop_front();
                        self.noc_busy = true;
                        self.start_cmd(i, now, cause);
                        progressed = true;
                    }
                }
            }
            for c in 0..self.cores.len() {
                for u in 0..3 {
                    if self.cores[c].busy[u].is_some() {
                        continue;
                    }
                    let Some(&i) = self.cores[c].queues[u].front() else {
                        continue;
                    };
                    let pos = self.core_pos[i];
                    if !self.unit_ready(i)
                        || !self.cores[c].in_window(pos, self.hw.pending_queue_slots as usize)
                    {
                        continue;
                    }
                    self.cores[c].queues[u].pop_front();
                    self.cores[c].busy[u] = Some(i as CmdId);
                    self.start_cmd(i, now, cause);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn start_cmd(&mut self, i: usize, now: Ps, cause: Option<u32>) {
        let hw = self.hw;
        let cmd = &self.prog.cmds[i];
        let mut begin = now;
        let finish: Ps;
        let mut ev = EnergyEvents::default();
        match &cmd.kind {
            CommandKind::Mu(m) => {
                let cyc = match m.op {
                    MuOp::Fc => mu_cycles(hw, m.m, m.k, m.n),
                    MuOp::QkT | MuOp::Sv => mu_cycles_either(hw, m.m, m.k, m.n),
                };
                finish = now + hw.npu_cycles_to_ps(cyc);
                ev.mu_macs = (m.m * m.k * m.n) as f64;
                self.run.stats.busy_ps.mu += (finish - now) as f64;
            }
            CommandKind::Vu(v) => {
                finish = now + hw.npu_cycles_to_ps(vu_cycles(hw, v.op, v.elems));
                ev.vu_lane_ops = vu_lane_ops(v.op, v.elems) as f64;
                self.run.stats.busy_ps.vu += (finish - now) as f64;
            }
            CommandKind::Dma(d) if matches!(d.op, DmaOp::Transpose | DmaOp::Move) => {
                finish = now + hw.npu_cycles_to_ps(onchip_cycles(hw, d.bytes));
                self.run.stats.busy_ps.dma += (finish - now) as f64;
            }
            CommandKind::Dma(d) => {
                let write = d.op == DmaOp::Store;
                let t0 = self.align(now + (hw.dma_overhead_ns * 1e3).round() as Ps);
                let mut first = Ps::MAX;
                let mut last = t0;
                for l in &d.footprint.loads {
                    let ch = l.channel as usize;
                    let st = self.align(t0.max(self.ch_free[ch]));
                    let cyc = self.cache.stream_cycles(l.cols, l.acts, write, hw);
                    let en = st + cyc * self.tck;
                    self.ch_free[ch] = en;
                    first = first.min(st);
                    last = last.max(en);
                    if write {
                        ev.dram_write_cols += l.cols as f64;
                    } else {
                        ev.dram_read_cols += l.cols as f64;
                    }
                    ev.dram_acts += l.acts.clamp(1, l.cols.max(1)) as f64;
                    if self.opts.record_trace {
                        let mut tr = Vec::new();
                        simulate_dma_stream(
                            *l,
                            write,
                            &hw.timing.cycles(),
                            hw.banks_per_channel,
                            Some(&mut tr),
                        );
                        let off = st / self.tck;
                        self.run.trace.extend(tr.into_iter().map(|mut r| {
                            r.cycle += off;
                            r
                        }));
                    }
                }
                if first != Ps::MAX {
                    self.run.dma_intervals.push((first, last));
                }
                finish = last;
                self.run.stats.counters.offchip_dma += 1.0;
                self.run.stats.counters.dma_bytes += d.bytes as f64;
                self.run.stats.busy_ps.dma += (finish - now) as f64;
            }
            CommandKind::Pim(m) => {
                let tm = self.plan.tile_map(m.matrix);
                let timing = self
                    .cache
                    .macro_timing(tm, m.rows, m.cols, m.gelu, hw)
                    .expect("macro window validated at compile time");
                // unified memory: the NPU holds every off-chip access while a macro runs
                let chans: Vec<usize> = match hw.memory_mode {
                    MemoryMode::Unified => (0..hw.num_channels as usize).collect(),
                    _ => tm.channels.iter().map(|&c| c as usize).collect(),
                };
                let decode = hw.npu_cycles_to_ps(hw.pcu_decode_cycles);
                let issued = self.ready_at[i] + (hw.macro_issue_ns * 1e3).round() as Ps;
                let st = self.align(
                    (now + decode)
                        .max(issued)
                        .max(chans.iter().map(|&c| self.ch_free[c]).max().unwrap_or(0)),
                );
                let busy = m.tokens * timing.cycles * self.tck;
                for &c in &chans {
                    self.ch_free[c] = st + busy;
                }
                begin = now;
                finish = st + busy + hw.npu_cycles_to_ps(hw.noc_hop_cycles);
                self.run.macro_intervals.push((st, st + busy));
                self.run.stats.pim_active_ps += busy as f64;
                self.run.stats.busy_ps.pim += busy as f64;
                self.run.stats.counters.pim_macros += 1.0;
                let n = m.tokens as f64;
                let banks = hw.banks_per_channel as f64;
                ev.pim_macs = timing.counts.mac_all as f64 * n;
                ev.pim_bank_acts = timing.counts.act_all as f64 * banks * n;
                ev.gb_write_cols = timing.counts.write_gb as f64 * n;
                ev.acc_read_cols = timing.counts.read_acc as f64 * banks * n;
                if self.opts.record_trace {
                    let prog = crate::isa::expand_macro(tm, m.rows, m.cols, m.gelu)
                        .expect("macro window validated at compile time");
                    let mut tr = Vec::new();
                    simulate_macro(&prog, hw, Some(&mut tr));
                    let base = st / self.tck;
                    for k in 0..m.tokens {
                        let off = base + k * timing.cycles;
                        self.run.trace.extend(tr.iter().map(|r| TraceRecord {
                            cycle: r.cycle + off,
                            ..*r
                        }));
                    }
                }
            }
            CommandKind::Sync(s) => {
                let mut cyc = hw.sync_overhead_cycles + s.bytes.div_ceil(hw.noc_bytes_per_cycle);
                cyc += hw.noc_hop_cycles;
                let mut t = hw.npu_cycles_to_ps(cyc);
                if self.devices > 1 && s.gather_bytes > 0 {
                    let d = (self.devices - 1) as f64;
                    let per = hw.pcie_latency_ns * 1e3 + s.gather_bytes as f64 / hw.pcie_bw * 1e12;
                    t += (d * per).round() as Ps;
                    self.run.stats.counters.pcie_bytes += d * s.gather_bytes as f64;
                }
                finish = now + t;
                self.run.stats.counters.noc_bytes += s.bytes as f64;
                self.run.stats.busy_ps.noc += t as f64;
            }
        }
        self.run.stats.events.add(&ev, 1.0);
        self.start[i] = begin;
        self.end[i] = finish;
        self.enabler[i] = cause;
        self.heap.push(Reverse((finish, i as u32)));
    }

    fn complete(&mut self, i: usize) {
        self.done[i] = true;
        let cmd = &self.prog.cmds[i];
        match cmd.target {
            Target::Core(c) => {
                let c = c as usize;
                let u = CoreState::slot(cmd.unit());
                self.cores[c].busy[u] = None;
                let pos = self.core_pos[i];
                self.cores[c].retire(pos);
            }
            Target::Device => match cmd.unit() {
                Unit::Pcu => self.pcu.active = None,
                _ => self.noc_busy = false,
            },
        }
        for k in 0..self.users[i].len() {
            let u = self.users[i][k] as usize;
            self.remaining[u] -= 1;
            self.ready_at[u] = self.ready_at[u].max(self.end[i]);
        }
        if self.opts.record_timeline {
            self.run.timeline.push(TimelineEntry {
                id: cmd.id,
                unit: cmd.unit(),
                target: cmd.target,
                class: cmd.class,
                start_ps: self.start[i],
                end_ps: self.end[i],
            });
        }
    }
}

/// Simulates one compiled program on a device with idle memory channels.
pub fn simulate_program(
    prog: &Program,
    hw: &HardwareConfig,
    plan: &AllocationPlan,
    cache: &mut TimingCache,
    devices: u32,
    opts: SimOptions,
) -> Result<ProgramRun, EngineError> {
    let n = prog.cmds.len();
    let mut users = vec![Vec::new(); n];
    let mut remaining = vec![0u32; n];
    for (i, c) in prog.cmds.iter().enumerate() {
        for &d in &c.deps {
            users[d as usize].push(i as u32);
            remaining[i] += 1;
        }
    }
    let mut cores: Vec<CoreState> = (0..hw.num_cores).map(|_| CoreState::new()).collect();
    let mut core_pos = vec![0usize; n];
    let mut pcu = PcuState::default();
    let mut noc = VecDeque::new();
    for (i, c) in prog.cmds.iter().enumerate() {
        match c.target {
            Target::Core(k) => {
                let core = &mut cores[k as usize];
                core_pos[i] = core.program.len();
                core.program.push(i);
                core.retired.push(false);
                core.queues[CoreState::slot(c.unit())].push_back(i);
            }
            Target::Device => match c.unit() {
                Unit::Pcu => pcu.queue.push_back(i),
                _ => noc.push_back(i),
            },
        }
    }
    let mut sim = Sim {
        hw,
        plan,
        prog,
        cache,
        opts,
        devices,
        tck: hw.timing.tck_ps(),
        remaining,
        ready_at: vec![0; n],
        users,
        start: vec![0; n],
        end: vec![0; n],
        done: vec![false; n],
        enabler: vec![None; n],
        cores,
        core_pos,
        pcu,
        noc,
        noc_busy: false,
        ch_free: vec![0; hw.num_channels as usize],
        heap: BinaryHeap::new(),
        run: ProgramRun::default(),
    };
    let budget = (hw.deadlock_budget_ns * 1e3) as Ps;
    sim.dispatch(0, None);
    let mut completed = 0;
    while let Some(Reverse((t, i))) = sim.heap.pop() {
        if t > budget {
            return Err(EngineError::Budget(hw.deadlock_budget_ns));
        }
        sim.complete(i as usize);
        completed += 1;
        // finish everything ending at the same instant before dispatching
        while let Some(Reverse((t2, j))) = sim.heap.peek().copied() {
            if t2 != t {
                break;
            }
            sim.heap.pop();
            sim.complete(j as usize);
            completed += 1;
        }
        sim.dispatch(t, Some(i));
    }
    if completed != n {
        let stuck: Vec<String> = (0..n)
            .filter(|&i| !sim.done[i])
            .take(8)
            .map(|i| {
                let c = &prog.cmds[i];
                format!("#{} {:?} on {:?} waiting on {:?}", c.id, c.unit(), c.target, c.deps)
            })
            .collect();
        return Err(EngineError::Deadlock {
            remaining: n - completed,
            stuck: stuck.join("; "),
        });
    }

    let mut run = std::mem::take(&mut sim.run);
    let total = sim.end.iter().copied().max().unwrap_or(0);
    run.stats.time_ps = total as f64;
    run.stats.counters.commands = n as f64;
    run.stats.breakdown_ps = critical_path(prog, &sim.start, &sim.end, &sim.enabler);
    run.stats.dma_macro_overlap_ps = overlap(&run.dma_intervals, &run.macro_intervals) as f64;
    if opts.record_trace {
        run.trace.sort_by_key(|r| (r.channel, r.cycle));
        run.trace.sort_by_key(|r| r.cycle);
    }
    Ok(run)
}

/// Walks back from the last command through the commands that released each
/// start, charging every segment (including waits) to the waiting command's class.
fn critical_path(
    prog: &Program,
    start: &[Ps],
    end: &[Ps],
    enabler: &[Option<u32>],
) -> BTreeMap<OpClass, f64> {
    let mut out = BTreeMap::new();
    let Some(mut cur) = (0..end.len()).max_by_key(|&i| (end[i], i)) else {
        return out;
    };
    loop {
        let class = prog.cmds[cur].class;
        let from = enabler[cur].map_or(0, |e| end[e as usize]);
        *out.entry(class).or_insert(0.0) += (end[cur] - from.min(start[cur])) as f64;
        match enabler[cur] {
            Some(e) => cur = e as usize,
            None => break,
        }
    }
    out
}

/// Total time covered by both interval sets.
fn overlap(a: &[(Ps, Ps)], b: &[(Ps, Ps)]) -> Ps {
    let merge = |v: &[(Ps, Ps)]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        let mut m: Vec<(Ps, Ps)> = Vec::new();
        for (s, e) in v {
            match m.last_mut() {
                Some(l) if s <= l.1 => l.1 = l.1.max(e),
                _ => m.push((s, e)),
            }
        }
        m
    };
    let (a, b) = (merge(a), merge(b));
    let (mut i, mut j, mut tot) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if e > s {
            tot += e - s;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    tot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunOptions {
    pub compile: CompileOptions,
    /// Generation steps simulated exactly; the rest are interpolated linearly in
    /// context length. `None` simulates every step.
    pub gen_samples: Option<u32>,
    /// Place the model even when it exceeds device capacity.
    pub ignore_capacity: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            compile: CompileOptions::default(),
            gen_samples: Some(8),
            ignore_capacity: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub model: String,
    pub mode: MemoryMode,
    pub devices: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_ns: f64,
    pub summarization_ns: f64,
    pub generation_ns: f64,
    pub generation_steps: u64,
    pub breakdown_ns: BTreeMap<String, f64>,
    pub summarization_breakdown_ns: BTreeMap<String, f64>,
    pub generation_breakdown_ns: BTreeMap<String, f64>,
    pub energy: Energy,
    pub events: EnergyEvents,
    pub counters: Counters,
    /// Busy fraction of each unit kind over total time (per unit instance).
    pub utilization: BTreeMap<String, f64>,
    pub decisions: Vec<FcDecision>,
    pub qkt_pim_utilization: Option<f64>,
    pub dma_macro_overlap_ns: f64,
    pub pim_active_ns: f64,
    pub wasted_tile_elems: u64,
    pub footprint_bytes: u64,
}

impl SimReport {
    pub fn per_token_ns(&self) -> f64 {
        if self.generation_steps == 0 {
            0.0
        } else {
            self.generation_ns / self.generation_steps as f64
        }
    }

    /// Decoder-block time: everything except embedding and the output head.
    pub fn class_ns(&self, classes: &[OpClass]) -> f64 {
        classes
            .iter()
            .map(|c| self.breakdown_ns.get(c.name()).copied().unwrap_or(0.0))
            .sum()
    }
}

fn names(m: &BTreeMap<OpClass, f64>) -> BTreeMap<String, f64> {
    OpClass::ALL
        .iter()
        .map(|c| (c.name().to_string(), m.get(c).copied().unwrap_or(0.0) / 1e3))
        .collect()
}

/// Context lengths whose generation steps are simulated exactly.
pub fn sample_contexts(first: u64, last: u64, samples: Option<u32>) -> Vec<u64> {
    if last < first {
        return Vec::new();
    }
    let steps = last - first + 1;
    match samples {
        Some(s) if (s.max(2) as u64) < steps => {
            let s = s.max(2) as u64;
            let mut v: Vec<u64> = (0..s).map(|k| first + k * (steps - 1) / (s - 1)).collect();
            v.dedup();
            v
        }
        _ => (first..=last).collect(),
    }
}

fn alloc_options(opts: &RunOptions) -> AllocOptions {
    AllocOptions {
        kv_layout: if opts.compile.attention == AttnMapping::PimQkt {
            KvLayout::PimTiled
        } else {
            KvLayout::Linear
        },
        devices: opts.compile.devices.max(1),
        ignore_capacity: opts.ignore_capacity,
    }
}

/// Plans memory and lowers one stage without simulating it.
pub fn compile_stage(
    model: &ModelConfig,
    hw: &HardwareConfig,
    opts: &RunOptions,
    stage: Stage,
) -> Result<(Program, AllocationPlan), EngineError> {
    hw.validate()?;
    model.validate()?;
    let plan = plan_allocation(model, hw, alloc_options(opts))?;
    let mut cache = TimingCache::default();
    let prog = build_commands(model, hw, &plan, stage, &opts.compile, &mut cache)?;
    Ok((prog, plan))
}

/// Simulates one stage, keeping the command trace and timeline.
pub fn run_stage(
    model: &ModelConfig,
    hw: &HardwareConfig,
    opts: &RunOptions,
    stage: Stage,
) -> Result<ProgramRun, EngineError> {
    let (prog, plan) = compile_stage(model, hw, opts, stage)?;
    let mut cache = TimingCache::default();
    let sopts = SimOptions {
        record_trace: true,
        record_timeline: true,
    };
    simulate_program(&prog, hw, &plan, &mut cache, opts.compile.devices.max(1), sopts)
}

/// Simulates summarization followed by `output_tokens - 1` generation steps.
pub fn run(model: &ModelConfig, hw: &HardwareConfig, opts: &RunOptions) -> Result<SimReport, EngineError> {
    hw.validate()?;
    model.validate()?;
    let plan = plan_allocation(model, hw, alloc_options(opts))?;
    let mut cache = TimingCache::default();
    let devices = opts.compile.devices.max(1);
    let sopts = SimOptions::default();

    let sum_prog = build_commands(model, hw, &plan, Stage::Summarization, &opts.compile, &mut cache)?;
    let sum = simulate_program(&sum_prog, hw, &plan, &mut cache, devices, sopts)?.stats;
    let mut decisions = sum_prog.decisions.clone();

    let mut gen = StageStats::default();
    let mut qkt_util = None;
    let steps = if model.family == Family::Gpt {
        model.output_tokens.saturating_sub(1)
    } else {
        0
    };
    if steps > 0 {
        let first = model.input_tokens + 1;
        let last = model.input_tokens + steps;
        let ctxs = sample_contexts(first, last, opts.gen_samples);
        let mut sampled: Vec<(u64, StageStats)> = Vec::new();
        for &ctx in &ctxs {
            let p = build_commands(model, hw, &plan, Stage::Generation { context: ctx }, &opts.compile, &mut cache)?;
            if sampled.is_empty() {
                decisions.extend(p.decisions.iter().copied());
                qkt_util = p.qkt_pim_utilization;
            }
            let st = simulate_program(&p, hw, &plan, &mut cache, devices, sopts)?.stats;
            sampled.push((ctx, st));
        }
        for (k, (ctx, st)) in sampled.iter().enumerate() {
            gen.add(st, 1.0);
            if let Some((next, st2)) = sampled.get(k + 1) {
                // steps strictly between two samples, linear in context length
                let between = (next - ctx - 1) as f64;
                if between > 0.0 {
                    gen.add(st, between / 2.0);
                    gen.add(st2, between / 2.0);
                }
            }
        }
    }

    let mut all = StageStats::default();
    all.add(&sum, 1.0);
    all.add(&gen, 1.0);
    let total = all.time_ps;
    let util = |busy: f64, units: u32| {
        if total > 0.0 {
            busy / (total * units as f64)
        } else {
            0.0
        }
    };
    let mut utilization = BTreeMap::new();
    utilization.insert("mu".into(), util(all.busy_ps.mu, hw.num_cores));
    utilization.insert("vu".into(), util(all.busy_ps.vu, hw.num_cores));
    utilization.insert("dma".into(), util(all.busy_ps.dma, hw.num_cores));
    utilization.insert("pim".into(), util(all.busy_ps.pim, 1));
    utilization.insert("noc".into(), util(all.busy_ps.noc, 1));

    Ok(SimReport {
        model: model.name.clone(),
        mode: hw.memory_mode,
        devices,
        input_tokens: model.input_tokens,
        output_tokens: model.output_tokens,
        total_ns: total / 1e3,
        summarization_ns: sum.time_ps / 1e3,
        generation_ns: gen.time_ps / 1e3,
        generation_steps: steps,
        breakdown_ns: names(&all.breakdown_ps),
        summarization_breakdown_ns: names(&sum.breakdown_ps),
        generation_breakdown_ns: names(&gen.breakdown_ps),
        energy: account_energy(&all.events, hw),
        events: all.events,
        counters: all.counters,
        utilization,
        decisions,
        qkt_pim_utilization: qkt_util,
        dma_macro_overlap_ns: all.dma_macro_overlap_ps / 1e3,
        pim_active_ns: all.pim_active_ps / 1e3,
        wasted_tile_elems: plan.stats.wasted_elems,
        footprint_bytes: plan.stats.footprint_bytes,
    })
}

/// Runs the model sharded over `devices` identical devices linked by PCIe.
/// Devices execute symmetric shards, so one device is simulated and cross-device
/// all-gathers are charged at every synchronization.
pub fn run_multi_device(
    model: &ModelConfig,
    hw: &HardwareConfig,
    devices: u32,
    opts: &RunOptions,
) -> Result<SimReport, EngineError> {
    let mut o = *opts;
    o.compile.devices = devices.max(1);
    run(model, hw, &o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mac_burst_energy() {
        let hw = HardwareConfig::default();
        let ev = EnergyEvents {
            pim_macs: 8.0,
            ..Default::default()
        };
        let e = account_energy(&ev, &hw);
        assert_eq!(e.pim_ops, 8.0 * hw.energy.e_pim_op);
        assert_eq!(e.normal_mem, 0.0);
        assert_eq!(e.core_compute, 0.0);
    }

    #[test]
    fn overlap_of_intervals() {
        assert_eq!(overlap(&[(0, 10), (20, 30)], &[(5, 25)]), 10);
        assert_eq!(overlap(&[(0, 10)], &[(10, 20)]), 0);
        assert_eq!(overlap(&[], &[(0, 5)]), 0);
    }

    #[test]
    fn sample_points() {
        assert_eq!(sample_contexts(5, 7, Some(8)), vec![5, 6, 7]);
        let v = sample_contexts(1, 100, Some(4));
        assert_eq!(v, vec![1, 34, 67, 100]);
        assert!(sample_contexts(3, 2, None).is_empty());
    }
}
