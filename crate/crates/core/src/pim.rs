//! Per-channel memory controller model for PIM micro-commands and plain DMA
//! streams, plus a standalone legality checker for command traces.
//!
//! Everything here counts memory clock cycles (tCK).

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::config::{HardwareConfig, TimingCycles};
use crate::isa::{MacroProgram, MicroKind, MicroPimCommand, TraceKind, TraceRecord};
use crate::memmap::{ChannelLoad, TileMap};

/// Micro-command counts of one macro invocation (one token), summed over channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MicroCounts {
    pub write_gb: u64,
    pub act_all: u64,
    pub mac_all: u64,
    pub act_func: u64,
    pub read_acc: u64,
    pub pre_all: u64,
}

impl MicroCounts {
    fn add(&mut self, k: MicroKind) {
        match k {
            MicroKind::WriteGb => self.write_gb += 1,
            MicroKind::ActAll => self.act_all += 1,
            MicroKind::MacAll => self.mac_all += 1,
            MicroKind::ActFunc => self.act_func += 1,
            MicroKind::ReadAcc => self.read_acc += 1,
            MicroKind::PreAll => self.pre_all += 1,
        }
    }

    pub fn scaled(&self, n: u64) -> MicroCounts {
        MicroCounts {
            write_gb: self.write_gb * n,
            act_all: self.act_all * n,
            mac_all: self.mac_all * n,
            act_func: self.act_func * n,
            read_acc: self.read_acc * n,
            pre_all: self.pre_all * n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacroTiming {
    /// Cycles for one token on the slowest channel.
    pub cycles: u64,
    pub counts: MicroCounts,
}

struct PimChannel {
    now: u64,
    data_free: u64,
    pre_done: u64,
    act_time: u64,
    last_mac: Option<u64>,
    mac_end: u64,
    gb_ready: u64,
    af_end: u64,
    ra_issue: Option<u64>,
    ra_end: u64,
}

impl PimChannel {
    fn new() -> Self {
        PimChannel {
            now: 0,
            data_free: 0,
            pre_done: 0,
            act_time: 0,
            last_mac: None,
            mac_end: 0,
            gb_ready: 0,
            af_end: 0,
            ra_issue: None,
            ra_end: 0,
        }
    }

    fn ready(&self, k: MicroKind, c: &TimingCycles) -> u64 {
        let t = match k {
            MicroKind::WriteGb => self.data_free.max(self.mac_end),
            MicroKind::ActAll => self.pre_done,
            MicroKind::MacAll => {
                let spacing = self.last_mac.map_or(0, |m| m + c.mac.max(c.ccd_l));
                (self.act_time + c.rcdrd)
                    .max(self.gb_ready)
                    .max(spacing)
                    .max(self.ra_end)
            }
            MicroKind::ActFunc => self.mac_end,
            MicroKind::ReadAcc => self.mac_end.max(self.af_end).max(self.data_free),
            MicroKind::PreAll => {
                let ra = self.ra_issue.map_or(0, |r| r + 1);
                (self.act_time + c.ras).max(self.mac_end).max(ra)
            }
        };
        t.max(self.now)
    }

    fn issue(&mut self, k: MicroKind, t: u64, c: &TimingCycles, banks: u64) {
        match k {
            MicroKind::WriteGb => {
                self.data_free = t + c.gb_write;
                self.gb_ready = t + c.gb_write;
            }
            MicroKind::ActAll => {
                self.act_time = t;
                self.ra_issue = None;
            }
            MicroKind::MacAll => {
                self.last_mac = Some(t);
                self.mac_end = t + c.mac;
            }
            MicroKind::ActFunc => self.af_end = t + c.act_func,
            MicroKind::ReadAcc => {
                self.ra_issue = Some(t);
                self.ra_end = t + banks * c.ccd_l;
                self.data_free = self.ra_end;
            }
            MicroKind::PreAll => {
                self.pre_done = t + c.rp;
                self.last_mac = None;
            }
        }
        self.now = t + 1;
    }

    fn end(&self) -> u64 {
        self.pre_done
            .max(self.data_free)
            .max(self.af_end)
            .max(self.mac_end)
    }
}

/// Issues one channel's micro-command stream in order, letting an ACT_ALL go
/// ahead of the global-buffer writes queued directly before it. Returns the
/// cycle at which the channel is idle again.
pub fn simulate_pim_stream(
    seq: &[MicroPimCommand],
    channel: u32,
    c: &TimingCycles,
    banks: u32,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> u64 {
    if seq.is_empty() {
        return 0;
    }
    let banks = banks as u64;
    let mut st = PimChannel::new();
    let mut issued = vec![false; seq.len()];
    let mut head = 0;
    while head < seq.len() {
        if issued[head] {
            head += 1;
            continue;
        }
        let mut pick = head;
        let mut t = st.ready(seq[head].kind, c);
        if seq[head].kind == MicroKind::WriteGb {
            let j = (head..seq.len()).find(|&j| seq[j].kind != MicroKind::WriteGb);
            if let Some(j) = j {
                if seq[j].kind == MicroKind::ActAll && !issued[j] {
                    let ta = st.ready(MicroKind::ActAll, c);
                    if ta < t {
                        pick = j;
                        t = ta;
                    }
                }
            }
        }
        st.issue(seq[pick].kind, t, c, banks);
        issued[pick] = true;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TraceRecord {
                cycle: t,
                channel,
                bank: None,
                kind: TraceKind::from_micro(seq[pick].kind),
                row: seq[pick].row,
                col: seq[pick].col,
            });
        }
    }
    st.end()
}

/// Runs every channel of a macro program and reports the slowest channel.
pub fn simulate_macro(
    prog: &MacroProgram,
    hw: &HardwareConfig,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> MacroTiming {
    let c = hw.timing.cycles();
    let mut counts = MicroCounts::default();
    let mut cycles = 0;
    for (ch, seq) in &prog.channels {
        for m in seq {
            counts.add(m.kind);
        }
        let end = simulate_pim_stream(seq, *ch, &c, hw.banks_per_channel, trace.as_deref_mut());
        cycles = cycles.max(end);
    }
    if let Some(tr) = trace {
        tr.sort_by_key(|r| (r.cycle, r.channel));
    }
    MacroTiming { cycles, counts }
}

/// Reads or writes `load.cols` columns spread over `load.acts` rows of one
/// channel. Consecutive rows fall in consecutive banks. Returns elapsed cycles.
pub fn simulate_dma_stream(
    load: ChannelLoad,
    write: bool,
    c: &TimingCycles,
    banks: u32,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> u64 {
    if load.cols == 0 {
        return 0;
    }
    let acts = load.acts.clamp(1, load.cols);
    let banks = banks as u64;
    let mut used: HashSet<u64> = HashSet::new();
    let mut take = |mut t: u64| {
        while !used.insert(t) {
            t += 1;
        }
        t
    };
    let mut pre_done = vec![0u64; banks as usize];
    let mut bus_free = 0u64;
    let mut last_act = 0u64;
    let mut end = 0u64;
    let rcd = if write { c.rcdwr } else { c.rcdrd };
    let kind = if write { TraceKind::Wr } else { TraceKind::Rd };
    let base = load.cols / acts;
    let extra = load.cols % acts;
    for r in 0..acts {
        let b = (r % banks) as usize;
        let n = base + u64::from(r < extra);
        let act = take(pre_done[b].max(last_act));
        last_act = act;
        let mut t = 0;
        for k in 0..n {
            t = take((act + rcd).max(bus_free));
            bus_free = t + c.ccd_l;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TraceRecord {
                    cycle: t,
                    channel: load.channel,
                    bank: Some(b as u32),
                    kind,
                    row: r / banks,
                    col: k,
                });
            }
        }
        let after_col = if write { t + c.ccd_l + c.wr } else { t + c.ccd_l };
        let pre = take((act + c.ras).max(after_col));
        pre_done[b] = pre + c.rp;
        end = end.max(pre_done[b]).max(bus_free);
        if let Some(tr) = trace.as_deref_mut() {
            for (cycle, k) in [(act, TraceKind::Act), (pre, TraceKind::Pre)] {
                tr.push(TraceRecord {
                    cycle,
                    channel: load.channel,
                    bank: Some(b as u32),
                    kind: k,
                    row: r / banks,
                    col: 0,
                });
            }
        }
    }
    if let Some(tr) = trace {
        tr.sort_by_key(|r| (r.cycle, r.channel));
    }
    end
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct MacroKey {
    rows: u64,
    cols: u64,
    rows_per_tile: u64,
    cols_per_tile: u64,
    channels: usize,
    gelu: bool,
}

/// Memoizes channel simulations by shape; timing does not depend on which DRAM
/// rows a tile occupies.
#[derive(Debug, Default)]
pub struct TimingCache {
    macros: HashMap<MacroKey, MacroTiming>,
    streams: HashMap<(u64, u64, bool), u64>,
    pub macro_sims: u64,
    pub stream_sims: u64,
}

impl TimingCache {
    pub fn macro_timing(
        &mut self,
        tm: &TileMap,
        rows: u64,
        cols: u64,
        gelu: bool,
        hw: &HardwareConfig,
    ) -> Result<MacroTiming, crate::isa::IsaError> {
        let key = MacroKey {
            rows,
            cols,
            rows_per_tile: tm.rows_per_tile,
            cols_per_tile: tm.cols_per_tile,
            channels: tm.channels.len(),
            gelu,
        };
        if let Some(t) = self.macros.get(&key) {
            return Ok(*t);
        }
        let prog = crate::isa::expand_macro(tm, rows, cols, gelu)?;
        let t = simulate_macro(&prog, hw, None);
        self.macro_sims += 1;
        self.macros.insert(key, t);
        Ok(t)
    }

    pub fn stream_cycles(&mut self, cols: u64, acts: u64, write: bool, hw: &HardwareConfig) -> u64 {
        if let Some(&t) = self.streams.get(&(cols, acts, write)) {
            return t;
        }
        let load = ChannelLoad {
            channel: 0,
            cols,
            acts,
        };
        let t = simulate_dma_stream(load, write, &hw.timing.cycles(), hw.banks_per_channel, None);
        self.stream_sims += 1;
        self.streams.insert((cols, acts, write), t);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub index: usize,
    pub rule: String,
}

#[derive(Clone)]
struct BankState {
    open: bool,
    act: Option<u64>,
    pre_done: u64,
    last_wr_end: u64,
}

/// Checks a command trace against DRAM timing rules. Records must be sorted by cycle.
pub fn validate_trace(records: &[TraceRecord], hw: &HardwareConfig) -> Vec<Violation> {
    let c = hw.timing.cycles();
    let nb = hw.banks_per_channel as usize;
    let mut out = Vec::new();
    let mut banks: HashMap<u32, Vec<BankState>> = HashMap::new();
    let mut cmd_bus: HashSet<(u32, u64)> = HashSet::new();
    let mut data_free: HashMap<u32, u64> = HashMap::new();
    let mut last_mac: HashMap<u32, u64> = HashMap::new();
    let mut last_cycle: HashMap<u32, u64> = HashMap::new();
    let fresh = BankState {
        open: false,
        act: None,
        pre_done: 0,
        last_wr_end: 0,
    };
    for (i, r) in records.iter().enumerate() {
        let mut bad = |rule: String| out.push(Violation { index: i, rule });
        if r.channel >= hw.num_channels {
            bad(format!("channel {} out of range", r.channel));
            continue;
        }
        if let Some(&lc) = last_cycle.get(&r.channel) {
            if r.cycle < lc {
                bad("records out of order".into());
            }
        }
        last_cycle.insert(r.channel, r.cycle);
        if !cmd_bus.insert((r.channel, r.cycle)) {
            bad(format!("two commands on channel {} in cycle {}", r.channel, r.cycle));
        }
        let bs = banks.entry(r.channel).or_insert_with(|| vec![fresh.clone(); nb]);
        let sel: Vec<usize> = match (r.kind.all_bank(), r.bank) {
            (true, _) => (0..nb).collect(),
            (false, Some(b)) if (b as usize) < nb => vec![b as usize],
            (false, _) => {
                bad("per-bank command without a valid bank".into());
                continue;
            }
        };
        let df = data_free.entry(r.channel).or_insert(0);
        match r.kind {
            TraceKind::Act | TraceKind::ActAll => {
                for &b in &sel {
                    if bs[b].open {
                        bad(format!("ACT to open bank {b}"));
                    }
                    if r.cycle < bs[b].pre_done {
                        bad(format!("tRP violated on bank {b}"));
                    }
                    bs[b].open = true;
                    bs[b].act = Some(r.cycle);
                }
            }
            TraceKind::Rd | TraceKind::Wr | TraceKind::MacAll => {
                let rcd = if r.kind == TraceKind::Wr { c.rcdwr } else { c.rcdrd };
                for &b in &sel {
                    match (bs[b].open, bs[b].act) {
                        (true, Some(a)) if r.cycle >= a + rcd => {}
                        (true, Some(_)) => bad(format!("tRCD violated on bank {b}")),
                        _ => bad(format!("column access to closed bank {b}")),
                    }
                }
                if r.kind == TraceKind::MacAll {
                    if let Some(&m) = last_mac.get(&r.channel) {
                        if r.cycle < m + c.mac.max(c.ccd_l) {
                            bad("MAC_ALL spacing violated".into());
                        }
                    }
                    last_mac.insert(r.channel, r.cycle);
                } else {
                    if r.cycle < *df {
                        bad("tCCD / data bus conflict".into());
                    }
                    *df = r.cycle + c.ccd_l;
                    if r.kind == TraceKind::Wr {
                        bs[sel[0]].last_wr_end = r.cycle + c.ccd_l;
                    }
                }
            }
            TraceKind::WriteGb | TraceKind::ReadAcc => {
                if r.cycle < *df {
                    bad("data bus conflict".into());
                }
                *df = r.cycle
                    + if r.kind == TraceKind::WriteGb {
                        c.gb_write
                    } else {
                        nb as u64 * c.ccd_l
                    };
            }
            TraceKind::ActFunc => {}
            TraceKind::Pre | TraceKind::PreAll => {
                for &b in &sel {
                    if let (true, Some(a)) = (bs[b].open, bs[b].act) {
                        if r.cycle < a + c.ras {
                            bad(format!("tRAS violated on bank {b}"));
                        }
                    }
                    if bs[b].last_wr_end > 0 && r.cycle < bs[b].last_wr_end + c.wr {
                        bad(format!("tWR violated on bank {b}"));
                    }
                    bs[b].open = false;
                    bs[b].pre_done = r.cycle + c.rp;
                    bs[b].last_wr_end = 0;
                }
                if r.kind == TraceKind::PreAll {
                    last_mac.remove(&r.channel);
                }
            }
        }
    }
    out
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = String::from("# cycle channel bank command row col\n");
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| l.parse().map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::expand_macro;
    use crate::memmap::tile_weight_matrix;

    fn hw() -> HardwareConfig {
        HardwareConfig::default()
    }

    #[test]
    fn small_macro_cycle_count() {
        let hw = hw();
        let tm = tile_weight_matrix(128, 256, &hw).unwrap();
        let prog = expand_macro(&tm, 128, 256, false).unwrap();
        let mut tr = Vec::new();
        let t = simulate_macro(&prog, &hw, Some(&mut tr));
        // 16 buffer writes from cycle 0, ACT at 1, first MAC at 1 + tRCD
        assert_eq!(t.cycles, 166);
        let ch0: Vec<_> = tr.iter().filter(|r| r.channel == 0).collect();
        let act = ch0.iter().find(|r| r.kind == TraceKind::ActAll).unwrap();
        assert_eq!(act.cycle, 1);
        let ra = ch0.iter().find(|r| r.kind == TraceKind::ReadAcc).unwrap();
        assert_eq!(ra.cycle, 105);
        assert!(validate_trace(&tr, &hw).is_empty());
    }

    #[test]
    fn macro_traces_are_legal() {
        let hw = hw();
        for (r, c, g) in [(1024, 1024, false), (300, 2500, true), (17, 5, false)] {
            let tm = tile_weight_matrix(r, c, &hw).unwrap();
            let prog = expand_macro(&tm, r, c, g).unwrap();
            let mut tr = Vec::new();
            simulate_macro(&prog, &hw, Some(&mut tr));
            let v = validate_trace(&tr, &hw);
            assert!(v.is_empty(), "{r}x{c}: {:?}", &v[..v.len().min(3)]);
        }
    }

    #[test]
    fn dma_stream_legal_and_near_peak() {
        let hw = hw();
        let c = hw.timing.cycles();
        for write in [false, true] {
            let load = ChannelLoad {
                channel: 2,
                cols: 64 * 64,
                acts: 64,
            };
            let mut tr = Vec::new();
            let t = simulate_dma_stream(load, write, &c, 16, Some(&mut tr));
            let v = validate_trace(&tr, &hw);
            assert!(v.is_empty(), "{:?}", &v[..v.len().min(3)]);
            // 4096 columns at one per tCCD, plus startup and drain
            let ideal = 4096 * c.ccd_l;
            assert!(t >= ideal && t < ideal + 400, "{t}");
        }
    }

    #[test]
    fn validator_catches_violations() {
        let hw = hw();
        let rec = |cycle, kind, bank: Option<u32>| TraceRecord {
            cycle,
            channel: 0,
            bank,
            kind,
            row: 0,
            col: 0,
        };
        let bad_rcd = vec![rec(0, TraceKind::Act, Some(0)), rec(5, TraceKind::Rd, Some(0))];
        assert_eq!(validate_trace(&bad_rcd, &hw).len(), 1);
        let bad_ras = vec![rec(0, TraceKind::Act, Some(0)), rec(10, TraceKind::Pre, Some(0))];
        assert_eq!(validate_trace(&bad_ras, &hw).len(), 1);
        let bad_rp = vec![
            rec(0, TraceKind::Act, Some(0)),
            rec(42, TraceKind::Pre, Some(0)),
            rec(50, TraceKind::Act, Some(0)),
        ];
        assert_eq!(validate_trace(&bad_rp, &hw).len(), 1);
        let closed = vec![rec(0, TraceKind::Rd, Some(3))];
        assert_eq!(validate_trace(&closed, &hw).len(), 1);
        let bus = vec![rec(0, TraceKind::Act, Some(0)), rec(0, TraceKind::Act, Some(1))];
        assert_eq!(validate_trace(&bus, &hw).len(), 1);
    }

    #[test]
    fn trace_text_roundtrip() {
        let hw = hw();
        let tm = tile_weight_matrix(64, 64, &hw).unwrap();
        let prog = expand_macro(&tm, 64, 64, false).unwrap();
        let mut tr = Vec::new();
        simulate_macro(&prog, &hw, Some(&mut tr));
        assert_eq!(parse_trace(&format_trace(&tr)).unwrap(), tr);
    }

    #[test]
    fn cache_reuses_shapes() {
        let hw = hw();
        let mut cache = TimingCache::default();
        let a = tile_weight_matrix(512, 512, &hw).unwrap();
        let mut b = a.clone();
        b.base_row = 900;
        let ta = cache.macro_timing(&a, 512, 512, false, &hw).unwrap();
        let tb = cache.macro_timing(&b, 512, 512, false, &hw).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(cache.macro_sims, 1);
    }
}
