use std::ops::Range;

use serde::Serialize;

use super::estimate::{adaptive_map_fc, Choice, FcDecision, FcKind};
use super::{AttnMapping, CompileError, CompileOptions, FcPolicy, Scheduling, Stage};
use crate::config::{Family, HardwareConfig, MemoryMode, ModelConfig};
use crate::isa::{
    CmdId, Command, CommandKind, DmaOp, DmaOperand, MuOp, MuOperand, OpClass, PimOp, PimOperand,
    Spad, SpadAddr, SyncOperand, Target, VuOp, VuOperand,
};
use crate::memmap::{tile_matrix, AllocationPlan, MatrixId, ParamKey, QkvPart, Region, ShardDims};
use crate::npu::vu_cycles;
use crate::pim::TimingCache;
use crate::Ps;

/// Command stream for one stage on one device.
#[derive(Debug, Clone, Serialize)]
pub struct Program {
    pub stage: Stage,
    pub tokens: u64,
    pub context: u64,
    pub cmds: Vec<Command>,
    pub decisions: Vec<FcDecision>,
    /// Share of PIM columns doing useful work in score macros, when attention runs on PIM.
    pub qkt_pim_utilization: Option<f64>,
}

impl Program {
    pub fn count_macros(&self) -> usize {
        self.cmds
            .iter()
            .filter(|c| matches!(c.kind, CommandKind::Pim(_)))
            .count()
    }

    pub fn decision(&self, kind: FcKind) -> Option<&FcDecision> {
        self.decisions.iter().find(|d| d.kind == kind)
    }
}

/// Ids each core must wait on before consuming a value.
type PerCore = Vec<Vec<CmdId>>;

struct Ring {
    readers: Vec<Option<CmdId>>,
    next: usize,
}

struct Builder<'a> {
    hw: &'a HardwareConfig,
    plan: &'a AllocationPlan,
    cores: u32,
    naive: bool,
    cmds: Vec<Command>,
    last_core: Vec<Option<CmdId>>,
    last_dev: Option<CmdId>,
    rings: Vec<Ring>,
    class: OpClass,
    block: u32,
}

impl<'a> Builder<'a> {
    fn push(&mut self, target: Target, kind: CommandKind, mut deps: Vec<CmdId>) -> CmdId {
        let id = self.cmds.len() as CmdId;
        if self.naive {
            match target {
                Target::Core(c) => deps.extend(self.last_core[c as usize]),
                Target::Device => {
                    deps.extend(self.last_core.iter().flatten());
                    deps.extend(self.last_dev);
                }
            }
        }
        deps.sort_unstable();
        deps.dedup();
        match target {
            Target::Core(c) => self.last_core[c as usize] = Some(id),
            Target::Device => {
                self.last_core.iter_mut().for_each(|l| *l = Some(id));
                self.last_dev = Some(id);
            }
        }
        self.cmds.push(Command {
            id,
            kind,
            target,
            deps,
            class: self.class,
            block: self.block,
            out_addr: None,
        });
        id
    }

    fn vu(&mut self, c: u32, op: VuOp, elems: u64, deps: Vec<CmdId>) -> CmdId {
        self.push(Target::Core(c), CommandKind::Vu(VuOperand { op, elems }), deps)
    }

    fn mu(&mut self, c: u32, op: MuOp, m: u64, k: u64, n: u64, deps: Vec<CmdId>) -> CmdId {
        let kind = CommandKind::Mu(MuOperand {
            op,
            m,
            k,
            n,
            weight: None,
        });
        self.push(Target::Core(c), kind, deps)
    }

    fn onchip(&mut self, c: u32, op: DmaOp, bytes: u64, deps: Vec<CmdId>) -> CmdId {
        let kind = CommandKind::Dma(DmaOperand {
            op,
            bytes,
            footprint: Default::default(),
            param: None,
        });
        self.push(Target::Core(c), kind, deps)
    }

    #[allow(clippy::too_many_arguments)]
    fn transfer(
        &mut self,
        c: u32,
        op: DmaOp,
        key: ParamKey,
        region: &Region,
        rows: Range<u64>,
        cols: Range<u64>,
        deps: Vec<CmdId>,
    ) -> CmdId {
        let fp = self.plan.footprint(region, rows.clone(), cols.clone(), self.hw);
        let bytes = (rows.end - rows.start) * (cols.end - cols.start) * HardwareConfig::DTYPE_BYTES;
        let kind = CommandKind::Dma(DmaOperand {
            op,
            bytes,
            footprint: fp,
            param: Some(key),
        });
        self.push(Target::Core(c), kind, deps)
    }

    fn sync(&mut self, bytes: u64, gather_bytes: u64, deps: &PerCore) -> PerCore {
        let class = self.class;
        self.class = OpClass::Sync;
        let all: Vec<CmdId> = deps.iter().flatten().copied().collect();
        let id = self.push(
            Target::Device,
            CommandKind::Sync(SyncOperand {
                bytes,
                gather_bytes,
            }),
            all,
        );
        self.class = class;
        vec![vec![id]; self.cores as usize]
    }

    fn placement_region(&self, key: ParamKey, pim: bool) -> Result<&'a Region, CompileError> {
        let p = self
            .plan
            .get(&key)
            .ok_or_else(|| crate::memmap::MemError::OutOfRange(format!("no placement for {key}")))?;
        Ok(if pim {
            p.pim.as_ref().ok_or_else(|| {
                crate::memmap::MemError::OutOfRange(format!("{key} has no PIM copy"))
            })?
        } else {
            p.npu_region()
        })
    }

    /// Streams a weight slice through the WM ring and multiplies chunk by chunk.
    fn mu_fc_core(
        &mut self,
        c: u32,
        key: ParamKey,
        rows: Range<u64>,
        k: u64,
        tokens: u64,
        input: &[CmdId],
    ) -> Result<Option<CmdId>, CompileError> {
        let region = self.placement_region(key, false)?;
        let total = rows.end - rows.start;
        if total == 0 || tokens == 0 {
            return Ok(None);
        }
        let cr = super::estimate::chunk_rows(self.hw, k, total);
        let mut last = None;
        let mut r = rows.start;
        while r < rows.end {
            let hi = (r + cr).min(rows.end);
            let ring = &mut self.rings[c as usize];
            let slot = ring.next;
            ring.next = (ring.next + 1) % ring.readers.len();
            let war: Vec<CmdId> = ring.readers[slot].into_iter().collect();
            let load = self.transfer(c, DmaOp::Load, key, region, r..hi, 0..k, war);
            let slot_bytes = self.hw.dma_chunk_bytes;
            self.cmds[load as usize].out_addr = Some(SpadAddr {
                mem: Spad::Wm,
                offset: slot as u64 * slot_bytes,
                bytes: (hi - r) * k * HardwareConfig::DTYPE_BYTES,
            });
            let mut deps = vec![load];
            deps.extend_from_slice(input);
            let kind = CommandKind::Mu(MuOperand {
                op: MuOp::Fc,
                m: tokens,
                k,
                n: hi - r,
                weight: Some(key),
            });
            let mu = self.push(Target::Core(c), kind, deps);
            self.rings[c as usize].readers[slot] = Some(mu);
            last = Some(mu);
            r = hi;
        }
        Ok(last)
    }

    #[allow(clippy::too_many_arguments)]
    fn macro_cmd(
        &mut self,
        op: PimOp,
        key: ParamKey,
        rows: u64,
        cols: u64,
        tokens: u64,
        gelu: bool,
        deps: Vec<CmdId>,
    ) -> Result<CmdId, CompileError> {
        let matrix = match self.placement_region(key, true)? {
            Region::Tiled(id) => *id,
            Region::Linear(_) => unreachable!("PIM copies are tiled"),
        };
        let kind = CommandKind::Pim(PimOperand {
            op,
            matrix,
            rows,
            cols,
            tokens,
            gelu,
        });
        Ok(self.push(Target::Device, kind, deps))
    }

    /// Column-split FC on every core, or one device-wide PIM macro.
    #[allow(clippy::too_many_arguments)]
    fn fc_layer(
        &mut self,
        key: ParamKey,
        rows: u64,
        k: u64,
        tokens: u64,
        pim: bool,
        gelu: bool,
        input: &PerCore,
    ) -> Result<PerCore, CompileError> {
        if pim {
            let deps: Vec<CmdId> = input.iter().flatten().copied().collect();
            let m = self.macro_cmd(PimOp::Fc, key, rows, k, tokens, gelu, deps)?;
            return Ok(vec![vec![m]; self.cores as usize]);
        }
        let per = rows.div_ceil(self.cores as u64);
        let mut out = Vec::with_capacity(self.cores as usize);
        for c in 0..self.cores {
            let lo = (c as u64 * per).min(rows);
            let hi = (lo + per).min(rows);
            let done = self.mu_fc_core(c, key, lo..hi, k, tokens, &input[c as usize])?;
            let mut ready: Vec<CmdId> = done.into_iter().collect();
            if gelu && hi > lo {
                let prev = self.class;
                self.class = OpClass::Ffn;
                ready = vec![self.vu(c, VuOp::Gelu, tokens * (hi - lo), ready)];
                self.class = prev;
            }
            if ready.is_empty() {
                ready = input[c as usize].clone();
            }
            out.push(ready);
        }
        Ok(out)
    }
}

struct Decisions {
    qkv: Choice,
    proj: Choice,
    ffn1: Choice,
    ffn2: Choice,
    head: Choice,
    list: Vec<FcDecision>,
}

fn pim_cycles(
    plan: &AllocationPlan,
    keys: &[ParamKey],
    hw: &HardwareConfig,
    cache: &mut TimingCache,
) -> Result<Option<u64>, CompileError> {
    let mut total = 0;
    for key in keys {
        let Some(p) = plan.get(key) else {
            return Ok(None);
        };
        let Some(Region::Tiled(id)) = &p.pim else {
            return Ok(None);
        };
        let tm = plan.tile_map(*id);
        total += cache.macro_timing(tm, tm.rows, tm.cols, false, hw)?.cycles;
    }
    Ok(Some(total))
}

/// PIM cycles per token of the layer's whole `rows x cols` weight configuration,
/// tiled as one matrix over the channels holding its first part.
fn pim_cycles_layer(
    plan: &AllocationPlan,
    keys: &[ParamKey],
    rows: u64,
    cols: u64,
    hw: &HardwareConfig,
    cache: &mut TimingCache,
) -> Result<Option<u64>, CompileError> {
    let mut channels = None;
    for key in keys {
        match plan.get(key).and_then(|p| p.pim.as_ref()) {
            Some(Region::Tiled(id)) => {
                channels.get_or_insert_with(|| plan.tile_map(*id).channels.clone());
            }
            _ => return Ok(None),
        }
    }
    let Some(channels) = channels else {
        return Ok(None);
    };
    let tm = tile_matrix(MatrixId(u32::MAX), "layer", rows, cols, hw, &channels, 0)?;
    Ok(Some(cache.macro_timing(&tm, rows, cols, false, hw)?.cycles))
}

fn decide_all(
    model: &ModelConfig,
    hw: &HardwareConfig,
    plan: &AllocationPlan,
    dims: &ShardDims,
    tokens: u64,
    opts: &CompileOptions,
    cache: &mut TimingCache,
) -> Result<Decisions, CompileError> {
    let e = model.embedding_dim;
    let c = hw.num_cores as u64;
    let cyc = |op, elems| hw.npu_cycles_to_ps(vu_cycles(hw, op, elems));
    let ln_ps: Ps = cyc(VuOp::LayerNorm, tokens * e);
    let qkv_keys: Vec<ParamKey> = [QkvPart::Q, QkvPart::K, QkvPart::V]
        .into_iter()
        .flat_map(|part| {
            (0..dims.head_groups as u32).map(move |g| ParamKey::Qkv {
                block: 0,
                part,
                group: g,
            })
        })
        .collect();
    let policy = |d: FcDecision| -> FcDecision {
        let choice = match (opts.fc_policy, d.pim_ps) {
            (FcPolicy::Adaptive, _) => d.choice,
            (FcPolicy::AllMu, _) | (FcPolicy::AllPim, None) => Choice::Mu,
            (FcPolicy::AllPim, Some(_)) => Choice::Pim,
        };
        FcDecision { choice, ..d }
    };
    let mut list = Vec::new();
    let qkv = policy(adaptive_map_fc(
        hw,
        FcKind::Qkv,
        tokens,
        e,
        3 * (dims.heads / c) * model.head_dim,
        pim_cycles_layer(plan, &qkv_keys, 3 * dims.heads * model.head_dim, e, hw, cache)?,
        ln_ps,
    ));
    list.push(qkv);
    let proj = policy(adaptive_map_fc(
        hw,
        FcKind::Proj,
        tokens,
        e,
        dims.proj_rows.div_ceil(c),
        pim_cycles(plan, &[ParamKey::Proj { block: 0 }], hw, cache)?,
        0,
    ));
    list.push(proj);
    let ffn1 = policy(adaptive_map_fc(
        hw,
        FcKind::Ffn1,
        tokens,
        e,
        dims.ffn1_rows.div_ceil(c),
        pim_cycles(plan, &[ParamKey::Ffn1 { block: 0 }], hw, cache)?,
        ln_ps,
    ));
    list.push(ffn1);
    let gelu_ps = if ffn1.choice == Choice::Mu {
        cyc(VuOp::Gelu, tokens * dims.ffn1_rows.div_ceil(c))
    } else {
        0
    };
    let ffn2 = policy(adaptive_map_fc(
        hw,
        FcKind::Ffn2,
        tokens,
        model.ffn_dim(),
        dims.ffn2_rows.div_ceil(c),
        pim_cycles(plan, &[ParamKey::Ffn2 { block: 0 }], hw, cache)?,
        gelu_ps,
    ));
    list.push(ffn2);
    let head = if model.family == Family::Gpt {
        let d = policy(adaptive_map_fc(
            hw,
            FcKind::Head,
            1,
            e,
            dims.head_rows.div_ceil(c),
            pim_cycles(plan, &[ParamKey::Head], hw, cache)?,
            cyc(VuOp::LayerNorm, e),
        ));
        list.push(d);
        d.choice
    } else {
        Choice::Mu
    };
    Ok(Decisions {
        qkv: qkv.choice,
        proj: proj.choice,
        ffn1: ffn1.choice,
        ffn2: ffn2.choice,
        head,
        list,
    })
}

fn has_pim(plan: &AllocationPlan, key: &ParamKey) -> bool {
    plan.get(key).is_some_and(|p| p.pim.is_some())
}

/// Lowers one stage of `model` into a device command stream.
pub fn build_commands(
    model: &ModelConfig,
    hw: &HardwareConfig,
    plan: &AllocationPlan,
    stage: Stage,
    opts: &CompileOptions,
    cache: &mut TimingCache,
) -> Result<Program, CompileError> {
    let cores = hw.num_cores;
    let c64 = cores as u64;
    let d_dev = opts.devices.max(1) as u64;
    let dims = ShardDims::new(model, hw, opts.devices.max(1));
    if !model.num_heads.is_multiple_of(d_dev) || !dims.heads.is_multiple_of(c64) {
        return Err(CompileError::HeadsNotDivisible {
            heads: model.num_heads / d_dev,
            cores: c64,
        });
    }
    let (tokens, context) = match stage {
        Stage::Summarization => (model.input_tokens, model.input_tokens),
        Stage::Generation { context } => {
            if model.family == Family::Bert {
                return Err(CompileError::NoGeneration(model.name.clone()));
            }
            if context > model.max_context() {
                return Err(CompileError::ContextTooLong {
                    context,
                    max: model.max_context(),
                });
            }
            (1, context)
        }
    };
    let e = model.embedding_dim;
    let hd = model.head_dim;
    let is_gpt = model.family == Family::Gpt;
    let gen = matches!(stage, Stage::Generation { .. });
    let pim_attn = gen && opts.attention == AttnMapping::PimQkt && hw.memory_mode != MemoryMode::Plain;
    let db = HardwareConfig::DTYPE_BYTES;

    // scratchpad residency
    let am_need = tokens * e * db * 3 + tokens * dims.ffn1_rows.div_ceil(c64) * db + tokens * context * db;
    if am_need > hw.am_capacity {
        return Err(CompileError::Scratchpad {
            what: format!("{} tokens of activations", tokens),
            mem: "AM",
            needed: am_need,
            available: hw.am_capacity,
        });
    }
    let slots = ((hw.wm_capacity / 2) / hw.dma_chunk_bytes).max(2) as usize;
    let wm_need = 4 * context * hd * db + slots as u64 * hw.dma_chunk_bytes;
    if wm_need > hw.wm_capacity {
        return Err(CompileError::Scratchpad {
            what: format!("keys and values of {context} tokens"),
            mem: "WM",
            needed: wm_need,
            available: hw.wm_capacity,
        });
    }

    let dec = decide_all(model, hw, plan, &dims, tokens, opts, cache)?;
    let mut b = Builder {
        hw,
        plan,
        cores,
        naive: opts.scheduling == Scheduling::Naive,
        cmds: Vec::new(),
        last_core: vec![None; cores as usize],
        last_dev: None,
        rings: (0..cores)
            .map(|_| Ring {
                readers: vec![None; slots],
                next: 0,
            })
            .collect(),
        class: OpClass::Embedding,
        block: 0,
    };
    let gather = |bytes: u64| if d_dev > 1 { bytes } else { 0 };

    // token embedding
    let table = if is_gpt { ParamKey::Head } else { ParamKey::Embedding };
    let table_region = b.placement_region(table, false)?;
    let mut x: PerCore = Vec::new();
    for c in 0..cores {
        let ld = b.transfer(c, DmaOp::Load, table, table_region, 0..tokens, 0..e, vec![]);
        x.push(vec![b.vu(c, VuOp::Embed, tokens * e, vec![ld])]);
    }

    let mut qkt_util = None;
    for blk in 0..model.num_blocks as u32 {
        b.block = blk;
        b.class = OpClass::LayerNorm;
        let ln1: PerCore = (0..cores)
            .map(|c| vec![b.vu(c, VuOp::LayerNorm, tokens * e, x[c as usize].clone())])
            .collect();

        let qkv_pim = dec.qkv == Choice::Pim
            && (0..dims.head_groups as u32).all(|g| {
                [QkvPart::Q, QkvPart::K, QkvPart::V].iter().all(|&part| {
                    has_pim(plan, &ParamKey::Qkv { block: blk, part, group: g })
                })
            });

        let mut heads_done: PerCore = vec![Vec::new(); cores as usize];
        let mut pre: PerCore = vec![Vec::new(); cores as usize];
        for g in 0..dims.head_groups as u32 {
            let group_rows = dims.heads_in_group(g as u64) * hd;
            // Q/K/V generation for head group g, one head per core
            let gen_part = |b: &mut Builder, part: QkvPart, extra: &PerCore| -> Result<PerCore, CompileError> {
                let key = ParamKey::Qkv { block: blk, part, group: g };
                b.class = OpClass::FcQkv;
                let mut out = Vec::new();
                if qkv_pim {
                    let mut deps: Vec<CmdId> = ln1.iter().flatten().copied().collect();
                    deps.extend(extra.iter().flatten());
                    let m = b.macro_cmd(PimOp::Fc, key, group_rows, e, tokens, false, deps)?;
                    out = vec![vec![m]; cores as usize];
                } else {
                    for c in 0..cores {
                        let lo = c as u64 * hd;
                        let done = b.mu_fc_core(c, key, lo..lo + hd, e, tokens, &ln1[c as usize])?;
                        out.push(done.into_iter().collect());
                    }
                }
                b.class = OpClass::SelfAttention;
                Ok(out)
            };
            let head_of = |c: u32| g * cores + c;
            let none: PerCore = vec![Vec::new(); cores as usize];

            if !gen {
                // summarization: K first so its transpose overlaps V and Q generation
                let k = gen_part(&mut b, QkvPart::K, &none)?;
                let v = gen_part(&mut b, QkvPart::V, &none)?;
                let q = gen_part(&mut b, QkvPart::Q, &none)?;
                for c in 0..cores {
                    let ci = c as usize;
                    let h = head_of(c);
                    let mask = if is_gpt {
                        let r = b.placement_region(ParamKey::Mask, false)?;
                        vec![b.transfer(
                            c,
                            DmaOp::Load,
                            ParamKey::Mask,
                            r,
                            0..tokens,
                            0..context.div_ceil(16),
                            vec![],
                        )]
                    } else {
                        vec![]
                    };
                    let tk = b.onchip(c, DmaOp::Transpose, tokens * hd * db, k[ci].clone());
                    let mv = b.onchip(c, DmaOp::Move, tokens * hd * db, v[ci].clone());
                    let mut qd = q[ci].clone();
                    qd.push(tk);
                    let qkt = b.mu(c, MuOp::QkT, tokens, hd, tokens, qd);
                    let mut sd = vec![qkt];
                    sd.extend(mask);
                    let sm = b.vu(c, VuOp::Softmax, tokens * tokens, sd);
                    if is_gpt {
                        let kk = ParamKey::KCache { block: blk, head: h };
                        let vk = ParamKey::VCache { block: blk, head: h };
                        let (kr, vr) = (b.placement_region(kk, pim_cache(plan, &kk))?, b.placement_region(vk, pim_cache(plan, &vk))?);
                        b.transfer(c, DmaOp::Store, kk, kr, 0..tokens, 0..hd, k[ci].clone());
                        let (rows, cols) = cache_window(plan, &vk, 0..tokens, hd);
                        b.transfer(c, DmaOp::Store, vk, vr, rows, cols, v[ci].clone());
                    }
                    let sv = b.mu(c, MuOp::Sv, tokens, tokens, hd, vec![sm, mv]);
                    heads_done[ci] = vec![sv];
                }
            } else if !pim_attn {
                // generation with score/context products on the matrix unit
                b.class = OpClass::SelfAttention;
                if g == 0 {
                    pre = prefetch_cache(&mut b, blk, 0, context)?;
                }
                // with unified memory the loads must drain before PIM takes the channels
                let k = if hw.memory_mode == MemoryMode::Unified {
                    gen_part(&mut b, QkvPart::K, &pre)?
                } else {
                    gen_part(&mut b, QkvPart::K, &none)?
                };
                let mut kdeps = pre.clone();
                let mut tks: PerCore = Vec::new();
                for c in 0..cores {
                    let ci = c as usize;
                    let kk = ParamKey::KCache { block: blk, head: head_of(c) };
                    let kr = b.placement_region(kk, false)?;
                    b.transfer(c, DmaOp::Store, kk, kr, context - 1..context, 0..hd, k[ci].clone());
                    // key concatenation in the VU, overlapping query generation
                    kdeps[ci].extend(&k[ci]);
                    let cat = b.vu(c, VuOp::Concat, context * hd, kdeps[ci].clone());
                    tks.push(vec![b.onchip(c, DmaOp::Transpose, context * hd * db, vec![cat])]);
                }
                let q = gen_part(&mut b, QkvPart::Q, &none)?;
                let mut qkt: PerCore = Vec::new();
                for c in 0..cores {
                    let ci = c as usize;
                    let mut d = q[ci].clone();
                    d.extend(&tks[ci]);
                    qkt.push(vec![b.mu(c, MuOp::QkT, 1, hd, context, d)]);
                }
                let v = gen_part(&mut b, QkvPart::V, &none)?;
                let mut vcat: PerCore = Vec::new();
                let mut sm: Vec<CmdId> = Vec::new();
                for c in 0..cores {
                    let ci = c as usize;
                    let vk = ParamKey::VCache { block: blk, head: head_of(c) };
                    let vr = b.placement_region(vk, false)?;
                    sm.push(b.vu(c, VuOp::Softmax, context, qkt[ci].clone()));
                    let (rows, cols) = cache_window(plan, &vk, context - 1..context, hd);
                    b.transfer(c, DmaOp::Store, vk, vr, rows, cols, v[ci].clone());
                    let mut d = v[ci].clone();
                    d.extend(&pre[ci]);
                    vcat.push(vec![b.onchip(c, DmaOp::Move, hd * db, d)]);
                }
                // the next head group's cached keys and values stream in during SV
                if g + 1 < dims.head_groups as u32 {
                    pre = prefetch_cache(&mut b, blk, g + 1, context)?;
                }
                for c in 0..cores {
                    let ci = c as usize;
                    let mut d = vcat[ci].clone();
                    d.push(sm[ci]);
                    heads_done[ci] = vec![b.mu(c, MuOp::Sv, 1, context, hd, d)];
                }
            } else {
                // generation with score/context products as PIM macros over the caches
                let k = gen_part(&mut b, QkvPart::K, &none)?;
                let q = gen_part(&mut b, QkvPart::Q, &none)?;
                let mut qkt: PerCore = Vec::new();
                let mut stores = Vec::new();
                for c in 0..cores {
                    let kk = ParamKey::KCache { block: blk, head: head_of(c) };
                    let kr = b.placement_region(kk, true)?;
                    stores.push(b.transfer(c, DmaOp::Store, kk, kr, context - 1..context, 0..hd, k[c as usize].clone()));
                }
                for c in 0..cores {
                    let ci = c as usize;
                    let kk = ParamKey::KCache { block: blk, head: head_of(c) };
                    let mut d = q[ci].clone();
                    d.push(stores[ci]);
                    let m = b.macro_cmd(PimOp::QkT, kk, context, hd, 1, false, d)?;
                    if qkt_util.is_none() {
                        if let Ok(Region::Tiled(id)) = b.placement_region(kk, true) {
                            let tm = plan.tile_map(*id);
                            qkt_util = Some(hd as f64 / (tm.grid().1 * tm.cols_per_tile) as f64);
                        }
                    }
                    qkt.push(vec![m]);
                }
                let sm: Vec<CmdId> = (0..cores)
                    .map(|c| b.vu(c, VuOp::Softmax, context, qkt[c as usize].clone()))
                    .collect();
                let v = gen_part(&mut b, QkvPart::V, &none)?;
                let mut vst = Vec::new();
                for c in 0..cores {
                    let vk = ParamKey::VCache { block: blk, head: head_of(c) };
                    let vr = b.placement_region(vk, true)?;
                    vst.push(b.transfer(c, DmaOp::Store, vk, vr, 0..hd, context - 1..context, v[c as usize].clone()));
                }
                for c in 0..cores {
                    let ci = c as usize;
                    let vk = ParamKey::VCache { block: blk, head: head_of(c) };
                    let m = b.macro_cmd(PimOp::Sv, vk, hd, context, 1, false, vec![sm[ci], vst[ci]])?;
                    heads_done[ci] = vec![m];
                }
            }
        }

        b.class = OpClass::SelfAttention;
        let attn = b.sync(tokens * e * db, gather(tokens * (e / d_dev) * db), &heads_done);

        b.class = OpClass::FcProj;
        let proj_pim = dec.proj == Choice::Pim && has_pim(plan, &ParamKey::Proj { block: blk });
        let proj = b.fc_layer(ParamKey::Proj { block: blk }, dims.proj_rows, e, tokens, proj_pim, false, &attn)?;
        b.class = OpClass::Residual;
        let slice = dims.proj_rows.div_ceil(c64);
        let res1: PerCore = (0..cores)
            .map(|c| vec![b.vu(c, VuOp::Residual, tokens * slice, proj[c as usize].clone())])
            .collect();
        let x1 = b.sync(tokens * dims.proj_rows * db, gather(tokens * dims.proj_rows * db), &res1);

        b.class = OpClass::LayerNorm;
        let ln2: PerCore = (0..cores)
            .map(|c| vec![b.vu(c, VuOp::LayerNorm, tokens * e, x1[c as usize].clone())])
            .collect();
        b.class = OpClass::Ffn;
        let f1_pim = dec.ffn1 == Choice::Pim && has_pim(plan, &ParamKey::Ffn1 { block: blk });
        let f1 = b.fc_layer(ParamKey::Ffn1 { block: blk }, dims.ffn1_rows, e, tokens, f1_pim, true, &ln2)?;
        let h1 = b.sync(tokens * dims.ffn1_rows * db, gather(tokens * dims.ffn1_rows * db), &f1);
        let f2_pim = dec.ffn2 == Choice::Pim && has_pim(plan, &ParamKey::Ffn2 { block: blk });
        let f2 = b.fc_layer(ParamKey::Ffn2 { block: blk }, dims.ffn2_rows, model.ffn_dim(), tokens, f2_pim, false, &h1)?;
        b.class = OpClass::Residual;
        let slice = dims.ffn2_rows.div_ceil(c64);
        let res2: PerCore = (0..cores)
            .map(|c| vec![b.vu(c, VuOp::Residual, tokens * slice, f2[c as usize].clone())])
            .collect();
        x = b.sync(tokens * dims.ffn2_rows * db, gather(tokens * dims.ffn2_rows * db), &res2);
    }

    b.block = model.num_blocks as u32;
    b.class = OpClass::LmHead;
    if is_gpt {
        let lnf: PerCore = (0..cores)
            .map(|c| vec![b.vu(c, VuOp::LayerNorm, e, x[c as usize].clone())])
            .collect();
        let head_pim = dec.head == Choice::Pim && has_pim(plan, &ParamKey::Head);
        let logits = b.fc_layer(ParamKey::Head, dims.head_rows, e, 1, head_pim, false, &lnf)?;
        b.sync(dims.head_rows * db, gather(dims.head_rows * db), &logits);
    } else {
        let r = b.placement_region(ParamKey::Head, false)?;
        let ld = b.transfer(0, DmaOp::Load, ParamKey::Head, r, 0..dims.head_rows.min(2), 0..e, vec![]);
        let mut d = x[0].clone();
        d.push(ld);
        b.mu(0, MuOp::Fc, tokens, e, 2, d);
    }

    Ok(Program {
        stage,
        tokens,
        context,
        cmds: b.cmds,
        decisions: dec.list,
        qkt_pim_utilization: qkt_util,
    })
}

/// Loads the cached keys and values of tokens before the current one for head
/// group `g`, one pair of transfers per core.
fn prefetch_cache(b: &mut Builder, blk: u32, g: u32, context: u64) -> Result<PerCore, CompileError> {
    let cores = b.cores;
    let hd = b.plan.get(&ParamKey::KCache { block: blk, head: 0 }).map_or(0, |p| p.cols);
    let mut out = Vec::with_capacity(cores as usize);
    for c in 0..cores {
        let head = g * cores + c;
        let mut ids = Vec::new();
        if context > 1 {
            for key in [ParamKey::KCache { block: blk, head }, ParamKey::VCache { block: blk, head }] {
                let r = b.placement_region(key, false)?;
                ids.push(b.transfer(c, DmaOp::Load, key, r, 0..context - 1, 0..hd, vec![]));
            }
        }
        out.push(ids);
    }
    Ok(out)
}

fn pim_cache(plan: &AllocationPlan, key: &ParamKey) -> bool {
    plan.get(key).is_some_and(|p| p.npu.is_none() && p.pim.is_some())
}

/// Rows/cols of a cache region holding `tokens`; transposed V caches index tokens by column.
fn cache_window(plan: &AllocationPlan, key: &ParamKey, tokens: Range<u64>, hd: u64) -> (Range<u64>, Range<u64>) {
    match (key, pim_cache(plan, key)) {
        (ParamKey::VCache { .. }, true) => (0..hd, tokens),
        _ => (tokens, 0..hd),
    }
}
