use std::collections::HashMap;

use ianus::compiler::{emit_plan, AttnMapping, CompileError, CompileOptions, Stage};
use ianus::config::{HardwareConfig, MemoryMode, ModelConfig};
use ianus::engine::{compile_stage, EngineError, RunOptions};
use ianus::isa::{topo_validate, CommandKind, MuOp, Target, Unit};
use ianus::memmap::ShardDims;

fn model(name: &str, i: u64, o: u64) -> ModelConfig {
    ModelConfig::preset(name).unwrap().with_tokens(i, o)
}

fn opts(attention: AttnMapping) -> RunOptions {
    RunOptions {
        compile: CompileOptions {
            attention,
            ..CompileOptions::default()
        },
        ..RunOptions::default()
    }
}

fn stages(m: &ModelConfig) -> [Stage; 2] {
    [Stage::Summarization, Stage::Generation { context: m.max_context() }]
}

#[test]
fn four_syncs_per_decoder_block() {
    let m = model("gpt2-m", 32, 4);
    let hw = HardwareConfig::default();
    for stage in stages(&m) {
        for att in [AttnMapping::MuQkt, AttnMapping::PimQkt] {
            let (p, _) = compile_stage(&m, &hw, &opts(att), stage).unwrap();
            let mut per_block: HashMap<u32, usize> = HashMap::new();
            for c in &p.cmds {
                if matches!(c.kind, CommandKind::Sync(_)) {
                    *per_block.entry(c.block).or_default() += 1;
                }
            }
            for b in 0..m.num_blocks as u32 {
                assert_eq!(per_block.get(&b), Some(&4), "block {b} {stage:?} {att:?}");
            }
        }
    }
}

#[test]
fn bert_has_no_pim_macros() {
    let hw = HardwareConfig::default();
    for name in ["bert-b", "bert-l"] {
        let m = model(name, 128, 1);
        let (p, _) = compile_stage(&m, &hw, &RunOptions::default(), Stage::Summarization).unwrap();
        assert_eq!(p.count_macros(), 0, "{name}");
        assert!(p.cmds.iter().any(|c| c.unit() == Unit::Mu));
    }
}

#[test]
fn xl_runs_six_heads_per_core() {
    let m = model("gpt2-xl", 16, 2);
    let hw = HardwareConfig::default();
    assert_eq!(ShardDims::new(&m, &hw, 1).heads / hw.num_cores as u64, 6);
    let (p, _) = compile_stage(&m, &hw, &RunOptions::default(), Stage::Generation { context: 17 }).unwrap();
    let mut qkt: HashMap<u32, usize> = HashMap::new();
    for c in p.cmds.iter().filter(|c| c.block == 0) {
        if let (CommandKind::Mu(mu), Target::Core(k)) = (&c.kind, c.target) {
            if mu.op == MuOp::QkT {
                *qkt.entry(k).or_default() += 1;
            }
        }
    }
    assert_eq!(qkt.len(), 4);
    assert!(qkt.values().all(|&n| n == 6), "{qkt:?}");
}

#[test]
fn indivisible_heads_are_rejected() {
    let mut m = model("gpt2-xl", 16, 2);
    m.num_heads = 25;
    m.head_dim = 64;
    m.embedding_dim = 1600;
    let hw = HardwareConfig::default();
    let e = compile_stage(&m, &hw, &RunOptions::default(), Stage::Summarization).unwrap_err();
    assert!(
        matches!(e, EngineError::Compile(CompileError::HeadsNotDivisible { .. })),
        "{e}"
    );
    assert!(e.to_string().contains("multiple of the core count"));
}

#[test]
fn streams_are_acyclic_and_macros_wait_for_inputs() {
    let hw = HardwareConfig::default();
    for name in ["gpt2-m", "gpt2-l"] {
        let m = model(name, 24, 4);
        for stage in stages(&m) {
            for att in [AttnMapping::MuQkt, AttnMapping::PimQkt] {
                let (p, _) = compile_stage(&m, &hw, &opts(att), stage).unwrap();
                topo_validate(&p.cmds).unwrap();
                let by_id: HashMap<_, _> = p.cmds.iter().map(|c| (c.id, c)).collect();
                for c in &p.cmds {
                    if let CommandKind::Pim(_) = c.kind {
                        let producer = c.deps.iter().any(|d| {
                            matches!(by_id[d].unit(), Unit::Vu | Unit::Dma | Unit::Noc | Unit::Pcu)
                        });
                        assert!(producer, "{name} {stage:?}: macro {} has no input producer", c.id);
                    }
                }
            }
        }
    }
}

#[test]
fn plain_mode_emits_no_macros() {
    let hw = HardwareConfig {
        memory_mode: MemoryMode::Plain,
        ..HardwareConfig::default()
    };
    let m = model("gpt2-m", 16, 4);
    for stage in stages(&m) {
        let (p, _) = compile_stage(&m, &hw, &RunOptions::default(), stage).unwrap();
        assert_eq!(p.count_macros(), 0);
    }
}

#[test]
fn generation_maps_fcs_to_pim() {
    let hw = HardwareConfig::default();
    let m = model("gpt2-m", 16, 4);
    let (p, _) = compile_stage(&m, &hw, &RunOptions::default(), Stage::Generation { context: 17 }).unwrap();
    let gelu = p.cmds.iter().any(|c| matches!(&c.kind, CommandKind::Pim(x) if x.gelu));
    assert!(gelu, "FFN1 should run as a fused FC+GELU macro");
}

#[test]
fn qkt_pim_efficiency_at_head_dim_64() {
    let hw = HardwareConfig::default();
    let m = model("gpt2-m", 16, 4);
    let (p, _) = compile_stage(&m, &hw, &opts(AttnMapping::PimQkt), Stage::Generation { context: 17 }).unwrap();
    assert_eq!(p.qkt_pim_utilization, Some(0.0625));
}

#[test]
fn emitted_plan_is_stable() {
    let hw = HardwareConfig::default();
    let mut m = model("gpt2-m", 4, 2);
    m.num_blocks = 1;
    let run = || {
        let (p, _) = compile_stage(&m, &hw, &RunOptions::default(), Stage::Generation { context: 5 }).unwrap();
        emit_plan(&p)
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.lines().count(), {
        let (p, _) = compile_stage(&m, &hw, &RunOptions::default(), Stage::Generation { context: 5 }).unwrap();
        p.cmds.len()
    });
    let first = a.lines().next().unwrap();
    assert!(first.starts_with("0 "), "{first}");
}
