use ianus::compiler::{AttnMapping, CompileOptions, Scheduling, Stage};
use ianus::config::{HardwareConfig, MemoryMode, ModelConfig};
use ianus::engine::{run, run_multi_device, run_stage, EngineError, RunOptions};
use ianus::isa::{expand_macro, TraceKind};
use ianus::memmap::{tile_weight_matrix, MemError};
use ianus::pim::{simulate_macro, validate_trace};

fn small(name: &str, blocks: u64, i: u64, o: u64) -> ModelConfig {
    let mut m = ModelConfig::preset(name).unwrap().with_tokens(i, o);
    m.num_blocks = blocks;
    m
}

fn hw(mode: MemoryMode) -> HardwareConfig {
    HardwareConfig {
        memory_mode: mode,
        ..HardwareConfig::default()
    }
}

fn with(attention: AttnMapping, scheduling: Scheduling) -> RunOptions {
    RunOptions {
        compile: CompileOptions {
            attention,
            scheduling,
            ..CompileOptions::default()
        },
        ..RunOptions::default()
    }
}

#[test]
fn unified_mode_never_overlaps_dma_with_macros() {
    let m = small("gpt2-m", 2, 16, 8);
    let opts = RunOptions::default();
    let uni = run(&m, &hw(MemoryMode::Unified), &opts).unwrap();
    let part = run(&m, &hw(MemoryMode::Partitioned), &opts).unwrap();
    assert!(uni.counters.pim_macros > 0.0);
    assert_eq!(uni.dma_macro_overlap_ns, 0.0);
    assert!(part.dma_macro_overlap_ns > 0.0);
}

#[test]
fn interval_differential_on_one_step() {
    let m = small("gpt2-m", 2, 16, 8);
    let stage = Stage::Generation { context: 20 };
    let u = run_stage(&m, &hw(MemoryMode::Unified), &RunOptions::default(), stage).unwrap();
    for &(a, b) in &u.dma_intervals {
        for &(c, d) in &u.macro_intervals {
            assert!(b <= c || d <= a, "dma [{a},{b}) overlaps macro [{c},{d})");
        }
    }
    let p = run_stage(&m, &hw(MemoryMode::Partitioned), &RunOptions::default(), stage).unwrap();
    let overl = p
        .dma_intervals
        .iter()
        .any(|&(a, b)| p.macro_intervals.iter().any(|&(c, d)| a < d && c < b));
    assert!(overl);
}

#[test]
fn traces_obey_dram_timing() {
    let m = small("gpt2-m", 1, 8, 2);
    for mode in [MemoryMode::Unified, MemoryMode::Partitioned, MemoryMode::Plain] {
        for stage in [Stage::Summarization, Stage::Generation { context: 9 }] {
            for att in [AttnMapping::MuQkt, AttnMapping::PimQkt] {
                let h = hw(mode);
                let r = run_stage(&m, &h, &with(att, Scheduling::Aware), stage).unwrap();
                assert!(!r.trace.is_empty());
                let v = validate_trace(&r.trace, &h);
                assert!(v.is_empty(), "{mode} {stage:?} {att:?}: {:?}", &v[..v.len().min(5)]);
            }
        }
    }
}

#[test]
fn bert_mu_macs_match_analytic_flops() {
    let m = ModelConfig::preset("bert-b").unwrap().with_tokens(128, 1);
    let r = run(&m, &HardwareConfig::default(), &RunOptions::default()).unwrap();
    let (n, e, l) = (m.input_tokens as f64, m.embedding_dim as f64, m.num_blocks as f64);
    // per block: QKV, projection and FFN weights (12 e^2 per token) plus two n x n attention products
    let flops = 2.0 * (l * (12.0 * n * e * e + 2.0 * n * n * e) + n * e * 2.0);
    assert_eq!(r.events.mu_macs, flops / 2.0);
    assert_eq!(r.counters.pim_macros, 0.0);
    assert_eq!(r.energy.pim_ops, 0.0);
}

#[test]
fn pim_mac_stream_reaches_chip_peak() {
    let h = HardwareConfig::default();
    let tm = tile_weight_matrix(4096, 4096, &h).unwrap();
    let prog = expand_macro(&tm, 4096, 4096, false).unwrap();
    let mut tr = Vec::new();
    simulate_macro(&prog, &h, Some(&mut tr));
    let c = h.timing.cycles();
    let tck = h.timing.tck_ps() as f64 * 1e-12;
    let mut macs = 0u64;
    let mut busy = 0u64;
    for ch in 0..h.num_channels {
        let mut t: Vec<u64> = tr
            .iter()
            .filter(|r| r.channel == ch && r.kind == TraceKind::MacAll)
            .map(|r| r.cycle)
            .collect();
        t.sort_unstable();
        let mut k = 0;
        while k < t.len() {
            let mut j = k;
            while j + 1 < t.len() && t[j + 1] - t[j] <= c.mac.max(c.ccd_l) {
                j += 1;
            }
            busy += t[j] - t[k] + c.mac;
            macs += (j - k + 1) as u64;
            k = j + 1;
        }
    }
    let flops_per_burst = (h.banks_per_channel as u64 * h.elems_per_column() * 2) as f64;
    let per_channel = macs as f64 * flops_per_burst / (busy as f64 * tck);
    let per_chip = per_channel * h.channels_per_chip as f64;
    let peak = h.derive_peaks().pim_flops_per_chip;
    assert!((per_chip - peak).abs() / peak <= 0.10, "{per_chip} vs {peak}");
    assert!((peak - 1.024e12).abs() < 1e6);
}

#[test]
fn mu_attention_occupies_pim_less_per_head() {
    let m = small("gpt2-m", 1, 60, 8);
    let stage = Stage::Generation { context: 64 };
    let h = hw(MemoryMode::Unified);
    let mu = run_stage(&m, &h, &with(AttnMapping::MuQkt, Scheduling::Aware), stage).unwrap();
    let pim = run_stage(&m, &h, &with(AttnMapping::PimQkt, Scheduling::Naive), stage).unwrap();
    let heads = m.num_heads as f64;
    let a = mu.stats.pim_active_ps / heads;
    let b = pim.stats.pim_active_ps / heads;
    assert!(a < b, "{a} vs {b}");
}

#[test]
fn one_device_matches_plain_run() {
    let m = small("gpt2-m", 2, 16, 4);
    let h = HardwareConfig::default();
    let opts = RunOptions::default();
    let a = run(&m, &h, &opts).unwrap();
    let b = run_multi_device(&m, &h, 1, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn runs_are_deterministic() {
    let m = small("gpt2-l", 2, 24, 6);
    let h = hw(MemoryMode::Partitioned);
    let opts = RunOptions::default();
    let a = serde_json::to_string(&run(&m, &h, &opts).unwrap()).unwrap();
    let b = serde_json::to_string(&run(&m, &h, &opts).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn large_model_needs_more_devices() {
    let m = ModelConfig::preset("gpt-6.7b").unwrap().with_tokens(8, 2);
    let h = HardwareConfig::default();
    let e = run(&m, &h, &RunOptions::default()).unwrap_err();
    assert!(matches!(e, EngineError::Mem(MemError::ModelTooLarge { .. })), "{e}");
    let mut two = RunOptions::default();
    two.compile.devices = 2;
    two.gen_samples = Some(2);
    let r = run(&m, &h, &two).unwrap();
    assert_eq!(r.devices, 2);
    assert!(r.counters.pcie_bytes > 0.0);
}

#[test]
fn context_beyond_plan_is_rejected() {
    let m = small("gpt2-m", 1, 16, 2);
    let e = run_stage(&m, &HardwareConfig::default(), &RunOptions::default(), Stage::Generation { context: 64 })
        .unwrap_err();
    assert!(matches!(e, EngineError::Compile(_)), "{e}");
}

#[test]
fn single_output_token_has_no_generation() {
    let m = small("gpt2-m", 2, 16, 1);
    let r = run(&m, &HardwareConfig::default(), &RunOptions::default()).unwrap();
    assert_eq!(r.generation_steps, 0);
    assert_eq!(r.generation_ns, 0.0);
    assert!(r.summarization_ns > 0.0);
}

#[test]
fn sampled_generation_tracks_exact() {
    let m = small("gpt2-m", 2, 32, 40);
    let h = HardwareConfig::default();
    let exact = run(
        &m,
        &h,
        &RunOptions {
            gen_samples: None,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let sampled = run(&m, &h, &RunOptions::default()).unwrap();
    let err = (sampled.generation_ns - exact.generation_ns).abs() / exact.generation_ns;
    assert!(err < 0.01, "{err}");
}

#[test]
fn energy_components_are_nonnegative() {
    let m = small("gpt2-m", 2, 16, 4);
    for mode in [MemoryMode::Unified, MemoryMode::Partitioned, MemoryMode::Plain] {
        let r = run(&m, &hw(mode), &RunOptions::default()).unwrap();
        assert!(r.energy.core_compute > 0.0);
        assert!(r.energy.normal_mem > 0.0);
        assert!(r.energy.pim_ops >= 0.0);
        let sum: f64 = r.breakdown_ns.values().sum();
        assert!((sum - r.total_ns).abs() <= 1e-6 * r.total_ns, "{sum} vs {}", r.total_ns);
    }
}
