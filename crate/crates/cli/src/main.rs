use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ianus::compiler::{emit_plan, AttnMapping, CompileOptions, FcPolicy, Scheduling, Stage};
use ianus::config::{load_hardware, load_model, HardwareConfig, MemoryMode, ModelConfig};
use ianus::engine::{compile_stage, run, run_stage, RunOptions, SimReport};
use ianus::memmap::allocation_csv;
use ianus::pim::{format_trace, parse_trace, validate_trace};
use ianus::scenario::{
    parse_list, parse_token_pairs, run_scenario, Expectations, ScenarioParams, SCENARIOS,
};

#[derive(Parser)]
#[command(name = "ianus", version, about = "NPU-PIM unified-memory performance and energy simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lower a model into a command stream and summarize it.
    Compile {
        #[command(flatten)]
        target: Target,
        /// Print the full command list.
        #[arg(long)]
        emit_plan: bool,
        /// Compile a generation step at this context length instead of summarization.
        #[arg(long)]
        gen_context: Option<u64>,
    },
    /// Simulate summarization and generation end to end.
    Simulate {
        #[command(flatten)]
        target: Target,
        /// Simulate every generation step instead of sampling.
        #[arg(long)]
        exact: bool,
        /// Write the summarization-stage DRAM command trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a named experiment grid and write CSV and JSON results.
    Run(RunArgs),
    /// Check a DRAM command trace against the timing rules.
    ValidateTrace {
        file: PathBuf,
        #[arg(long)]
        hw: Option<PathBuf>,
    },
    /// Print the memory allocation plan as CSV.
    DumpAllocation {
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Mu,
    Pim,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sched {
    Aware,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fc {
    Adaptive,
    Mu,
    Pim,
}

#[derive(Args)]
struct Target {
    /// Model preset name or TOML file.
    #[arg(long, default_value = "gpt2-m")]
    model: String,
    /// Hardware TOML file; defaults to the built-in configuration.
    #[arg(long)]
    hw: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    in_tokens: u64,
    #[arg(long, default_value_t = 8)]
    out_tokens: u64,
    /// unified, partitioned or plain.
    #[arg(long)]
    mode: Option<MemoryMode>,
    #[arg(long, value_enum, default_value = "mu")]
    attention: Attention,
    #[arg(long, value_enum, default_value = "aware")]
    scheduling: Sched,
    #[arg(long, value_enum, default_value = "adaptive")]
    fc: Fc,
    #[arg(long, default_value_t = 1)]
    devices: u32,
    #[arg(long)]
    cores: Option<u32>,
    #[arg(long)]
    pim_chips: Option<u32>,
    /// Place the model even when it exceeds device capacity.
    #[arg(long)]
    ignore_capacity: bool,
}

impl Target {
    fn resolve(&self) -> Result<(ModelConfig, HardwareConfig, RunOptions)> {
        let mut hw = hardware(self.hw.as_deref())?;
        if let Some(m) = self.mode {
            hw.memory_mode = m;
        }
        if let Some(c) = self.cores {
            hw.num_cores = c;
        }
        if let Some(k) = self.pim_chips {
            hw.pim_chips = k;
        }
        hw.validate()?;
        let model = load_model(&self.model)?.with_tokens(self.in_tokens, self.out_tokens);
        let compile = CompileOptions {
            attention: match self.attention {
                Attention::Mu => AttnMapping::MuQkt,
                Attention::Pim => AttnMapping::PimQkt,
            },
            scheduling: match self.scheduling {
                Sched::Aware => Scheduling::Aware,
                Sched::Naive => Scheduling::Naive,
            },
            fc_policy: match self.fc {
                Fc::Adaptive => FcPolicy::Adaptive,
                Fc::Mu => FcPolicy::AllMu,
                Fc::Pim => FcPolicy::AllPim,
            },
            devices: self.devices,
        };
        let opts = RunOptions {
            compile,
            ignore_capacity: self.ignore_capacity,
            ..RunOptions::default()
        };
        Ok((model, hw, opts))
    }
}

#[derive(Args)]
struct RunArgs {
    scenario: String,
    /// Comma-separated model presets.
    #[arg(long, alias = "model")]
    models: Option<String>,
    /// `IN:OUT` pairs, or plain token counts for adaptive-map.
    #[arg(long)]
    tokens: Option<String>,
    #[arg(long)]
    cores: Option<String>,
    #[arg(long)]
    pim_chips: Option<String>,
    #[arg(long)]
    devices: Option<String>,
    /// Comma-separated memory modes.
    #[arg(long)]
    mode: Option<String>,
    /// Generation steps simulated exactly; 0 simulates all of them.
    #[arg(long)]
    gen_samples: Option<u32>,
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Threshold file overriding the bundled expectations.
    #[arg(long)]
    expectations: Option<PathBuf>,
    /// Report checks without failing the exit code.
    #[arg(long)]
    explore: bool,
    #[arg(long, env = "IANUS_OUT_DIR", default_value = "results")]
    out_dir: PathBuf,
}

fn hardware(path: Option<&Path>) -> Result<HardwareConfig> {
    Ok(match path {
        Some(p) => load_hardware(p)?,
        None => HardwareConfig::default(),
    })
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Compile {
            target,
            emit_plan: plan,
            gen_context,
        } => {
            let (model, hw, opts) = target.resolve()?;
            let stage = match gen_context {
                Some(context) => Stage::Generation { context },
                None => Stage::Summarization,
            };
            let (prog, _) = compile_stage(&model, &hw, &opts, stage)?;
            if plan {
                emit(&emit_plan(&prog))?;
            } else {
                println!("model      {}", model.name);
                println!("stage      {:?}", prog.stage);
                println!("commands   {}", prog.cmds.len());
                println!("macros     {}", prog.count_macros());
                for d in &prog.decisions {
                    println!("fc {:<8} -> {:?}", d.kind.name(), d.choice);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Simulate {
            target,
            exact,
            trace,
            json,
        } => {
            let (model, hw, mut opts) = target.resolve()?;
            if exact {
                opts.gen_samples = None;
            }
            let rep = run(&model, &hw, &opts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                print_report(&rep);
            }
            if let Some(path) = trace {
                let pr = run_stage(&model, &hw, &opts, Stage::Summarization)?;
                std::fs::write(&path, format_trace(&pr.trace))
                    .with_context(|| format!("writing {}", path.display()))?;
                eprintln!("wrote {} trace records to {}", pr.trace.len(), path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run(a) => run_cmd(a),
        Cmd::ValidateTrace { file, hw } => {
            let hw = hardware(hw.as_deref())?;
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let recs = parse_trace(&text).map_err(anyhow::Error::msg)?;
            let v = validate_trace(&recs, &hw);
            for x in v.iter().take(50) {
                println!("record {}: {}", x.index, x.rule);
            }
            println!("{} records, {} violations", recs.len(), v.len());
            Ok(if v.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::DumpAllocation { target } => {
            let (model, hw, opts) = target.resolve()?;
            let (_, plan) = compile_stage(&model, &hw, &opts, Stage::Summarization)?;
            emit(&allocation_csv(&plan))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Writes bulk output to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run_cmd(a: RunArgs) -> Result<ExitCode> {
    if !SCENARIOS.contains(&a.scenario.as_str()) {
        bail!("unknown scenario `{}`; expected one of: {}", a.scenario, SCENARIOS.join(", "));
    }
    let mut p = ScenarioParams {
        hw: hardware(a.hw.as_deref())?,
        ..ScenarioParams::default()
    };
    if let Some(m) = &a.models {
        p.models = Some(parse_list(m)?);
    }
    if let Some(t) = &a.tokens {
        if t.contains(':') {
            p.tokens = Some(parse_token_pairs(t)?);
        } else if a.scenario == "adaptive-map" {
            p.sweep_tokens = Some(parse_list(t)?);
        } else {
            bail!("invalid override: --tokens for {} takes IN:OUT pairs", a.scenario);
        }
    }
    if let Some(c) = &a.cores {
        p.cores = Some(parse_list(c)?);
    }
    if let Some(c) = &a.pim_chips {
        p.pim_chips = Some(parse_list(c)?);
    }
    if let Some(d) = &a.devices {
        p.devices = Some(parse_list(d)?);
    }
    if let Some(m) = &a.mode {
        p.modes = Some(parse_list(m)?);
    }
    p.gen_samples = a.gen_samples;
    let exp = match &a.expectations {
        Some(path) => Expectations::load(path)?,
        None => Expectations::default(),
    };
    let out = run_scenario(&a.scenario, &p, &exp)?;
    let files = out.write(&a.out_dir)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    for c in &out.checks {
        println!(
            "{} {:<60} {:>10.4}  expected {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.expected
        );
    }
    Ok(if out.passed() || a.explore {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn print_report(r: &SimReport) {
    println!("model            {}", r.model);
    println!("mode             {}", r.mode);
    println!("devices          {}", r.devices);
    println!("tokens           ({}, {})", r.input_tokens, r.output_tokens);
    println!("total            {:>14.3} us", r.total_ns / 1e3);
    println!("summarization    {:>14.3} us", r.summarization_ns / 1e3);
    println!("generation       {:>14.3} us", r.generation_ns / 1e3);
    println!("per token        {:>14.3} us", r.per_token_ns() / 1e3);
    println!();
    println!("{:<14} {:>14} {:>8}", "class", "time (us)", "share");
    for (k, v) in &r.breakdown_ns {
        let share = if r.total_ns > 0.0 { v / r.total_ns } else { 0.0 };
        println!("{:<14} {:>14.3} {:>7.1}%", k, v / 1e3, share * 100.0);
    }
    println!();
    println!("{:<14} {:>14}", "energy", "joules");
    println!("{:<14} {:>14.6}", "core", r.energy.core_compute);
    println!("{:<14} {:>14.6}", "normal mem", r.energy.normal_mem);
    println!("{:<14} {:>14.6}", "pim ops", r.energy.pim_ops);
    println!("{:<14} {:>14.6}", "total", r.energy.total());
    println!();
    for (k, v) in &r.utilization {
        println!("util {:<9} {:>8.1}%", k, v * 100.0);
    }
}
