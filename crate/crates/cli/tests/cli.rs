use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
name = "tiny"
family = "gpt"
embedding_dim = 512
head_dim = 64
num_heads = 8
num_blocks = 1
num_params = 4000000
vocab_size = 1024
"#;

fn ianus(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ianus"))
        .args(args)
        .env("IANUS_OUT_DIR", out_dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn unknown_scenario_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    let o = ianus(&["run", "bogus"], d.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("unknown scenario") && err.contains("adaptive-map"), "{err}");
}

#[test]
fn bad_override_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    let o = ianus(&["run", "scaling", "--tokens", "256"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn adaptive_map_writes_results() {
    let d = tempfile::tempdir().unwrap();
    let o = ianus(&["run", "adaptive-map"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let names: Vec<String> = std::fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.ends_with(".csv")), "{names:?}");
    let summary = std::fs::read_to_string(d.path().join("adaptive-map_summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert!(v.is_object());
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn simulated_trace_validates() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny(d.path());
    let t = d.path().join("t.trace").display().to_string();
    let o = ianus(
        &["simulate", "--model", &model, "--in-tokens", "8", "--out-tokens", "2", "--trace", &t],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("per token"));
    let o = ianus(&["validate-trace", &t], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(" 0 violations"), "{}", stdout(&o));
}

#[test]
fn early_read_is_flagged() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.trace");
    std::fs::write(&p, "# cycle channel bank command row col\n0 0 0 ACT 3 0\n10 0 0 RD 3 0\n").unwrap();
    let o = ianus(&["validate-trace", &p.display().to_string()], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("2 records, 1 violations"), "{}", stdout(&o));
}

#[test]
fn simulate_json_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny(d.path());
    let o = ianus(&["simulate", "--model", &model, "--mode", "partitioned", "--json"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mode"], "partitioned");
    assert!(v["total_ns"].as_f64().unwrap() > 0.0);
}

#[test]
fn emit_plan_lists_commands_in_order() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny(d.path());
    let o = ianus(&["compile", "--model", &model, "--gen-context", "9", "--emit-plan"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    for (i, line) in s.lines().enumerate() {
        assert!(line.starts_with(&format!("{i} ")), "{line}");
    }
    assert!(s.contains("PIM"), "generation plan should contain PIM macros");
}

#[test]
fn allocation_dump_is_csv() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny(d.path());
    let o = ianus(&["dump-allocation", "--model", &model], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    let mut lines = s.lines();
    assert_eq!(lines.next(), Some("matrix,tile,row,channel,bank,dram_row"));
    assert!(lines.all(|l| l.split(',').count() == 6));
}

#[test]
fn plain_mode_simulates() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny(d.path());
    let o = ianus(&["simulate", "--model", &model, "--mode", "plain", "--attention", "pim"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
