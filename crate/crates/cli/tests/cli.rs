use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlmcache"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn dlmcache")
}

fn tiny_weights(dir: &Path) {
    let out = run(
        &[
            "gen-weights",
            "--config",
            "tiny",
            "--seed",
            "1",
            "--out",
            "w.bin",
        ],
        dir,
    );
    assert!(out.status.success());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&["verify", "--nonsense"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(run(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(
        run(&["ablate", "--axis", "depth"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_token_text_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    let out = run(
        &[
            "decode",
            "--weights",
            "w.bin",
            "--prompt-tokens",
            "1 two",
            "--gen-len",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn props_suite_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--suite", "props"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn zero_length_decode_prints_prompt() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    let out = run(
        &[
            "decode",
            "--weights",
            "w.bin",
            "--prompt-tokens",
            "4 5 6",
            "--gen-len",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "4 5 6");
}

#[test]
fn prompt_from_file_and_trace_lines() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    std::fs::write(dir.path().join("p.txt"), "1 2\n3\n").unwrap();
    let out = run(
        &[
            "decode",
            "--weights",
            "w.bin",
            "--prompt-tokens",
            "@p.txt",
            "--gen-len",
            "4",
            "--mode",
            "cached",
            "--identifier",
            "value",
            "--schedule",
            "uniform:0.5",
            "--trace-out",
            "t.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let tokens: Vec<usize> = String::from_utf8_lossy(&out.stdout)
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(&tokens[..3], &[1, 2, 3]);
    assert_eq!(tokens.len(), 7);
    let trace =
        dlmcache::io::read_trace(&std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap())
            .unwrap();
    // fixed:2 over 4 positions is two steps of two layers each.
    assert_eq!(trace.len(), 4);
}

#[test]
fn bench_emits_reports_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    std::fs::write(
        dir.path().join("m.json"),
        r#"{"weights":"w.bin","seeds":[0,1],"prompt_len":4,"gen_len":6,
            "modes":[{"name":"v","mode":"vanilla"},
                     {"name":"f","mode":"cached","identifier":"value","schedule":{"uniform":0.25}},
                     {"name":"s","mode":"cached","identifier":"singular:1","schedule":{"uniform":0.25}}]}"#,
    )
    .unwrap();
    let out = run(&["bench", "--matrix", "m.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 3);
    let rows = v["comparison"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let totals: Vec<u64> = rows
        .iter()
        .map(|r| r["total_flops"].as_u64().unwrap())
        .collect();
    assert!(totals.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(v["comparison"]["overlaps"].as_array().unwrap().len(), 1);
}

#[test]
fn profile_then_fit_writes_schedule() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    let out = run(
        &[
            "profile-drift",
            "--weights",
            "w.bin",
            "--tau",
            "0.999",
            "--steps",
            "4",
            "--samples",
            "2",
            "--prompt-len",
            "8",
            "--gen-len",
            "8",
            "--out",
            "p.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read_to_string(dir.path().join("p.csv"))
        .unwrap()
        .starts_with("layer,step,fraction"));
    let out = run(
        &[
            "fit-budget",
            "--profile",
            "p.csv",
            "--floor",
            "0.02",
            "--out",
            "s.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(s["L"], 2);
}

#[test]
fn ablation_over_identifiers_runs() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    let out = run(
        &[
            "ablate",
            "--axis",
            "identifier",
            "--weights",
            "w.bin",
            "--seeds",
            "1",
            "--prompt-len",
            "8",
            "--gen-len",
            "8",
            "--out",
            "a.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 8);
}

#[test]
fn steps_flag_sets_commit_count() {
    let dir = tempfile::tempdir().unwrap();
    tiny_weights(dir.path());
    let out = run(
        &[
            "decode",
            "--weights",
            "w.bin",
            "--prompt-tokens",
            "1 2",
            "--gen-len",
            "8",
            "--steps",
            "4",
            "--trace-out",
            "t.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let trace =
        dlmcache::io::read_trace(&std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap())
            .unwrap();
    assert_eq!(trace.iter().map(|r| r.step).max(), Some(3));
    let out = run(
        &[
            "decode",
            "--weights",
            "w.bin",
            "--prompt-tokens",
            "1",
            "--gen-len",
            "2",
            "--steps",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
