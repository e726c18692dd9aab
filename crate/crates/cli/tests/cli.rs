use std::process::{Command, Output};

fn yoco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yoco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_default_passes() {
    let o = yoco(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("checks passed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn verify_fault_names_the_failed_invariant() {
    let o = yoco(&["verify", "--inject-fault", "chunkwise-cross-term"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gret.paradigm_equivalence[parallel~chunkwise]"), "{err}");
}

#[test]
fn verify_paradigm_filter() {
    let o = yoco(&["verify", "--paradigm", "recurrent", "--paradigm", "chunkwise"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("gret.paradigm_equivalence[recurrent~chunkwise]"));
    assert!(!out.contains("[parallel~"));
}

#[test]
fn bench_three_b_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let p = path.to_str().unwrap();
    let args = ["bench", "--preset", "3b", "--n", "4096,8192", "--precision", "f32", "--out", p];
    assert_eq!(yoco(&args).status.code(), Some(0));
    let first = std::fs::read(&path).unwrap();
    assert_eq!(yoco(&args).status.code(), Some(0));
    assert_eq!(std::fs::read(&path).unwrap(), first, "csv is byte-stable");

    let text = String::from_utf8(first).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,model,kv_values,kv_bytes,attn_flops_prefill,layers_prefilled");
    assert!(lines[1].starts_with("4096,yoco,8388608,"));
    assert!(lines[2].starts_with("4096,transformer,218103808,"));
    assert_eq!(lines.len(), 5);
}

#[test]
fn bench_per_token_bytes() {
    let o = yoco(&["bench", "--preset", "3b", "--n", "32768,65536,131072"]);
    let rows: Vec<Vec<u128>> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            vec![f[0].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap()]
        })
        .collect();
    // yoco rows are even, baseline rows odd
    let per_token: Vec<u128> = rows.iter().map(|r| r[1] / r[0]).collect();
    assert_eq!(per_token[0], per_token[2]);
    assert_eq!(per_token[1], per_token[3]);
    assert_eq!(per_token[1], 26 * per_token[0]);
    assert_eq!(rows[3][2], 4 * rows[1][2]);
    assert_eq!(rows[2][2], 2 * rows[0][2]);
}

#[test]
fn generate_is_deterministic_and_chunk_invariant() {
    let base = ["generate", "--prompt", "5,9,13,2,40", "--max-new", "12"];
    let a = stdout(&yoco(&base));
    assert_eq!(a, stdout(&yoco(&base)));
    let mut one = base.to_vec();
    one.extend(["--prefill-chunk", "1"]);
    let mut big = base.to_vec();
    big.extend(["--prefill-chunk", "256"]);
    assert_eq!(stdout(&yoco(&one)), stdout(&yoco(&big)));
    assert_eq!(a.split_whitespace().count(), 17);
}

#[test]
fn generate_zero_echoes_prompt() {
    let o = yoco(&["generate", "--prompt", "1,2,3", "--max-new", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "1 2 3");
}

#[test]
fn parsim_summary_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let o = yoco(&[
        "parsim",
        "--devices",
        "2",
        "--n",
        "64",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "P,handoffs,allgathers,values_moved");
    assert!(lines[1].starts_with("2,2,1,"));
    let events = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(events.lines().count(), 3);
    for l in events.lines() {
        for key in ["\"kind\"", "\"layer\"", "\"src\"", "\"dst\"", "\"values\""] {
            assert!(l.contains(key));
        }
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("equivalence pass"));
}

#[test]
fn weights_round_trip_through_generate() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.json");
    let ws = w.to_str().unwrap();
    assert_eq!(yoco(&["init-weights", "--seed", "3", "--out", ws]).status.code(), Some(0));
    let from_file = stdout(&yoco(&["generate", "--weights", ws, "--prompt", "4,5", "--max-new", "6"]));
    let from_seed = stdout(&yoco(&["generate", "--seed", "3", "--prompt", "4,5", "--max-new", "6"]));
    assert_eq!(from_file, from_seed);

    std::fs::write(dir.path().join("w.bin"), b"short").unwrap();
    let o = yoco(&["generate", "--weights", ws, "--prompt", "1"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_layers": 3}"#).unwrap();
    let code = |args: &[&str]| yoco(args).status.code();

    assert_eq!(code(&["bench", "--n", "8", "--bogus"]), Some(2));
    assert_eq!(code(&["verify", "--config", bad.to_str().unwrap()]), Some(3));
    assert_eq!(code(&["verify", "--config", "/nonexistent/cfg.json"]), Some(4));
    assert_eq!(code(&["generate", "--weights", "/nonexistent/w.json", "--prompt", "1"]), Some(4));
    assert_eq!(code(&["parsim", "--devices", "5", "--n", "3"]), Some(6));
    assert_eq!(code(&["generate", "--prompt", "1,500"]), Some(6));
    let out = dir.path().join("missing_dir").join("x.csv");
    assert_eq!(code(&["bench", "--n", "8", "--out", out.to_str().unwrap()]), Some(4));

    let help = stdout(&yoco(&["--help"]));
    for c in ["0  success", "1  verification", "2  usage", "3  invalid model config", "4  I/O", "5  invalid weights", "6  invalid run"] {
        assert!(help.contains(c), "{c}");
    }
}

#[test]
fn config_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{"n_layers": 2, "d_model": 16, "n_heads": 2, "n_kv_heads": 1, "d_head": 8,
            "ffn_dim": 48, "vocab_size": 31, "self_attn_kind": "swa", "window": 4, "chunk": 8,
            "tau": 16.0, "rope_theta": 10000.0, "rmsnorm_eps": 1e-6}"#,
    )
    .unwrap();
    let o = yoco(&["verify", "--config", path.to_str().unwrap(), "--n", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}
