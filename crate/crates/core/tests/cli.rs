use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adasparse"));
    c.env_remove("RUN_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn adasparse")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{"seed": 5, "task": {"samples": 24, "output_len": 3},
  "trainer": {"steps": 20, "batch_size": 4, "log_every": 5}}"#;

#[test]
fn transform_prints_six_decimal_rows() {
    let cases = [
        (
            vec!["--kind", "entmax", "--alpha", "1.5", "--logits", "1,0"],
            "0.830719,0.169281",
        ),
        (vec!["--kind", "softmax", "--logits", "0,0"], "0.500000,0.500000"),
        (vec!["--kind", "sparsemax", "--logits", "1,0"], "1.000000,0.000000"),
        (vec!["--kind", "entmax15", "--logits", "1,0"], "0.830719,0.169281"),
        (
            vec!["--kind", "softmax", "--temp", "0.5", "--logits", "1,0"],
            "0.880797,0.119203",
        ),
        (
            vec!["--kind", "sparsemax", "--logits", "-1,-1.5,-3"],
            "0.750000,0.250000,0.000000",
        ),
    ];
    for (args, want) in cases {
        let mut full = vec!["transform"];
        full.extend(args.iter());
        let o = run(&full);
        assert_eq!(o.status.code(), Some(0), "{full:?}");
        assert_eq!(stdout(&o).trim(), want, "{full:?}");
    }
}

#[test]
fn transform_parse_errors_exit_two() {
    for logits in ["1,abc", "", "1,,2", "nan,1", "inf"] {
        let o = run(&["transform", "--kind", "softmax", "--logits", logits]);
        assert_eq!(o.status.code(), Some(2), "{logits:?}");
        assert!(!o.stderr.is_empty());
        assert!(o.stdout.is_empty());
    }
    let o = run(&["transform", "--kind", "entmax", "--alpha", "0.5", "--logits", "1,0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        run(&["transform", "--kind", "bogus", "--logits", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_writes_identical_reports_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let o = run(&[
            "gradcheck",
            "--trials",
            "100",
            "--dim",
            "8",
            "--seed",
            "1",
            "--report",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(&a).unwrap();
    assert_eq!(ra, fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["seed"], 1);
    let checks = v["checks"].as_object().unwrap();
    for key in [
        "softmax",
        "sparsemax",
        "entmax15",
        "entmax_bisect_1.3",
        "alpha_grad_1.5",
    ] {
        let c = &checks[key];
        assert!(c["max_rel_err"].as_f64().unwrap() <= 1e-4, "{key}: {c}");
        assert_eq!(c["checked"], 100);
    }
}

#[test]
fn gradcheck_on_single_coordinate_is_exact() {
    let o = run(&["gradcheck", "--trials", "5", "--dim", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for (_, c) in v["checks"].as_object().unwrap() {
        assert_eq!(c["max_rel_err"].as_f64().unwrap(), 0.0);
    }
    assert_eq!(run(&["gradcheck", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn bench_prints_header_and_row() {
    let o = run(&[
        "bench", "--kind", "softmax", "--dim", "64", "--batch", "16", "--iters", "3",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,dim,batch,ns_per_row_mean,ns_per_row_std");
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&f[..3], ["softmax", "64", "16"]);
    let mean: f64 = f[3].parse().unwrap();
    assert!(mean > 0.0 && mean.is_finite());

    let o = run(&[
        "bench", "--kind", "entmax15", "--dim", "8", "--batch", "2", "--iters", "1",
    ]);
    assert!(stdout(&o).lines().nth(1).unwrap().ends_with(",0.000000"));
    assert_eq!(
        run(&["bench", "--kind", "softmax", "--dim", "0"]).status.code(),
        Some(2)
    );
}

#[test]
fn train_with_zero_steps_logs_initial_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "trainer": {"steps": 0}}"#);
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("step,loss,alpha_h"));
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "0");
    assert!(fields[2..].iter().all(|a| *a == "1.500000"));
}

#[test]
fn train_writes_all_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "trace.csv",
        "alignment.csv",
        "heads.json",
        "model.json",
        "histogram.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let heads: serde_json::Value = serde_json::from_slice(&fs::read(a.join("heads.json")).unwrap()).unwrap();
    assert_eq!(heads["heads"].as_array().unwrap().len(), 2);
    for (i, h) in heads["heads"].as_array().unwrap().iter().enumerate() {
        assert_eq!(h["id"], i);
        let p = h["mean_selection_prob"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(h["alpha"].as_f64().unwrap() >= 1.0);
    }
    assert!(heads["token_accuracy"].is_f64() && heads["alignment_accuracy"].is_f64());

    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "5", "10", "15", "20"]);

    let align = fs::read_to_string(a.join("alignment.csv")).unwrap();
    assert_eq!(align.lines().next().unwrap(), "sample,step,gold,t_h0,t_h1");
    // 24 samples hold out 2, each with 3 output steps
    assert_eq!(align.lines().count(), 1 + 2 * 3);
    // no temp files left behind
    assert!(fs::read_dir(&a)
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn global_seed_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run(&["--seed", "6", "train", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_ne!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
}

#[test]
fn out_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "trainer": {"steps": 0}}"#);
    let env_dir = dir.path().join("env");
    let flag_dir = dir.path().join("flag");
    let o = bin()
        .args(["train", "--config", &cfg])
        .env("RUN_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env_dir.join("trace.csv").exists());
    let o = bin()
        .args(["train", "--config", &cfg, "--out", flag_dir.to_str().unwrap()])
        .env("RUN_OUT_DIR", dir.path().join("unused"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_dir.join("trace.csv").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn invalid_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for body in [
        "{}",
        "not json",
        r#"{"seed": 1, "extra": true}"#,
        r#"{"seed": 1, "trainer": {"learning_rate": -1}}"#,
        r#"{"seed": 1, "trainer": {"batch_size": 0}}"#,
        r#"{"seed": 1, "task": {"frame_dim": 3}}"#,
        r#"{"seed": 1, "task": {"seed": 3}}"#,
    ] {
        let cfg = write_config(dir.path(), body);
        let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
    let o = run(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn diverged_run_exits_one_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 1, "task": {"samples": 20, "output_len": 3},
            "trainer": {"steps": 30, "learning_rate": 1e8, "batch_size": 4, "log_every": 1}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let rows = trace.lines().count() - 1;
    assert!((1..31).contains(&rows), "{rows} rows");
    assert!(!out.join("heads.json").exists());
}

#[test]
fn attmap_emits_simplex_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"seed": 2, "task": {"samples": 12, "output_len": 3},
      "trainer": {"steps": 5, "batch_size": 4, "log_every": 5,
                  "encoder_heads": [{"kind": "softmax"}, {"kind": "sparsemax"}, {"kind": "entmax-fixed", "alpha": 1.5},
                                    {"kind": "entmax-adaptive", "pre": 0.0}]}}"#;
    let cfg = write_config(dir.path(), body);
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "attmap",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--sample",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("attmap_summary.json")).unwrap()).unwrap();
    let heads = summary["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 4);
    assert_eq!(heads[0]["kind"], "softmax");
    assert_eq!(heads[0]["zero_fraction"].as_f64().unwrap(), 0.0);
    for h in heads {
        let csv = fs::read_to_string(out.join(h["file"].as_str().unwrap())).unwrap();
        assert_eq!(csv.lines().count(), 6);
        for line in csv.lines() {
            let row: Vec<f64> = line.split(',').map(|t| t.parse().unwrap()).collect();
            assert_eq!(row.len(), 6);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(h["mean_entropy"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn attmap_without_run_or_encoder_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "trainer": {"steps": 0}}"#);
    let out = dir.path().join("out");
    let o = run(&["attmap", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let o = run(&[
        "attmap",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--sample",
        "5000",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(
        dir.path(),
        r#"{"seed": 1, "trainer": {"steps": 0, "encoder_attention": false}}"#,
    );
    let out2 = dir.path().join("out2");
    run(&["train", "--config", &cfg, "--out", out2.to_str().unwrap()]);
    let o = run(&["attmap", "--config", &cfg, "--out", out2.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
