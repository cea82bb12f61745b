use std::path::Path;
use std::process::{Command, Output};

use ainet_cli::bench::{CostReport, Model};

fn ainet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ainet"))
        .args(args)
        .current_dir(dir)
        .env_remove("AINET_STRICT")
        .output()
        .expect("spawn ainet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{"num_layers": 2, "channels": 8, "heads": 2, "search_size": 32, "template_size": 16,
            "train": {"steps": 12, "eval_every": 6, "train_sequences": 4, "test_sequences": 2, "frames_per_sequence": 4}}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

/// Every failure is reported as one `error kind=... message="..."` line.
fn assert_one_line_error(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error kind={kind} message=\"")), "{err}");
}

#[test]
fn gradcheck_and_oracle_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let o = ainet(&["gradcheck", "--seed", "7"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 30);
    assert!(out.lines().all(|l| l.ends_with(" ok")));
    assert!(out.contains("gradcheck dfm_then_ofm "));

    let o = ainet(&["oracle"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains(" ok ")).count(), 4);
}

#[test]
fn bench_writes_cost_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = ainet(&["bench", "--no-timing", "--out", "costs.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("slope ofm 1.0000"));
    let text = std::fs::read_to_string(dir.path().join("costs.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.starts_with("token_count,model,mults_adds,peak_live_values,wall_ms\n320,ofm,"));
    let report = CostReport::read_csv(&dir.path().join("costs.csv")).unwrap();
    assert_eq!(report.rows.len(), 12);
    assert!(report.rows.iter().all(|r| r.wall_ms.is_none()));
    let tokens: Vec<usize> = report.model_rows(Model::Attention).map(|r| r.token_count).collect();
    assert!(tokens.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn timed_bench_leaves_large_attention_untimed() {
    let dir = tempfile::tempdir().unwrap();
    let o = ainet(
        &["bench", "--channels", "8", "--heads", "2", "--tokens", "320,640", "--attention-wall-limit", "320", "--out", "c.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = CostReport::read_csv(&dir.path().join("c.csv")).unwrap();
    let timed: Vec<(usize, Model, bool)> = report.rows.iter().map(|r| (r.token_count, r.model, r.wall_ms.is_some())).collect();
    assert_eq!(
        timed,
        [(320, Model::Ofm, true), (320, Model::Attention, true), (640, Model::Ofm, true), (640, Model::Attention, false)]
    );
}

#[test]
fn demo_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_ainet"))
        .args(["demo-train", "--config", &cfg, "--out", "run", "--seed", "4"])
        .current_dir(dir.path())
        .env("AINET_STRICT", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("steps=12 seed=4 strict=1"), "{line}");
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 13);
    assert!(dir.path().join("run/checkpoint").is_dir());

    let train_iou = line.split("mean_iou=").nth(1).unwrap().split(' ').next().unwrap().to_string();
    let o = ainet(&["demo-eval", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with(&format!("demo-eval mean_iou={train_iou} ")), "{}", stdout(&o));
}

#[test]
fn ablation_reports_medians_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ainet(
        &["ablation", "--config", &cfg, "--seeds", "0,1", "--modes", "baseline_add,dfm_ofm", "--out", "ab.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("run ")).count(), 4);
    assert!(out.contains("median mode=dfm_ofm mean_iou="));
    let csv = std::fs::read_to_string(dir.path().join("ab.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let o = ainet(&["ablation", "--config", &cfg, "--modes", "nonsense"], dir.path());
    assert_one_line_error(&o, "usage");
}

#[test]
fn failures_are_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"channels": 8, "colour": "red"}"#).unwrap();
    assert_one_line_error(&ainet(&["demo-train", "--config", "bad.json"], dir.path()), "config");
    std::fs::write(dir.path().join("odd.json"), r#"{"channels": 8, "heads": 3}"#).unwrap();
    assert_one_line_error(&ainet(&["demo-train", "--config", "odd.json"], dir.path()), "config");
    assert_one_line_error(&ainet(&["demo-train", "--config", "missing.json"], dir.path()), "io");
    assert_one_line_error(&ainet(&["bench", "--no-timing", "--out", "no/such/dir/c.csv"], dir.path()), "output");
    assert_one_line_error(&ainet(&["bench", "--no-timing", "--tokens", "320,500"], dir.path()), "usage");
    assert_one_line_error(&ainet(&["demo-eval", "--out", "nowhere"], dir.path()), "usage");
}

#[test]
fn unknown_input_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["bench", "--frob"][..], &[][..]] {
        let o = ainet(args, dir.path());
        assert!(!o.status.success());
        assert!(stderr(&o).contains("Usage:"), "{args:?}: {}", stderr(&o));
    }
}
