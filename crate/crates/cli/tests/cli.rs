use std::path::Path;
use std::process::{Command, Output};

fn kmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmamba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = kmamba(&["gen", "--out", p(&data), "--n", "5", "--size", "16", "--seed", "3", "--pgm"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.tsv").exists());
    assert!(data.join("case_0004_label.pgm").exists());

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nstage_channels = [4, 8, 16, 32, 64]\npatch_size = 16\n\n[train]\nsteps = 3\n").unwrap();
    let run = dir.path().join("run");
    let o = kmamba(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("step,l_origin,l_sd,l_total,struct_1"));
    assert_eq!(lines[3].split(',').count(), 12);

    let csv = dir.path().join("eval.csv");
    let ckpt = run.join("model_final.kmck");
    let o = kmamba(&["eval", "--model", p(&ckpt), "--data", p(&data), "--out", p(&csv), "--split", "val"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = rows.lines().collect();
    assert_eq!(rows[0], "case_id,class,dice,hd95,iou");
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[4].starts_with("case_0004,fg,"));
}

#[test]
fn error_exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let o = kmamba(&["train", "--config", p(&missing), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "loss.beta = 2.0\n").unwrap();
    let o = kmamba(&["train", "--config", p(&bad), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(code(&o), 4);

    let o = kmamba(&["gradcheck", "--module", "nonexistent"]);
    assert_eq!(code(&o), 4);

    let ckpt = dir.path().join("junk.kmck");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = kmamba(&["eval", "--model", p(&ckpt), "--data", p(dir.path()), "--out", p(&dir.path().join("e.csv"))]);
    assert_eq!(code(&o), 6);

    let o = kmamba(&["bench", "--kind", "fft", "--out", p(&dir.path().join("b.csv"))]);
    assert_eq!(code(&o), 4);

    let o = kmamba(&["no-such-command"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_single_suite_passes() {
    let o = kmamba(&["gradcheck", "--module", "softmax"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
}

#[test]
fn bench_writes_csv_with_slope() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = kmamba(&["bench", "--kind", "scan", "--sizes", "256,512,1024", "--samples", "2", "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "T,mean_ns,std_ns,slope_fit");
    assert_eq!(lines.len(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("slope"));
}

#[test]
fn ablate_partial_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&kmamba(&["gen", "--out", p(&data), "--n", "5", "--size", "16"])), 0);
    let csv = dir.path().join("ablation.csv");
    let o = kmamba(&["ablate", "--grid", "mda", "--data", p(&data), "--out", p(&csv), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "hsa,bkm,mda,params,steps,final_loss,val_dice,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,0,") && lines[2].starts_with("1,1,1,"), "{text}");
}
