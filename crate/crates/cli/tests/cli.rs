use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tcl_core::synthdata::{read_dataset, Suite};
use tcl_core::trainer::{parse_metrics_csv, TrainConfig};

fn tcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::defaults(Suite::Blobs3);
    cfg.samples_per_domain = 64;
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.mem_capacity = 40;
    cfg.log_interval = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_one_file_per_domain_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for (suite, n) in [("blobs3", 3), ("digits5", 5)] {
        let a = dir.path().join(format!("{suite}-a"));
        let b = dir.path().join(format!("{suite}-b"));
        for out in [&a, &b] {
            let o = tcl(&["gen-data", "--suite", suite, "--samples", "40", "--seed", "4", "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        assert_eq!(files.len(), n);
        for f in &files {
            assert_eq!(fs::read(f).unwrap(), fs::read(b.join(f.file_name().unwrap())).unwrap());
            assert_eq!(read_dataset(f).unwrap().len(), 40);
        }
    }
}

#[test]
fn missing_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = small_config().to_text().lines().filter(|l| !l.starts_with("tau")).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("broken.cfg");
    fs::write(&path, text).unwrap();
    let o = tcl(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_values_are_usage_errors() {
    assert_eq!(code(&tcl(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&tcl(&["frobnicate"])), 1);
    assert_eq!(code(&tcl(&["train", "--suite", "blobs3", "--lambda", "-1"])), 1);
    assert_eq!(code(&tcl(&["train", "--suite", "blobs3", "--set", "tau"])), 1);
    assert_eq!(code(&tcl(&["--help"])), 0);
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_the_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small_config());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = tcl(&["train", "--config", &cfg_path, "--out", out_s, "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config_sha256 = "));
    assert!(manifest.contains("command = train"));
    let metrics = parse_metrics_csv(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    let last = metrics.last().unwrap();
    assert_eq!(last.epoch, 2);

    let e = tcl(&["eval", "--config", &cfg_path, "--checkpoint", out.join("checkpoint.bin").to_str().unwrap()]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    assert!(stdout(&e).contains(&format!("accuracy {:.4}", last.tgt_acc)), "{}", stdout(&e));

    let missing = tcl(&["eval", "--config", &cfg_path, "--checkpoint", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn lambda_flag_matches_lambda_in_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut zero = small_config();
    zero.lambda = 0.0;
    let from_file = dir.path().join("file");
    let from_flag = dir.path().join("flag");
    let f = tcl(&["train", "--config", &write_config(dir.path(), &zero), "--out", from_file.to_str().unwrap()]);
    assert_eq!(code(&f), 0, "{}", stderr(&f));
    let cfg_path = write_config(dir.path(), &small_config());
    let g = tcl(&["train", "--config", &cfg_path, "--lambda", "0", "--out", from_flag.to_str().unwrap()]);
    assert_eq!(code(&g), 0, "{}", stderr(&g));
    assert_eq!(fs::read(from_file.join("metrics.csv")).unwrap(), fs::read(from_flag.join("metrics.csv")).unwrap());
    let hash = |dir: &Path| {
        let m = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        m.lines().find(|l| l.starts_with("config_sha256")).unwrap().to_string()
    };
    assert_eq!(hash(&from_file), hash(&from_flag));
}

#[test]
fn inspect_memory_validates_the_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out = dir.path().join("run");
    let o = tcl(&["train", "--config", &write_config(dir.path(), &cfg), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let i = tcl(&["inspect-memory", "--run", out.to_str().unwrap()]);
    assert_eq!(code(&i), 0, "{}", stderr(&i));
    let rows: Vec<String> = stdout(&i).lines().skip(1).map(String::from).collect();
    // 64 samples, batch 16: 4 steps per epoch, 12 steps, each bank capped at 40.
    let domains = Suite::Blobs3.domain_count();
    assert_eq!(rows.len(), domains * 40);
    for r in &rows {
        let f: Vec<&str> = r.split(',').collect();
        assert!(f[2].parse::<usize>().unwrap() < Suite::Blobs3.classes());
        let norm: f64 = f[3..].iter().map(|v| v.parse::<f64>().unwrap().powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    let one = tcl(&["inspect-memory", "--run", out.to_str().unwrap(), "--domain", &cfg.target.to_string()]);
    assert_eq!(stdout(&one).lines().count(), 1 + 40);

    let dump = out.join("memory.csv");
    let text = fs::read_to_string(&dump).unwrap();
    fs::write(&dump, text.replacen(",0,", ",0,9", 1)).unwrap();
    assert_eq!(code(&tcl(&["inspect-memory", "--run", out.to_str().unwrap()])), 2);
}

#[test]
fn gradcheck_passes_and_reports_an_injected_sign_flip() {
    let ok = tcl(&["gradcheck", "--instances", "5"]);
    assert_eq!(code(&ok), 0, "{}{}", stdout(&ok), stderr(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.contains("max rel err")).count(), 8);
    let bad = tcl(&["gradcheck", "--instances", "5", "--inject-sign-flip", "loss_st"]);
    assert_eq!(code(&bad), 3);
    assert!(stderr(&bad).contains("loss_st"), "{}", stderr(&bad));
}

#[test]
fn ablation_and_sweep_share_bitwise_runs_with_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small_config());
    let abl = dir.path().join("abl");
    let a = tcl(&["ablate", "--config", &cfg_path, "--seeds", "2", "--seed", "3", "--out", abl.to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 + 5);

    let single = dir.path().join("single");
    let t = tcl(&["train", "--config", &cfg_path, "--lambda", "0", "--seed", "4", "--out", single.to_str().unwrap()]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let standalone = fs::read(single.join("metrics.csv")).unwrap();
    assert_eq!(standalone, fs::read(abl.join("metrics/wo-tcl_seed4.csv")).unwrap());

    let sw = dir.path().join("sweep");
    let s = tcl(&["sweep-lambda", "--config", &cfg_path, "--grid", "0,0.5", "--seed-list", "3,4", "--out", sw.to_str().unwrap()]);
    assert_eq!(code(&s), 0, "{}", stderr(&s));
    let rows: Vec<String> = fs::read_to_string(sw.join("sweep.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0,3,") && rows[1].starts_with("0,4,") && rows[3].starts_with("0.5,4,"));
    assert_eq!(standalone, fs::read(sw.join("metrics/lambda-0_seed4.csv")).unwrap());
}
