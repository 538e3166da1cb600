use std::path::Path;
use std::process::{Command, Output};

use pomp_core::encoder::init_prompt;
use pomp_core::training::load_checkpoint;

fn pomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pomp"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path) {
    let o = pomp(dir, &["gen-data", "--out", "run", "--seed", "42"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const GOLDEN_CHECKSUMS: [(&str, &str); 6] = [
    ("pretrain.feat", "8516ac631afd12853a77cc0fd5a61807329e6b754b5e46bd204f3a4c53c17203"),
    ("pretrain.labl", "134cbda435037b16ad10e7c09cb63db0024480a09acf405c787783bafd124582"),
    ("heldout.feat", "a40406ae36c52f886737e2286fb48b8931836c144b5d8ddad091633a7355ac58"),
    ("heldout.labl", "f0cb7efb48f6c1d07cbd4e399acba4c5c76af3ddfe22abc6c834a46714582fd2"),
    ("vocab.tsv", "392154ad034259fa4a7ea78786743c8cc173fb2b123ebcf175151450cc2e01ab"),
    ("tokens.embd", "cd5308644efc1898a213aa342f37761569427ab7a3e315c791a1c69507834853"),
];

#[test]
fn gen_data_standard_fixture_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let o = pomp(dir.path(), &["gen-data", "--out", "run", "--seed", "42"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 6);
    for (name, sum) in GOLDEN_CHECKSUMS {
        assert!(out.contains(&format!("{sum}  run/{name}")), "{name} checksum changed:\n{out}");
    }
}

#[test]
fn gen_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = pomp(dir.path(), &["gen-data", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`seed`"));

    // a regular file where the output directory should go
    std::fs::write(dir.path().join("blocker"), b"x").unwrap();
    let o = pomp(dir.path(), &["gen-data", "--out", "blocker/run", "--seed", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn config_file_rules() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "seed = 1\nlearning_rate = 3\n").unwrap();
    let o = pomp(dir.path(), &["gen-data", "--config", "bad.conf"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));

    std::fs::write(dir.path().join("dup.conf"), "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(code(&pomp(dir.path(), &["gen-data", "--config", "dup.conf"])), 2);

    std::fs::write(dir.path().join("ok.conf"), "# small universe\nseed = 3\nn_classes = 12\nshots = 2\n").unwrap();
    let o = pomp(dir.path(), &["gen-data", "--config", "ok.conf", "--out", "small"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&pomp(dir.path(), &["gen-data", "--set", "nope=1", "--seed", "1"])), 2);
    assert_eq!(code(&pomp(dir.path(), &["no-such-command"])), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_pomp"))
        .current_dir(dir.path())
        .env("POMP_THREADS", "many")
        .args(["grad-check"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn pretrain_eval_probe_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let train_args = ["pretrain", "--out", "run", "--seed", "42", "--set", "epochs=2", "--set", "lr0=0.5"];
    let o = pomp(d, &train_args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read(d.join("run/checkpoint.pomp")).unwrap();
    let o = pomp(d, &train_args);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(d.join("run/checkpoint.pomp")).unwrap(), first);

    let loss = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("# config_digest="));
    assert!(loss.contains("\nepoch,mean_loss,steps\n1,"));
    assert!(!loss.contains('\r'));

    let o = pomp(d, &["eval", "--out", "run", "--seed", "42", "--with-control"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = std::fs::read_to_string(d.join("run/eval_heldout.csv")).unwrap();
    assert!(eval.contains("# split=heldout\n"));
    assert!(eval.contains("\ncontrol_top1,"));
    assert!(d.join("run/eval_heldout_per_class.csv").exists());

    let o = pomp(d, &["probe", "--out", "run", "--seed", "42"]);
    assert_eq!(code(&o), 0);
    let probe = std::fs::read_to_string(d.join("run/probe_heldout.csv")).unwrap();
    assert!(probe.contains("# split=heldout\n") && probe.contains("\nalign,") && probe.contains("\nuniform,"));
    let o = pomp(d, &["probe", "--out", "run", "--seed", "42", "--split", "pretrain"]);
    assert_eq!(code(&o), 0);
    assert!(d.join("run/probe_pretrain.csv").exists());
}

#[test]
fn pretrain_rejections_and_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let o = pomp(d, &["pretrain", "--out", "run", "--seed", "42", "--set", "k=151"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("K <= N"));

    let o = pomp(d, &["pretrain", "--out", "run", "--seed", "42", "--set", "epochs=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = load_checkpoint(&d.join("run/checkpoint.pomp")).unwrap();
    assert_eq!(ck.prompt, init_prompt(16, 32, 42).unwrap());

    // K = 4 cannot hold the distinct labels of a 32-image batch
    let o = pomp(d, &["pretrain", "--out", "run", "--seed", "42", "--set", "k=4"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("step 0"));

    let o = pomp(d, &["pretrain", "--out", "nodata", "--seed", "42"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn corrupted_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    assert_eq!(code(&pomp(d, &["pretrain", "--out", "run", "--seed", "42", "--set", "epochs=0"])), 0);
    let path = d.join("run/checkpoint.pomp");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let o = pomp(d, &["eval", "--out", "run", "--seed", "42"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert_eq!(code(&pomp(d, &["probe", "--out", "run", "--seed", "42"])), 5);
}

#[test]
fn grad_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pomp(dir.path(), &["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().last().unwrap().to_string();
    let err: f64 = line.trim_start_matches("max_rel_err ").parse().unwrap();
    assert!(err < 1e-4);

    let o = pomp(dir.path(), &["grad-check", "--set", "grad_check_flip_sign=true", "--set", "grad_check_fixtures=2"]);
    assert_eq!(code(&o), 6);
    assert!(stderr(&o).contains("fixture="));

    let o = pomp(dir.path(), &["grad-check", "--set", "grad_check_h=1e-3", "--set", "grad_check_tolerance=1e-2"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn bench_memory_single_k() {
    let dir = tempfile::tempdir().unwrap();
    let o = pomp(dir.path(), &["bench-memory", "--out", "m", "--set", "bench_k=64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stdout(&o).contains("r2"));
    let csv = std::fs::read_to_string(dir.path().join("m/memory.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], "k,modeled_bytes,measured_peak");
}

#[test]
fn ablate_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let o = pomp(d, &["ablate", "--out", "run", "--seed", "42", "--set", "ablate_margins="]);
    assert_eq!(code(&o), 2);

    let o = pomp(
        d,
        &["ablate", "--out", "run", "--seed", "42", "--set", "epochs=1", "--set", "ablate_k=64,400"],
    );
    // K = 400 > N fails, the other cells still run and the grid is recorded
    assert_eq!(code(&o), 4);
    let csv = std::fs::read_to_string(d.join("run/ablate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",ok")).count(), 2);
    assert!(rows.iter().any(|r| r.starts_with("adaptive,uniform,400,,,,error:")));
}
