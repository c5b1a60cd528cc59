use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cinefuse_cli::CliError;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinefuse")).args(args).output().expect("binary runs")
}

fn run_in(args: &[&str], out: &Path) -> Output {
    let mut a = args.to_vec();
    a.extend(["--out", out.to_str().unwrap()]);
    run(&a)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_writes_identical_manifests_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["synth", "--movies", "4", "--shots", "200", "--seed", "7"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = run_in(&args, &a);
    assert!(oa.status.success(), "{}", stderr(&oa));
    let ob = run_in(&args, &b);
    assert_eq!(oa.stdout, ob.stdout);
    let manifests: Vec<_> = fs::read_dir(a.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(manifests.len(), 4);
    for e in fs::read_dir(a.join("data")).unwrap() {
        let p = e.unwrap().path();
        let twin = b.join("data").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(twin).unwrap(), "{}", p.display());
    }
    let summary: Value = serde_json::from_slice(&oa.stdout).unwrap();
    assert_eq!(summary["movies"].as_array().unwrap().len(), 4);
}

#[test]
fn invalid_config_exits_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    for set in ["synth.scenes=500", "no.such.key=1", "scene_train.seed=3"] {
        let o = run_in(&["synth", "--set", set], &tmp.path().join("x"));
        assert_eq!(o.status.code(), Some(2), "{set}");
        let msg = stderr(&o);
        assert_eq!(msg.trim_end().lines().count(), 1, "{msg}");
        assert!(msg.starts_with("error: "));
    }
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "synth.shots=60\nthis line has no equals sign\n").unwrap();
    let o = run_in(&["synth", "--config", cfg.to_str().unwrap()], &tmp.path().join("y"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.cfg:2"));
}

#[test]
fn data_and_io_failures_have_their_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run_in(&["eval", "--task", "scene", "--data", empty.to_str().unwrap()], &tmp.path().join("a"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let missing = tmp.path().join("missing.cfg");
    let o = run_in(&["synth", "--config", missing.to_str().unwrap()], &tmp.path().join("b"));
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let o = run_in(&["importance"], &tmp.path().join("c"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_code_table() {
    use cinefuse::Error;
    assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    assert_eq!(CliError::Data("x".into()).exit_code(), 3);
    assert_eq!(CliError::GradcheckFailed(1).exit_code(), 4);
    assert_eq!(CliError::Io("x".into()).exit_code(), 5);
    assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
    assert_eq!(CliError::from(Error::Data("x".into())).exit_code(), 3);
    let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
    assert_eq!(CliError::from(io).exit_code(), 5);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let o = run_in(&["gradcheck"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let s: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(s["failed"], 0);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() > 100);
    assert!(out.join("gradcheck.json").exists());
}

#[test]
fn train_scene_beats_untrained_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let o = run_in(&["synth", "--movies", "4", "--seed", "3", "--set", "synth.sentences=0"], &root.join("s"));
    assert!(o.status.success(), "{}", stderr(&o));
    let data = root.join("s/data");
    let data = data.to_str().unwrap();
    let common = ["--data", data, "--set", "held_out=1"];

    let mut args = vec!["eval", "--task", "scene"];
    args.extend(common);
    let o = run_in(&args, &root.join("e0"));
    assert!(o.status.success(), "{}", stderr(&o));
    let untrained = report(&root.join("e0"));
    let ap0 = untrained["metrics"]["ap"].as_f64().unwrap();
    let rate = untrained["metrics"]["positive_rate"].as_f64().unwrap();
    assert!(ap0.is_finite() && (ap0 - rate).abs() < 10.0, "ap {ap0} rate {rate}");

    let mut args = vec!["train-scene", "--set", "scene_train.epochs=4"];
    args.extend(common);
    let o = run_in(&args, &root.join("t"));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "train.jsonl", "report.json", "scores.csv", "config.txt", "checkpoints/epoch-003.ckpt"] {
        assert!(root.join("t").join(f).exists(), "{f}");
    }

    let ck = root.join("t/model.ckpt");
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap()];
    args.extend(common);
    let o = run_in(&args, &root.join("e1"));
    assert!(o.status.success(), "{}", stderr(&o));
    let ap1 = report(&root.join("e1"))["metrics"]["ap"].as_f64().unwrap();
    assert!(ap1 > ap0, "trained {ap1} vs untrained {ap0}");
}

#[test]
fn act_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let small = [
        "--movies", "3", "--shots", "60", "--set", "synth.scenes=4", "--set", "synth.sentences=6", "--set",
        "held_out=1", "--set", "act_train.epochs=1",
    ];
    let o = run_in(&[&["train-act"][..], &small].concat(), &root.join("a"));
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&root.join("a"));
    assert!(r["metrics"]["target_sum_error"].as_f64().unwrap() < 1e-12);
    let ck = root.join("a/model.ckpt");
    let ck = ck.to_str().unwrap();
    for (cmd, dir) in [("sync", "s"), ("importance", "i"), ("eval", "e")] {
        let o = run_in(&[&[cmd, "--checkpoint", ck][..], &small].concat(), &root.join(dir));
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(fs::read_dir(root.join("s/sync")).unwrap().count() >= 2);
    let imp: Value = serde_json::from_str(&fs::read_to_string(root.join("i/importance.json")).unwrap()).unwrap();
    assert!(imp.is_object() || imp.is_array());
    let o = run_in(&[&["sync"][..], &small].concat(), &root.join("w"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(report(&root.join("w"))["metrics"]["precision"].as_f64().is_some());
}
