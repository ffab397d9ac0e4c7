use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn jd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointdrive"))
        .args(args)
        .env("CAAD_DATA_DIR", dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn jointdrive")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 1
epochs = [1, 1, 1]
batch_size = 4
train_scenes = "scenes.jsonl"

[model]
width = 16
heads = 2
joint_modes = 3
marginal_modes = 3
encoder_layers = 1
refine_layers = 1
"#;

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&jd(d.path(), &["--help"])), 0);
    assert_eq!(code(&jd(d.path(), &["--version"])), 0);
    assert_eq!(code(&jd(d.path(), &[])), 1);
    assert_eq!(code(&jd(d.path(), &["gen", "--bogus"])), 1);
    assert_eq!(code(&jd(d.path(), &["gen", "--tags", "highway", "--out", "x"])), 1);
    assert_eq!(code(&jd(d.path(), &["ablate", "--grid", "F", "--out", "x"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let o = jd(d.path(), &["score", "--scene", "missing.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.jsonl"));

    fs::write(d.path().join("bad.toml"), "epochs = [1, 1]\n").unwrap();
    assert_eq!(code(&jd(d.path(), &["train", "--config", "bad.toml", "--out", "run"])), 2);
}

#[test]
fn gen_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for (name, seed) in [("a.jsonl", "5"), ("b.jsonl", "5"), ("c.jsonl", "6")] {
        let o = jd(d.path(), &["gen", "--seed", seed, "--count", "6", "--out", name]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |n: &str| fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let lines = String::from_utf8(read("a.jsonl")).unwrap();
    // header line plus one line per scene
    assert_eq!(lines.lines().count(), 7);
}

#[test]
fn score_of_ground_truth_is_clean() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&jd(d.path(), &["gen", "--seed", "3", "--count", "5", "--out", "s.jsonl"])), 0);
    for i in 0..5 {
        let o = jd(d.path(), &["score", "--scene", "s.jsonl", "--index", &i.to_string()]);
        assert_eq!(code(&o), 0);
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["nc"], 1.0, "scene {i}");
        assert_eq!(v["dac"], 1.0, "scene {i}");
        assert_eq!(v["collided"], false);
    }

    // a stationary rollout makes no progress, a short one is rejected
    fs::write(d.path().join("r.jsonl"), format!("{}\n", serde_json::to_string(&vec![[0.0, 0.0]; 8]).unwrap())).unwrap();
    let o = jd(d.path(), &["score", "--scene", "s.jsonl", "--rollouts", "r.jsonl", "--out", "o.jsonl"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(fs::read_to_string(d.path().join("o.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(v["ep"], 0.0);
    fs::write(d.path().join("short.jsonl"), "[[0.0, 0.0], [1.0, 0.0]]\n").unwrap();
    assert_eq!(code(&jd(d.path(), &["score", "--scene", "s.jsonl", "--rollouts", "short.jsonl"])), 2);
    assert_eq!(code(&jd(d.path(), &["score", "--scene", "s.jsonl", "--index", "9"])), 2);
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = jd(d.path(), &["gradcheck", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn train_resume_align_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&jd(p, &["gen", "--seed", "9", "--count", "6", "--out", "scenes.jsonl"])), 0);
    fs::write(p.join("small.toml"), SMALL).unwrap();

    let o = jd(p, &["train", "--config", "small.toml", "--out", "full"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.bin", "metrics.csv", "config.toml"] {
        assert!(p.join("full").join(f).exists(), "{f}");
    }

    // two epochs, then the rest from the checkpoint
    assert_eq!(code(&jd(p, &["train", "--config", "small.toml", "--out", "part", "--max-epochs", "2"])), 0);
    let o = jd(p, &["train", "--config", "small.toml", "--out", "part", "--resume", "part/checkpoint.bin"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let read = |f: &str| fs::read(p.join(f)).unwrap();
    assert_eq!(read("full/metrics.csv"), read("part/metrics.csv"));
    assert_eq!(read("full/checkpoint.bin"), read("part/checkpoint.bin"));

    let o = jd(p, &["align", "--config", "small.toml", "--checkpoint", "full/checkpoint.bin", "--out", "aligned"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = String::from_utf8(read("aligned/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let o = jd(p, &["eval", "--checkpoint", "aligned/checkpoint.bin", "--scenes", "scenes.jsonl", "--out", "eval.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&read("eval.json")).unwrap();
    assert_eq!(v["overall"]["episodes"], 6);

    // a corrupted checkpoint is a runtime error
    let mut bytes = read("full/checkpoint.bin");
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    fs::write(p.join("bad.bin"), bytes).unwrap();
    assert_eq!(code(&jd(p, &["eval", "--checkpoint", "bad.bin", "--scenes", "scenes.jsonl", "--out", "e.json"])), 2);
}

#[test]
fn ablate_writes_summary() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    let o = jd(
        p,
        &[
            "--threads", "1", "ablate", "--grid", "base,D", "--seeds", "0", "--train-count", "5", "--test-count", "3",
            "--config", "small.toml", "--out", "abl",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("abl/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(stdout(&o).contains("D: median success"));
}
