use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tempalign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempalign"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TEMPALIGN_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn synth(dir: &Path) {
    let o = tempalign(
        &[
            "synth",
            "--out",
            "data",
            "--n-train",
            "60",
            "--n-eval",
            "20",
            "--seed",
            "2",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn frame_info_hand_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = tempalign(
        &["frame-info", "--t", "300", "--eta-k", "3", "--eta-s", "3"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("H=30 S=30 W=10"), "{}", stdout(&o));
}

#[test]
fn help_version_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["train-toy", "--help"]] {
        assert_eq!(code(&tempalign(args, dir.path())), 0, "{args:?}");
    }
    let help = stdout(&tempalign(&["train-toy", "--help"], dir.path()));
    for flag in [
        "--lr",
        "--epochs",
        "--max-steps",
        "--eta-k",
        "--symmetric-loss",
        "--workers",
        "--config",
    ] {
        assert!(help.contains(flag), "help lacks {flag}");
    }
    assert_eq!(code(&tempalign(&["nope"], dir.path())), 1);
    assert_eq!(code(&tempalign(&["frame-info", "--t", "x"], dir.path())), 1);
    assert_eq!(
        code(&tempalign(
            &["frame-info", "--t", "30", "--eta-k", "-1"],
            dir.path()
        )),
        1
    );
    assert_eq!(code(&tempalign(&["synth"], dir.path())), 1);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tempalign(&["gradcheck", "--seed", "0"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PASS"));
    let o = tempalign(
        &["gradcheck", "--pipeline", "--seeds", "2", "--out", "g.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 2);
    // an impossible tolerance is a numeric failure
    let o = tempalign(&["gradcheck", "--tolerance", "0"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn score_dimension_mismatch_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = tempalign(
        &[
            "score",
            "--audio",
            "data/speech.cesf",
            "--text",
            "data/text.cesf",
            "--audio-id",
            "a-train00000",
            "--text-id",
            "t-train00000",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension mismatch"));
    let o = tempalign(&["inspect", "data/manifest.jsonl"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn score_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = tempalign(
        &[
            "score",
            "--audio",
            "data/music.cesf",
            "--text",
            "data/text.cesf",
            "--audio-id",
            "a-train00001",
            "--text-id",
            "t-train00001",
            "--dump",
            "d.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let line = stdout(&o);
    assert!(line.starts_with("H=3 S=3 W=10 r_K="), "{line}");
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d.json")).unwrap()).unwrap();
    assert_eq!(dump["similarity"].as_array().unwrap().len(), 10);
    assert_eq!(dump["config"]["eta_kernel"], 3.0);
}

#[test]
fn train_eval_round_trip_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let train = |out: &str, workers: &str| {
        let o = tempalign(
            &[
                "train-toy",
                "--data",
                "data",
                "--out",
                out,
                "--dim",
                "8",
                "--epochs",
                "3",
                "--workers",
                workers,
            ],
            d,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("a", "1");
    train("b", "1");
    train("c", "3");
    for f in ["model.ckpt", "report.jsonl"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read(d.join("a/model.ckpt")).unwrap(),
        fs::read(d.join("c/model.ckpt")).unwrap()
    );

    let report = fs::read_to_string(d.join("a/report.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    let o = tempalign(
        &[
            "eval",
            "--audio",
            "data/music.cesf",
            "--speech",
            "data/speech.cesf",
            "--text",
            "data/text.cesf",
            "--manifest",
            "data/manifest.jsonl",
            "--checkpoint",
            "a/model.ckpt",
            "--ks",
            "1,5",
            "--out",
            "ev.json",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ev.json")).unwrap()).unwrap();
    assert_eq!(
        ev["reports"][0]["recalls"]["1"],
        last["recalls"]["t2a"]["1"]
    );
    assert_eq!(
        ev["reports"][1]["recalls"]["5"],
        last["recalls"]["a2t"]["5"]
    );
}

#[test]
fn divergence_exits_3_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = tempalign(
        &[
            "train-toy",
            "--out",
            "run",
            "--dim",
            "16",
            "--epochs",
            "3",
            "--normalize",
            "false",
            "--lr",
            "1e150",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(dir.path().join("run/model.ckpt").exists());
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), "eta_kernel = 6.0\neta_stride = 2.0\n").unwrap();
    let o = tempalign(&["--config", "c.toml", "frame-info", "--t", "30"], d);
    assert!(stdout(&o).contains("H=6 S=2 W=13"), "{}", stdout(&o));
    let o = tempalign(
        &[
            "--config",
            "c.toml",
            "frame-info",
            "--t",
            "30",
            "--eta-s",
            "3",
        ],
        d,
    );
    assert!(stdout(&o).contains("H=6 S=3 W=9"), "{}", stdout(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_tempalign"))
        .args(["frame-info", "--t", "30"])
        .current_dir(d)
        .env("TEMPALIGN_CONFIG", "c.toml")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("H=6 S=2"));
    fs::write(d.join("bad.toml"), "eta_kernal = 6.0\n").unwrap();
    assert_eq!(
        code(&tempalign(
            &["--config", "bad.toml", "frame-info", "--t", "30"],
            d
        )),
        2
    );
}

#[test]
fn batch_score_and_eval_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = tempalign(
        &[
            "batch-score",
            "--audio",
            "data/music.cesf",
            "--text",
            "data/text.cesf",
            "--manifest",
            "data/manifest.jsonl",
            "--workers",
            "4",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["scores"].as_array().unwrap().len(), 20);
    assert_eq!(v["audio_ids"][0], "a-eval00000");
    let single = tempalign(
        &[
            "batch-score",
            "--audio",
            "data/music.cesf",
            "--text",
            "data/text.cesf",
            "--manifest",
            "data/manifest.jsonl",
        ],
        d,
    );
    assert_eq!(
        stdout(&single).replace("\"workers\": 1", "\"workers\": 4"),
        stdout(&o)
    );

    let o = tempalign(
        &[
            "eval",
            "--audio",
            "data/music.cesf",
            "--text",
            "data/text.cesf",
            "--manifest",
            "data/manifest.jsonl",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("metric  T2A"));
}
