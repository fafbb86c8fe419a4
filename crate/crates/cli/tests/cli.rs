use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dider(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dider"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("DIDER_TRAIN_EPOCHS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_MODEL: &[&str] = &[
    "--set",
    "train.encoder_hidden=8",
    "--set",
    "train.decoder_hidden=8",
    "--set",
    "train.val_samples=4",
];

fn generate(dir: &Path, name: &str, samples: &str, seed: &str) {
    ok(&dider(dir, &["generate", "--out", name, "--samples", samples, "--seed", seed, "--horizon", "12"]));
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "a", "100", "1");
    generate(dir.path(), "b", "100", "1");
    for f in ["manifest.json", "states.f32", "edges.u8"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert!(dir.path().join("a/resolved_config.txt").is_file());
}

#[test]
fn zero_samples_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dider(dir.path(), &["generate", "--out", "x", "--samples", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "[sim]\nbogus = 1\n").unwrap();
    let out = dider(dir.path(), &["--config", "run.cfg", "generate", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dider(dir.path(), &["--set", "train.nothing=1", "generate", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dider(dir.path(), &["train", "--data", "nowhere", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dider(dir.path(), &["train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "data", "20", "3");
    let mut args = vec!["train", "--data", "data", "--out", "run", "--epochs", "1", "--batch-size", "8"];
    args.extend_from_slice(SMALL_MODEL);
    ok(&dider(d, &args));
    for f in ["metrics.csv", "last.ckpt", "best.ckpt", "resolved_config.txt"] {
        assert!(d.join("run").join(f).is_file(), "{f} missing");
    }

    let eval = |out: &str| {
        dider(
            d,
            &["eval", "--data", "data", "--checkpoint", "run/best.ckpt", "--out", out, "--split", "train", "--horizons", "1,3"],
        )
    };
    ok(&eval("ev1"));
    ok(&eval("ev2"));
    for f in ["report.txt", "report.csv", "timelines.csv", "resolved_config.txt"] {
        assert!(d.join("ev1").join(f).is_file(), "{f} missing");
    }
    assert_eq!(
        fs::read(d.join("ev1/report.csv")).unwrap(),
        fs::read(d.join("ev2/report.csv")).unwrap()
    );

    let out = dider(
        d,
        &["eval", "--data", "data", "--checkpoint", "run/best.ckpt", "--out", "ev3", "--horizons", "60"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = dider(d, &["eval", "--data", "data", "--checkpoint", "run/none.ckpt", "--out", "ev4"]);
    assert_eq!(out.status.code(), Some(2));

    ok(&dider(
        d,
        &["export-timelines", "--data", "data", "--checkpoint", "run/last.ckpt", "--out", "tl", "--split", "all"],
    ));
    let csv = fs::read_to_string(d.join("tl/timelines.csv")).unwrap();
    assert!(csv.starts_with("sample_id,edge_src,edge_dst,t_start,duration,edge_type"));
    assert!(d.join("tl/timelines/sample_00000.svg").is_file());
}

#[test]
fn baseline_mode_matches_forced_unit_durations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "data", "16", "5");
    let common = ["--data", "data", "--epochs", "2", "--batch-size", "4"];
    let mut a = vec!["train", "--out", "dnri", "--mode", "dnri"];
    a.extend_from_slice(&common);
    a.extend_from_slice(SMALL_MODEL);
    let mut b = vec!["train", "--out", "forced", "--mode", "dider", "--force-duration", "1"];
    b.extend_from_slice(&common);
    b.extend_from_slice(SMALL_MODEL);
    ok(&dider(d, &a));
    ok(&dider(d, &b));
    let la = fs::read_to_string(d.join("dnri/metrics.csv")).unwrap();
    let lb = fs::read_to_string(d.join("forced/metrics.csv")).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.lines().count(), 3);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "data", "16", "9");
    let run = |out: &str, epochs: &str, resume: bool| {
        let mut args = vec!["train", "--data", "data", "--out", out, "--epochs", epochs, "--batch-size", "4"];
        args.extend_from_slice(SMALL_MODEL);
        if resume {
            args.push("--resume");
        }
        ok(&dider(d, &args));
    };
    run("full", "3", false);
    run("split", "2", false);
    run("split", "3", true);
    assert_eq!(
        fs::read_to_string(d.join("full/metrics.csv")).unwrap(),
        fs::read_to_string(d.join("split/metrics.csv")).unwrap()
    );
    assert_eq!(fs::read(d.join("full/last.ckpt")).unwrap(), fs::read(d.join("split/last.ckpt")).unwrap());
}

#[test]
fn environment_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dider"))
        .arg("--workdir")
        .arg(dir.path())
        .args(["generate", "--out", "data", "--horizon", "12"])
        .env("DIDER_SIM_N_SAMPLES", "7")
        .output()
        .unwrap();
    ok(&out);
    let text = fs::read_to_string(dir.path().join("data/resolved_config.txt")).unwrap();
    assert!(text.contains("n_samples = 7"), "{text}");
}
