use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchtrack")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn set(k: &str, v: impl AsRef<str>) -> String {
    format!("{k}={}", v.as_ref())
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn info_reports_reference_budget() {
    let out = String::from_utf8(run_ok(&["info"]).stdout).unwrap();
    assert!(out.contains("params: 8096\n"), "{out}");
    assert!(out.contains("flops@32: "));
    let aff = String::from_utf8(run_ok(&["info", "--set", "affine=true"]).stdout).unwrap();
    assert!(aff.contains("params: 8216\n"), "{aff}");
}

#[test]
fn version_and_help_exit_zero() {
    let v = run(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains("checkpoint format 1"));
    assert_eq!(run(&["track", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(&dir.path().join("nope.cfg"));
    assert_eq!(run(&["synth", "--config", &missing]).status.code(), Some(1));
    assert_eq!(run(&["info", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(run(&["info", "--set", "novalue"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let ck = p(&dir.path().join("absent.selc"));
    assert_eq!(run(&["info", "--set", &set("checkpoint", ck)]).status.code(), Some(2));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("synth.cfg");
    std::fs::write(&cfg, format!("pairs = 3\nclips = 1\nclip_len = 4\nseed = 7\nout_dir = {}\n", data.display())).unwrap();
    run_ok(&["synth", "--config", &p(&cfg)]);
    let again = root.join("again");
    run_ok(&["synth", "--config", &p(&cfg), "--set", &set("out_dir", p(&again))]);
    for f in ["pair_0000_a.pgm", "pair_0002_b.pgm", "pair_0001_H.txt"] {
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let manifest = p(&data.join("manifest.json"));
    run_ok(&["label", "--set", &set("manifest", &manifest), "--set", &set("out_dir", p(&root.join("labels")))]);
    assert!(std::fs::read_dir(root.join("labels")).unwrap().count() >= 3);

    let train = |out: &str| {
        run_ok(&[
            "train",
            "--set", &set("data", &manifest),
            "--set", &set("out_dir", p(&root.join(out))),
            "--set", "epochs=1",
            "--set", "patch_size=32",
            "--set", "batch_size=4",
            "--set", "max_per_pair=5",
            "--set", "seed=4",
        ]);
        std::fs::read(root.join(out).join("final.selc")).unwrap()
    };
    assert_eq!(train("run1"), train("run2"));
    let ck = p(&root.join("run1/final.selc"));

    let info = String::from_utf8(run_ok(&["info", "--set", &set("checkpoint", &ck)]).stdout).unwrap();
    assert!(info.contains("params: 8096"));

    let img_a = p(&data.join("pair_0000_a.pgm"));
    let img_b = p(&data.join("pair_0000_b.pgm"));
    let track = |extra: &[&str]| {
        let mut args = vec!["track", "--set"];
        let c = set("checkpoint", &ck);
        let a = set("img_a", &img_a);
        let b = set("img_b", &img_b);
        args.extend([c.as_str(), "--set", a.as_str(), "--set", b.as_str()]);
        for e in extra {
            args.extend(["--set", e]);
        }
        String::from_utf8(run_ok(&args).stdout).unwrap()
    };
    let single = track(&["mode=single", "patch_side=32"]);
    let pyramid = track(&["mode=pyramid", "level1_side=32"]);
    assert!(single.starts_with("x_a\ty_a\tx_b\ty_b"), "{single}");
    assert!(single.lines().count() > 1);
    assert_eq!(single, pyramid);
    let coarse = track(&["mode=pyramid", "level1_side=64", "max_points=20"]);
    assert!(coarse.lines().count() <= 21);

    let stream = track_stream(root, &ck, &manifest);
    assert!(stream.contains("tracks"));

    let report = root.join("eval.json");
    run_ok(&["eval", "--set", &set("checkpoint", &ck), "--set", &set("manifest", &manifest), "--set", &set("output", p(&report))]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["mma"]["accuracy"].as_array().unwrap().len(), 3);
}

fn track_stream(root: &Path, ck: &str, manifest: &str) -> String {
    let stats = root.join("stats.json");
    run_ok(&[
        "track",
        "--set", &set("checkpoint", ck),
        "--set", "mode=stream",
        "--set", &set("manifest", manifest),
        "--set", "budget=30",
        "--set", &set("stats", p(&stats)),
    ]);
    std::fs::read_to_string(stats).unwrap()
}
