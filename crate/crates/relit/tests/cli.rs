//! End-to-end exercises of the command-line binary: the full workflow on a
//! tiny dataset, plus exit-code behavior for bad invocations.

use std::path::Path;
use std::process::{Command, Output};

use relit::io::pfm::read_pfm;
use relit::io::png::{read_label_png, read_png};

fn relit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relit"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn ok(args: &[&str]) -> Output {
    let out = relit(args);
    assert!(
        out.status.success(),
        "`relit {}` failed:\n{}{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    relit(args).status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn end_to_end_workflow_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = s(&dir.path().join("data"));
    let ckpt = s(&dir.path().join("ckpt"));

    ok(&["gen", "--views", "3", "--res", "24x16", "--out", &data]);
    assert!(dir.path().join("data/manifest.json").exists());

    ok(&["train", "--data", &data, "--iters", "8", "--out", &ckpt]);
    for f in ["model.ckpt", "config.json", "train.log"] {
        assert!(dir.path().join("ckpt").join(f).exists(), "missing {f}");
    }

    let view = s(&dir.path().join("view.png"));
    let alb = s(&dir.path().join("alb.png"));
    let nrm = s(&dir.path().join("n.pfm"));
    let dep = s(&dir.path().join("d.pfm"));
    let shd = s(&dir.path().join("sh.png"));
    let sem = s(&dir.path().join("sem.png"));
    ok(&[
        "render", "--ckpt", &ckpt, "--data", &data, "--frame", "1", "--out", &view, "--albedo",
        &alb, "--normal", &nrm, "--depth", &dep, "--shadow", &shd, "--semantic", &sem,
    ]);
    let img = read_png(dir.path().join("view.png").as_path(), false).unwrap();
    assert_eq!((img.width, img.height, img.channels), (24, 16, 3));
    let n = read_pfm(dir.path().join("n.pfm").as_path()).unwrap();
    assert_eq!((n.width, n.height, n.channels), (24, 16, 3));
    let d = read_pfm(dir.path().join("d.pfm").as_path()).unwrap();
    assert_eq!(d.channels, 1);
    assert!(d.data.iter().all(|v| v.is_finite() && *v >= 0.0));
    let (_, _, labels) = read_label_png(dir.path().join("sem.png").as_path()).unwrap();
    assert_eq!(labels.len(), 24 * 16);

    let report = s(&dir.path().join("report.json"));
    ok(&["eval", "--ckpt", &ckpt, "--data", &data, "--frames", "0,2", "--out", &report]);
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["frames"].as_array().unwrap().len(), 2);
    assert!(v["mean"]["psnr"].as_f64().unwrap().is_finite());
    assert!(!v["config_hash"].as_str().unwrap().is_empty());
    assert!(!v["build_id"].as_str().unwrap().is_empty());

    let rig = dir.path().join("rig.json");
    std::fs::write(
        &rig,
        r#"{"spots":[{"position":[0,0,3],"direction":[0,0,-1],"color":[5,5,4],"exponent":8}]}"#,
    )
    .unwrap();
    let night = s(&dir.path().join("night.png"));
    ok(&["night", "--ckpt", &ckpt, "--data", &data, "--out", &night, "--lights", &s(&rig)]);

    let ins = s(&dir.path().join("ins.png"));
    ok(&["insert", "--ckpt", &ckpt, "--data", &data, "--out", &ins, "--cube", "0.8,0,0,15"]);
    assert!(dir.path().join("ins.png").exists());
}

#[test]
fn same_seed_relights_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = s(&dir.path().join("data"));
    let ckpt = s(&dir.path().join("ckpt"));
    ok(&["gen", "--views", "2", "--res", "16x12", "--out", &data]);
    ok(&["train", "--data", &data, "--iters", "4", "--out", &ckpt]);

    let a = s(&dir.path().join("a.png"));
    let b = s(&dir.path().join("b.png"));
    for out in [&a, &b] {
        ok(&[
            "relight", "--ckpt", &ckpt, "--data", &data, "--out", out, "--sun-azimuth", "30",
            "--seed", "5",
        ]);
    }
    let ba = std::fs::read(dir.path().join("a.png")).unwrap();
    let bb = std::fs::read(dir.path().join("b.png")).unwrap();
    assert_eq!(ba, bb, "same-seed relights differ");
}

#[test]
fn training_twice_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = s(&dir.path().join("data"));
    ok(&["gen", "--views", "2", "--res", "16x12", "--out", &data]);
    let c1 = s(&dir.path().join("c1"));
    let c2 = s(&dir.path().join("c2"));
    ok(&["train", "--data", &data, "--iters", "5", "--seed", "9", "--out", &c1]);
    ok(&["train", "--data", &data, "--iters", "5", "--seed", "9", "--out", &c2]);
    let a = std::fs::read(dir.path().join("c1/model.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("c2/model.ckpt")).unwrap();
    assert_eq!(a, b, "same-seed checkpoints differ");
}

#[test]
fn config_file_sets_training_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = s(&dir.path().join("data"));
    ok(&["gen", "--views", "2", "--res", "16x12", "--out", &data]);
    let cfg = dir.path().join("tc.json");
    std::fs::write(&cfg, r#"{"iterations": 3, "rays_per_batch": 32, "seed": 4}"#).unwrap();
    let ckpt = s(&dir.path().join("ckpt"));
    ok(&["--config", &s(&cfg), "train", "--data", &data, "--out", &ckpt]);
    let rc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ckpt/config.json")).unwrap())
            .unwrap();
    assert_eq!(rc["train"]["iterations"], 3);
    assert_eq!(rc["train"]["rays_per_batch"], 32);
    assert_eq!(rc["train"]["seed"], 4);
}

#[test]
fn bad_invocations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nope"));
    let out = s(&dir.path().join("x.png"));
    // Unknown flags and subcommands are usage errors.
    assert_eq!(code(&["render", "--nonsense"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    // Bad argument syntax.
    assert_eq!(code(&["gen", "--views", "2", "--res", "banana", "--out", &missing]), 1);
    assert_eq!(code(&["gen", "--views", "0", "--res", "8x8", "--out", &missing]), 1);
    // Missing user inputs.
    assert_eq!(code(&["train", "--data", &missing, "--out", &missing]), 1);
    assert_eq!(code(&["render", "--ckpt", &missing, "--data", &missing, "--out", &out]), 1);

    // A real dataset and checkpoint, then out-of-range and conflicting args.
    let data = s(&dir.path().join("data"));
    let ckpt = s(&dir.path().join("ckpt"));
    ok(&["gen", "--views", "2", "--res", "16x12", "--out", &data]);
    ok(&["train", "--data", &data, "--iters", "2", "--out", &ckpt]);
    assert_eq!(
        code(&["render", "--ckpt", &ckpt, "--data", &data, "--frame", "9", "--out", &out]),
        1
    );
    assert_eq!(code(&["insert", "--ckpt", &ckpt, "--data", &data, "--out", &out]), 1);
    assert_eq!(
        code(&[
            "insert", "--ckpt", &ckpt, "--data", &data, "--out", &out, "--cube", "-1,0,0"
        ]),
        1
    );
    assert_eq!(
        code(&[
            "relight", "--ckpt", &ckpt, "--data", &data, "--out", &out, "--sun-color", "r,g,b"
        ]),
        1
    );
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    let out = relit(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "train", "render", "relight", "night", "insert", "eval", "gradcheck"] {
        assert!(text.contains(sub), "help misses `{sub}`");
    }
}

#[test]
fn gradcheck_prints_a_scenario_table() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("training_objective"), "table misses the full objective:\n{text}");
    assert!(text.lines().filter(|l| l.contains("pass")).count() >= 10, "too few rows:\n{text}");
    assert!(!text.contains("FAIL"), "unexpected failure:\n{text}");
}
