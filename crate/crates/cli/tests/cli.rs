use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
seed = 3
train_scenes = 2
val_scenes = 1

[data.scene]
views = 6
height = 32
width = 48

[model]
depth_hypotheses = 8

[train]
epochs = 1
samples_per_epoch = 2
val_refs_per_scene = 1
"#;

fn pvsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvsnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pvsnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    pvsnet(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (data, data2) = (root.join("data"), root.join("data2"));

    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data2)]);
    assert_eq!(files(&data), files(&data2), "same seed gives identical datasets");
    assert!(data.join("manifest.json").exists());
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(&data)]), 2, "non-empty --out needs --force");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--force"]);

    let run = root.join("run");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--mode", "best2", "--out", s(&run)]);
    for f in ["best.pvsw", "last.pvsw", "log.csv", "config.toml", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,split,loss,mae,lr"));
    assert_eq!(log.lines().count(), 3);
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("best-two"));
    assert_eq!(code(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]), 2, "existing run needs --resume");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--resume", "--epochs", "2"]);
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 5);

    let inf = root.join("inf");
    let ckpt = run.join("best.pvsw");
    ok(&["infer", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&inf), "--views", "3,5", "--dump-vis", "--label", "b"]);
    let sweep = fs::read_to_string(inf.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");
    assert!(sweep.lines().nth(1).unwrap().starts_with("b,3,"));
    let scene = fs::read_dir(inf.join("n5")).unwrap().next().unwrap().unwrap().path();
    assert!(scene.join("000_depth.pfm").exists() && scene.join("000_conf.pfm").exists());
    let vis = fs::read_dir(scene.join("vis")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("000_")).count();
    assert_eq!(vis, 4, "one visibility map per source");

    let report = root.join("report");
    fs::write(root.join("a.csv"), "variant,n,mae\na,3,0.4\na,5,0.3\n").unwrap();
    let table = ok(&["report", "--out", s(&report), s(&root.join("a.csv")), s(&inf.join("sweep.csv"))]);
    assert!(table.starts_with("n,a,b\n3,0.4,"), "{table}");

    let fused = root.join("fused");
    ok(&["fuse", "--data", s(&data), "--out", s(&fused), "--depths", s(&inf.join("n5"))]);
    let gt_fused = root.join("gt_fused");
    ok(&["fuse", "--data", s(&data), "--out", s(&gt_fused), "--gt"]);
    let eval = root.join("eval");
    ok(&["evaluate", "--data", s(&data), "--clouds", s(&gt_fused), "--out", s(&eval), "--save-gt"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(m["mean"]["accuracy"].as_f64().unwrap() < 2e-3, "{m}");

    // Ground truth scored against itself.
    let gt_clouds = root.join("gt_clouds");
    fs::create_dir_all(&gt_clouds).unwrap();
    for e in fs::read_dir(&eval).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("gt_") {
            fs::copy(&p, gt_clouds.join(id)).unwrap();
        }
    }
    let eval2 = root.join("eval2");
    ok(&["evaluate", "--data", s(&data), "--clouds", s(&gt_clouds), "--out", s(&eval2)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval2.join("metrics.json")).unwrap()).unwrap();
    // PLY stores single-precision coordinates.
    assert!(m["mean"]["accuracy"].as_f64().unwrap() < 1e-6, "{m}");
    assert!(m["mean"]["completeness"].as_f64().unwrap() < 1e-6, "{m}");
    assert_eq!(m["mean"]["f1"].as_f64(), Some(100.0));
}

#[test]
fn usage_and_data_errors_exit_with_their_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let missing = root.join("nope.toml");
    assert_eq!(code(&["gen-data", "--config", s(&missing), "--out", s(&root.join("d"))]), 2);
    fs::write(root.join("bad.toml"), "[model]\ndepth_hypotheses = 1\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&root.join("bad.toml")), "--out", s(&root.join("d"))]), 2);
    assert!(!root.join("d").exists(), "rejected before any output");
    assert_eq!(code(&["train", "--data", s(&root.join("no-data")), "--out", s(&root.join("r"))]), 3);
    assert_eq!(code(&["train", "--data", s(root), "--out", s(&root.join("r2")), "--resume"]), 2);
    assert_eq!(code(&["fuse", "--data", s(root), "--out", s(&root.join("f"))]), 2, "needs --depths or --gt");
    assert_eq!(code(&["infer", "--data", s(root), "--ckpt", "x.pvsw", "--out", s(&root.join("i")), "--views", "1", "--config", s(&root.join("bad.toml"))]), 2);
}
