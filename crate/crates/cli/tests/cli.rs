use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "total_iters = 4\nwarmup_iters = 2\ncheckpoint_every = 2\nwidth_multiplier = 0.03125\nmlp_dim = 16\n";

fn ddf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.clone(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Generates a small dataset and writes the tiny config; returns (data, config).
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let o = ddf(&[
        "gen-data",
        "--out",
        p(&data),
        "--n-source",
        "6",
        "--n-target",
        "6",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (data, cfg)
}

#[test]
fn help_lists_every_subcommand() {
    let o = ddf(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "gen-data",
        "train",
        "eval",
        "distance",
        "export-features",
        "reproduce",
    ] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let o = ddf(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn conflicting_variants_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let out = dir.path().join("run");
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--preset",
        "ins-simmax",
        "--preset",
        "ins-td",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("ins_td"), "{}", stderr(&o));
    assert!(!out.join("final.json").exists());
}

#[test]
fn bad_config_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "total_iters = 4\nlearning_rate = 0.1\n").unwrap();
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&dir.path().join("r")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    let o = ddf(&[
        "gen-data",
        "--out",
        p(&dir.path().join("g")),
        "--fog",
        "1.5",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&dir.path().join("r")),
        "--preset",
        "nope",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddf(&[
        "train",
        "--source",
        p(&dir.path().join("absent")),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn pipeline_is_reproducible_and_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    assert!(data.join("run_manifest.json").is_file());
    let before = tree_bytes(&data);

    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = ddf(&[
            "train",
            "--source",
            p(&data),
            "--out",
            p(&out),
            "--config",
            p(&cfg),
            "--preset",
            "ddf",
            "--seed",
            "5",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(out.join("final.json").is_file());
        assert!(out.join("checkpoints").join("ckpt_000002.json").is_file());
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
        assert_eq!(m["command"], "train");
        assert_eq!(m["seed"], 5);
        assert_eq!(m["dataset_hashes"].as_object().unwrap().len(), 1);
        assert!(m["finished_at"].is_string());
        metrics.push(fs::read_to_string(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0].lines().count(), 5);

    let ckpt = dir.path().join("a").join("final.json");
    let ckpt_bytes = fs::read(&ckpt).unwrap();
    let report = dir.path().join("eval.json");
    let o = ddf(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&data),
        "--out",
        p(&report),
        "--domain",
        "target",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["num_images"], 6);
    assert!(dir.path().join("eval.json.manifest.json").is_file());

    let dist = dir.path().join("dist.json");
    let o = ddf(&[
        "distance",
        "--checkpoint",
        p(&ckpt),
        "--source",
        p(&data),
        "--target",
        p(&data),
        "--level",
        "global",
        "--out",
        p(&dist),
    ]);
    // six images per domain is below the PAD minimum
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at least"), "{}", stderr(&o));

    let png = dir.path().join("heat").join("sha.png");
    let first = fs::read_dir(data.join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for stream in ["sha", "pri"] {
        let o = ddf(&[
            "export-features",
            "--checkpoint",
            p(&ckpt),
            "--image",
            p(&first),
            "--stream",
            stream,
            "--out",
            p(&png),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let img = image_dims(&png);
        assert_eq!(img, (128, 128));
    }

    assert_eq!(before, tree_bytes(&data));
    assert_eq!(ckpt_bytes, fs::read(&ckpt).unwrap());
}

fn image_dims(path: &Path) -> (u32, u32) {
    // PNG IHDR: width and height are big-endian u32 at bytes 16..24
    let b = fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    (
        u32::from_be_bytes(b[16..20].try_into().unwrap()),
        u32::from_be_bytes(b[20..24].try_into().unwrap()),
    )
}

#[test]
fn distance_on_enough_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ddf(&[
        "gen-data",
        "--out",
        p(&data),
        "--n-source",
        "24",
        "--n-target",
        "24",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY.replace("total_iters = 4", "total_iters = 2")).unwrap();
    let run = dir.path().join("run");
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&run),
        "--config",
        p(&cfg),
        "--preset",
        "no-da",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("d.json");
    let o = ddf(&[
        "distance",
        "--checkpoint",
        p(&run.join("final.json")),
        "--source",
        p(&data),
        "--target",
        p(&data),
        "--level",
        "global",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let pad = r["pad_global"].as_f64().unwrap();
    assert!((0.0..=2.0).contains(&pad));
    assert!(r["emd_global"].as_f64().unwrap() >= 0.0);
}

#[test]
fn resume_continues_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let full = dir.path().join("full");
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&full),
        "--config",
        p(&cfg),
        "--preset",
        "baseline",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let part = dir.path().join("part");
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&part),
        "--config",
        p(&cfg),
        "--preset",
        "baseline",
    ]);
    assert_eq!(code(&o), 0);
    let mid = part.join("checkpoints").join("ckpt_000002.json");
    let o = ddf(&[
        "train",
        "--source",
        p(&data),
        "--out",
        p(&part),
        "--config",
        p(&cfg),
        "--preset",
        "baseline",
        "--resume",
        p(&mid),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(full.join("metrics.csv")).unwrap(),
        fs::read_to_string(part.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("final.json")).unwrap(),
        fs::read(part.join("final.json")).unwrap()
    );
}

#[test]
fn reproduce_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY.replace("total_iters = 4", "total_iters = 3")).unwrap();
    let out = dir.path().join("repro");
    let o = ddf(&[
        "reproduce",
        "--seed",
        "3",
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let rows = s["results"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["preset"].as_str().unwrap()).collect();
    assert_eq!(names, ["no-da", "baseline", "ddf"]);
    for r in rows {
        assert_eq!(r["seed"], 3);
        assert!(r.get("target_map").is_some() && r.get("pad_global").is_some());
    }
    let table = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(table.contains("PAD_glob") && table.contains("EMD_glob") && table.lines().count() == 4);
    assert!(out.join("run_manifest.json").is_file());
    for p in ["no-da", "baseline", "ddf"] {
        assert!(out.join("runs").join(p).join("final.json").is_file());
    }
}
