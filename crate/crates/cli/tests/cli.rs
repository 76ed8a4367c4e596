//! End-to-end runs of the installed binary: every subcommand against a small
//! synthetic dataset, plus the contract points (exit codes, error JSON,
//! resolved configs, reruns).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aircast"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn aircast")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "aircast {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// stderr of a failed run parsed as the error document.
fn error_json(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1), "expected a failed run");
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
        panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr))
    })
}

const SYNTH: &str = r#"{
  "synth": {
    "days": 15,
    "grid": {"n_lat": 8, "n_lon": 8, "resolution": 0.25},
    "met_channels": 5,
    "ems_channels": 3,
    "cities": [{"name": "east", "stations": 5, "origin_lat": 30.6, "origin_lon": 120.9}],
    "gap_fraction": 0.0
  }
}"#;

const TRAIN: &str = r#"{
  "model": {
    "d_model": 12, "temb_dim": 4, "mlp_hidden": 24, "resnet_depth": 1, "resnet_width": 8,
    "quantiles": [0.1, 0.5, 0.9], "horizon_steps": 12,
    "met_channels": 5, "ems_channels": 3, "n_stations": 5,
    "grid_n_lat": 8, "grid_n_lon": 8, "seed": 0
  },
  "train": {"epochs": 3, "lr": 0.002, "batch_size": 8, "seed": 1},
  "train_stride": 2
}"#;

/// Build the shared fixture once per directory: dataset, 6-hour checkpoint,
/// bundled checkpoint with interpolator.
struct Fixture {
    _keep: tempfile::TempDir,
    data: PathBuf,
    ckpt_6h: PathBuf,
    ckpt_full: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    write(&root.join("synth.json"), SYNTH);
    write(&root.join("train.json"), TRAIN);
    write(
        &root.join("interp.json"),
        r#"{"train": {"epochs": 2, "lr": 0.002, "batch_size": 8, "seed": 1}, "train_stride": 3}"#,
    );
    let s = |p: &Path| p.to_str().unwrap().to_string();
    run_ok(&["synth", "--config", &s(&root.join("synth.json")), "--seed", "9", "--out", &s(&root.join("s"))]);
    let data = root.join("s/data");
    run_ok(&[
        "train", "--config", &s(&root.join("train.json")),
        "--data", &s(&data), "--city", "east", "--out", &s(&root.join("t")),
    ]);
    run_ok(&[
        "train-interp", "--config", &s(&root.join("interp.json")),
        "--data", &s(&data), "--city", "east",
        "--checkpoint", &s(&root.join("t/checkpoint")), "--out", &s(&root.join("ti")),
    ]);
    Fixture {
        _keep: dir,
        data,
        ckpt_6h: root.join("t/checkpoint"),
        ckpt_full: root.join("ti/checkpoint"),
        root,
    }
}

#[test]
fn pipeline_runs_and_reruns_reproduce_byte_for_byte() {
    let fx = fixture();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // synth twice with the same seed: identical datasets
    let s2 = fx.root.join("s2");
    run_ok(&["synth", "--config", &s(&fx.root.join("synth.json")), "--seed", "9", "--out", &s(&s2)]);
    assert_identical_trees(&fx.root.join("s"), &s2);

    // every run directory carries a resolved config naming its command
    let cfg = read(&fx.root.join("t/config.json"));
    assert!(cfg.contains("\"command\": \"train\""));
    assert!(cfg.contains("\"model\""), "derived model written back:\n{cfg}");
    assert!(read(&fx.root.join("t/run.log")).ends_with("done: train\n"));

    // rerun train purely from the embedded config: bit-identical artifacts
    let t2 = fx.root.join("t2");
    run_ok(&["train", "--config", &s(&fx.root.join("t/config.json")), "--out", &s(&t2)]);
    assert_identical_trees(&fx.root.join("t"), &t2);

    // forecast from the 6-hour checkpoint steps at 6-hour resolution
    let f6 = fx.root.join("f6");
    run_ok(&[
        "forecast", "--data", &s(&fx.data), "--city", "east",
        "--checkpoint", &s(&fx.ckpt_6h), "--anchor", "276", "--steps", "4", "--out", &s(&f6),
    ]);
    let csv = read(&f6.join("forecast.csv"));
    assert_eq!(csv.lines().count(), 1 + 4 * 5 * 6 * 3, "4 frames, 5 stations, 6 pollutants, 3 quantiles");
    assert!(read(&f6.join("run.log")).contains("six-hour resolution"));

    // the bundled checkpoint upgrades the same command to hourly output
    let fh = fx.root.join("fh");
    run_ok(&[
        "forecast", "--data", &s(&fx.data), "--city", "east",
        "--checkpoint", &s(&fx.ckpt_full), "--anchor", "276", "--steps", "4", "--out", &s(&fh),
    ]);
    let csv = read(&fh.join("forecast.csv"));
    assert_eq!(csv.lines().count(), 1 + 24 * 5 * 6 * 3, "24 hourly frames");
    assert!(read(&fh.join("run.log")).contains("hourly resolution"));

    // evaluate writes the report set; plot renders it
    let e = fx.root.join("e");
    run_ok(&[
        "evaluate", "--data", &s(&fx.data), "--city", "east",
        "--checkpoint", &s(&fx.ckpt_6h), "--steps", "4", "--out", &s(&e),
    ]);
    for name in ["report.json", "report.csv", "coverage.json", "summary.json"] {
        assert!(e.join(name).is_file(), "missing {name}");
    }
    let p = fx.root.join("p");
    run_ok(&["plot", "--report", &s(&e.join("report.json")), "--out", &s(&p)]);
    for m in ["RMSE", "MAE", "R", "rRMSE", "MRE"] {
        assert!(p.join(format!("plot_{m}.csv")).is_file());
        let svg = read(&p.join(format!("plot_{m}.svg")));
        assert!(svg.starts_with("<svg ") && svg.ends_with("</svg>\n"));
    }

    // rerun evaluate from its embedded config: bit-identical
    let e2 = fx.root.join("e2");
    run_ok(&["evaluate", "--config", &s(&e.join("config.json")), "--out", &s(&e2)]);
    assert_identical_trees(&e, &e2);
}

fn assert_identical_trees(a: &Path, b: &Path) {
    let list = |d: &Path| {
        let mut v = Vec::new();
        collect(d, d, &mut v);
        v.sort();
        v
    };
    fn collect(root: &Path, d: &Path, out: &mut Vec<String>) {
        for entry in fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                collect(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_str().unwrap().to_string());
            }
        }
    }
    let (fa, fb) = (list(a), list(b));
    assert_eq!(fa, fb, "paths differ between {} and {}", a.display(), b.display());
    for rel in fa {
        let (ba, bb) = (fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap());
        assert_eq!(ba, bb, "{rel} differs between runs");
    }
}

#[test]
fn ablate_writes_one_report_per_arm() {
    let fx = fixture();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    write(
        &fx.root.join("ab.json"),
        r#"{"train": {"epochs": 2, "lr": 0.002, "batch_size": 8, "seed": 1},
            "ablation": {"train_stride": 4, "init_stride": 6, "max_inits": 4, "steps": 2},
            "seeds": [5]}"#,
    );
    let a = fx.root.join("a");
    run_ok(&[
        "ablate", "--config", &s(&fx.root.join("ab.json")),
        "--data", &s(&fx.data), "--city", "east", "--arms", "ALL,STN_ONLY", "--out", &s(&a),
    ]);
    let mut reports: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            n.starts_with("report_").then_some(n)
        })
        .collect();
    reports.sort();
    assert_eq!(reports, ["report_ALL.json", "report_STN_ONLY.json"]);
    let master: serde_json::Value = serde_json::from_str(&read(&a.join("ablation.json"))).unwrap();
    assert_eq!(master["arms"].as_array().unwrap().len(), 2);
    assert_eq!(master["arms"][0]["exp_id"], "ALL");
    assert_eq!(master["seeds"], serde_json::json!([5]));
}

#[test]
fn failures_exit_1_with_an_error_document() {
    let tmp = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // missing checkpoint names the absent artifact
    let out = run(&[
        "forecast", "--data", &s(&tmp.path().join("nope")), "--city", "east",
        "--checkpoint", &s(&tmp.path().join("ckpt")), "--anchor", "276",
        "--out", &s(&tmp.path().join("o1")),
    ]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "missing_artifact");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope"));

    // invalid configuration value
    let out = run(&[
        "evaluate", "--data", "d", "--city", "", "--checkpoint", "c",
        "--out", &s(&tmp.path().join("o2")),
    ]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "invalid_config");

    // config file for a different command
    write(&tmp.path().join("synth.json"), r#"{"command": "synth"}"#);
    let out = run(&[
        "train", "--config", &s(&tmp.path().join("synth.json")),
        "--data", "d", "--city", "east", "--out", &s(&tmp.path().join("o3")),
    ]);
    let err = error_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("synth"));

    // a failed run leaves no config.json behind
    assert!(!tmp.path().join("o1/config.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["conjure", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_directory_must_be_empty_or_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("g");
    fs::create_dir(&out_dir).unwrap();
    write(&out_dir.join("keep.txt"), "data");
    let out = run(&["gradcheck", "--out", out_dir.to_str().unwrap()]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "invalid_input");
    assert_eq!(read(&out_dir.join("keep.txt")), "data", "existing files untouched");

    // an empty pre-existing directory is fine
    let empty = tmp.path().join("h");
    fs::create_dir(&empty).unwrap();
    run_ok(&["gradcheck", "--out", empty.to_str().unwrap()]);
    assert!(empty.join("gradcheck.json").is_file());
}

#[test]
fn flags_override_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    write(&tmp.path().join("g.json"), r#"{"command": "gradcheck", "seed": 3}"#);

    let a = tmp.path().join("a");
    run_ok(&["gradcheck", "--config", &s(&tmp.path().join("g.json")), "--out", &s(&a)]);
    assert!(read(&a.join("config.json")).contains("\"seed\": 3"));

    let b = tmp.path().join("b");
    run_ok(&["gradcheck", "--config", &s(&tmp.path().join("g.json")), "--seed", "8", "--out", &s(&b)]);
    assert!(read(&b.join("config.json")).contains("\"seed\": 8"));
}
