use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cosod::dataio::save_rgb_png;
use cosod::network::CoSodNet;
use cosod::Image;
use serde_json::Value;

fn cosod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosod")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TOY: [&str; 6] = ["--override", "image_size=32", "--override", "holdout_per_group=1", "--override", "epochs=1"];

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

/// A small synthetic dataset and one trained run shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let out = cosod(&["synth", "--out", p(&data), "--groups", "3", "--per-group", "4", "--size", "32", "--seed", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut args = vec!["train", "--quiet", "--data", p(&data), "--out", p(&run)];
        args.extend(TOY);
        let out = cosod(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { _dir: dir, data, run }
    })
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn train_writes_the_run_directory() {
    let f = fixture();
    for name in ["config.json", "log.jsonl", "last.ckpt", "best.ckpt"] {
        assert!(f.run.join(name).is_file(), "{name}");
    }
    let cfg: Value = serde_json::from_str(&fs::read_to_string(f.run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 1);
    // One epoch is one pair draw per group.
    let log = fs::read_to_string(f.run.join("log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["epoch"] == 0 && l["k_used"] == 300.0 && l["lr"] == 3e-4));
    assert!(lines[0]["components"]["gcm"].is_f64());
}

#[test]
fn training_is_idempotent_for_the_same_out_dir() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--quiet", "--data", p(&f.data), "--out", p(dir.path())];
    args.extend(TOY);
    assert!(cosod(&args).status.success());
    let first = read_tree(dir.path());
    assert!(cosod(&args).status.success());
    assert_eq!(read_tree(dir.path()), first);
    assert_eq!(fs::read(dir.path().join("last.ckpt")).unwrap(), fs::read(f.run.join("last.ckpt")).unwrap());
}

#[test]
fn invalid_configuration_exits_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = cosod(&["train", "--data", p(&f.data), "--out", p(dir.path()), "--override", "lambdas=[-1,0.5,250,3,3]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambdas[0]"));
    let out = cosod(&["train", "--data", p(&f.data), "--out", p(dir.path()), "--override", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"image_size": 50}"#).unwrap();
    let out = cosod(&["train", "--config", p(&bad), "--data", p(&f.data), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("image_size"));
}

#[test]
fn data_problems_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = cosod(&["train", "--data", p(&dir.path().join("missing")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let out = cosod(&["synth", "--out", p(dir.path()), "--groups", "40"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn infer_writes_maps_at_original_resolution() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in/birds");
    fs::create_dir_all(&input).unwrap();
    for i in 0..5 {
        let mut img = Image::filled(36 + i, 44, 3, 0.2f32);
        for y in 5..20 {
            for x in 8..25 {
                img.set(y, x, 0, 0.9);
            }
        }
        save_rgb_png(&input.join(format!("b{i}.png")), &img).unwrap();
    }
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    let out_dir = dir.path().join("maps");
    let ckpt = f.run.join("best.ckpt");
    let in_dir = dir.path().join("in");
    let args = ["infer", "--ckpt", p(&ckpt), "--input", p(&in_dir), "--out", p(&out_dir)];
    let out = cosod(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
    let mut names: Vec<String> = fs::read_dir(out_dir.join("birds")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["b0.png", "b1.png", "b2.png", "b3.png", "b4.png"]);
    for i in 0..5 {
        let m = image::open(out_dir.join(format!("birds/b{i}.png"))).unwrap();
        assert_eq!((m.width(), m.height()), (44, 36 + i as u32));
        assert_eq!(m.color(), image::ColorType::L8);
    }
    let first = read_tree(&out_dir);
    assert!(cosod(&args).status.success());
    assert_eq!(read_tree(&out_dir), first);

    let stretched = dir.path().join("stretched");
    let out = cosod(&["infer", "--stretch", "--ckpt", p(&ckpt), "--input", p(&in_dir), "--out", p(&stretched)]);
    assert!(out.status.success());
    let m = image::open(stretched.join("birds/b0.png")).unwrap().to_luma8();
    let (lo, hi) = m.pixels().fold((255u8, 0u8), |(lo, hi), px| (lo.min(px[0]), hi.max(px[0])));
    assert!(lo == hi || (lo, hi) == (0, 255), "{lo}..{hi}");
}

#[test]
fn infer_fails_when_nothing_is_readable() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("in/g")).unwrap();
    fs::write(dir.path().join("in/g/x.png"), b"junk").unwrap();
    let out = cosod(&["infer", "--ckpt", p(&f.run.join("last.ckpt")), "--input", p(&dir.path().join("in")), "--out", p(&dir.path().join("o"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn synth_train_infer_eval_compose() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let out = cosod(&["infer", "--ckpt", p(&f.run.join("best.ckpt")), "--input", p(&f.data), "--out", p(&pred)]);
    assert!(out.status.success());
    let csv = dir.path().join("groups.csv");
    let report = dir.path().join("report.json");
    let out = cosod(&["eval", "--pred", p(&pred), "--gt", p(&f.data), "--csv", p(&csv), "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["n_images"], 12);
    for k in ["e_max", "s_alpha", "f_max", "mae"] {
        let v = rep[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(rep["per_group"].as_object().unwrap().len(), 3);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);
    assert_eq!(serde_json::from_str::<Value>(&fs::read_to_string(&report).unwrap()).unwrap(), rep);

    // Ground truth against itself is the perfect predictor.
    let out = cosod(&["eval", "--pred", p(&f.data.join("gt")), "--gt", p(&f.data)]);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((rep["e_max"].as_f64(), rep["s_alpha"].as_f64(), rep["f_max"].as_f64(), rep["mae"].as_f64()), (Some(1.0), Some(1.0), Some(1.0), Some(0.0)));

    // An unmatched file makes the exit code nonzero.
    fs::copy(pred.join("g00_red_circle/000.png"), pred.join("g00_red_circle/extra.png")).unwrap();
    let out = cosod(&["eval", "--pred", p(&pred), "--gt", p(&f.data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(cosod(&["synth", "--out", p(d.path()), "--groups", "2", "--per-group", "2", "--size", "32", "--seed", "4"]).status.success());
    }
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

#[test]
fn bench_reports_timings_and_parameter_count() {
    let out = cosod(&["bench", "--reps", "0", "--override", "image_size=32", "--classes", "8"]);
    assert!(out.status.success());
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rep["median_ms"].is_null() && rep["mean_ms"].is_null());
    assert_eq!(rep["timings_ms"].as_array().unwrap().len(), 0);
    let expect = CoSodNet::<f32>::analytic_param_count(cosod::config::Backbone::Tiny, 8);
    assert_eq!(rep["param_count"].as_u64(), Some(expect as u64));

    let f = fixture();
    let out = cosod(&["bench", "--ckpt", p(&f.run.join("last.ckpt")), "--batch", "2", "--reps", "5"]);
    assert!(out.status.success());
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    let (med, mean) = (rep["median_ms"].as_f64().unwrap(), rep["mean_ms"].as_f64().unwrap());
    assert!(med > 0.0 && med <= mean * 1.5, "median {med} mean {mean}");
    assert_eq!(rep["batch"], 2);
}

#[test]
fn config_prints_resolved_json() {
    let out = cosod(&["config", "--override", "epochs=7"]);
    assert!(out.status.success());
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["epochs"], 7);
    assert_eq!(cfg["backbone"], "tiny");
    let out = cosod(&["config", "--full"]);
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["image_size"], 256);
}
