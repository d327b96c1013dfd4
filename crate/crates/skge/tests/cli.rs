use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use skge::config::RunConfig;
use skge::drivelog::to_jsonl;
use skge::io::{load_dataset, load_params, read_records, save_params};
use skge_core::heads::NUM_CLASSES;
use skge_core::model::Model;
use skge_core::nn::ParamStore;
use skge_core::scoring::{accuracy, decide, mae, mean_iou, DriveLog, Infraction, Step, TaskMetrics};
use skge_core::tensor::Tensor;
use skge_core::training::predict;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_skge"));
    c.env_remove("SKGE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_counted_deterministic_datasets() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    ok(&["gen", "--out", s(&a), "--count", "10", "--seed", "4"]);
    ok(&["gen", "--out", s(&b), "--count", "10", "--seed", "4"]);
    ok(&["gen", "--out", s(&c), "--count", "10", "--seed", "5"]);

    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("# skge-dataset v1\n# classes carla-23-v1\n# count 10\n"));
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 10);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));

    let records = read_records(&a.join("000000.rec")).unwrap();
    let shape = |name: &str| records.iter().find(|(n, _)| n == name).unwrap().1.shape().to_vec();
    assert_eq!(shape("rgb"), [3, 64, 64]);
    assert_eq!(shape("depth_rgb"), [3, 64, 64]);
    assert_eq!(shape("seg"), [64, 64]);
    let loaded = load_dataset(&a).unwrap();
    assert_eq!(loaded.len(), 10);
    assert!(loaded.iter().all(|x| x.size == 64));
}

#[test]
fn seed_environment_variable_wins() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen", "--out", s(&a), "--count", "3", "--seed", "11", "--size", "16"]);
    let o = bin()
        .args(["gen", "--out", s(&b), "--count", "3", "--seed", "99", "--size", "16"])
        .env("SKGE_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let o = bin()
        .args(["gen", "--out", s(&b), "--count", "3"])
        .env("SKGE_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    assert_eq!(run(&["gen", "--out", s(&d), "--count", "0"]).status.code(), Some(2));
    assert_eq!(run(&["gen", "--out", s(&d)]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));

    ok(&["gen", "--out", s(&d), "--count", "2", "--size", "32"]);
    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "train.lr = 0.001\nbackbone.widht = 4\n").unwrap();
    let o = run(&["train", "--data", s(&d), "--config", s(&cfg), "--out", s(&t.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("backbone.widht"), "{}", stderr(&o));

    // 32x32 samples against the 64x64 default model
    let o = run(&["train", "--data", s(&d), "--out", s(&t.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["train", "--data", s(&d), "--out", s(&t.path().join("m")), "--skge-route", "4->4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["score", "--logs", s(&t.path().join("nowhere"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_aborts_with_exit_3() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen", "--out", s(&d), "--count", "4"]);
    let cfg = t.path().join("hot.cfg");
    fs::write(&cfg, "train.lr = 1e30\ntrain.batch_size = 1\ntrain.mgn = false\n").unwrap();
    let o = run(&["train", "--data", s(&d), "--config", s(&cfg), "--out", s(&t.path().join("m")), "--epochs", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn trained(count: &str, epochs: &str) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("m.ckpt");
    ok(&["gen", "--out", s(&data), "--count", count, "--seed", "2"]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", epochs]);
    Trained { _dir: dir, data, ckpt }
}

#[test]
fn train_log_has_one_line_per_epoch() {
    let t = trained("6", "2");
    let mut log = t.ckpt.as_os_str().to_owned();
    log.push(".metrics.jsonl");
    let lines: Vec<Value> = fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["epoch"], i + 1);
        assert!(v["lr"].as_f64().unwrap() > 0.0);
        assert!(v["val_loss"].as_f64().unwrap().is_finite());
        for key in ["train", "val", "alpha"] {
            assert_eq!(v[key].as_object().unwrap().len(), 7, "{key}");
        }
    }
}

#[test]
fn eval_report_matches_scoring_functions() {
    let t = trained("6", "1");
    let o = ok(&["eval", "--data", s(&t.data), "--ckpt", s(&t.ckpt)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let m = v["metrics"].as_object().unwrap();
    let mut keys: Vec<&str> = m.keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut names = TaskMetrics::NAMES.to_vec();
    names.sort_unstable();
    assert_eq!(keys, names);

    let cfg = RunConfig::default();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, &cfg.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    load_params(&t.ckpt, &mut store).unwrap();
    let samples = load_dataset(&t.data).unwrap();
    let (pred, gt, losses) = predict(&model, &store, &samples, &cfg.train).unwrap();

    let col = |x: &Tensor<f32>, k: usize| Tensor::new(&[x.shape()[0], 1], x.data().iter().skip(k).step_by(3).copied().collect()).unwrap();
    let flags = |p: &[f64]| p.iter().map(|&x| decide(x)).collect::<Vec<_>>();
    let want = [
        ("ss_metric", mean_iou(&pred.seg, &gt.seg, NUM_CLASSES).unwrap()),
        ("wp_metric", mae(&pred.waypoints, &gt.waypoints).unwrap() as f64),
        ("str_metric", mae(&col(&pred.controls, 0), &col(&gt.controls, 0)).unwrap() as f64),
        ("thr_metric", mae(&col(&pred.controls, 1), &col(&gt.controls, 1)).unwrap() as f64),
        ("brk_metric", mae(&col(&pred.controls, 2), &col(&gt.controls, 2)).unwrap() as f64),
        ("redl_metric", accuracy(&flags(&pred.tl), &flags(&gt.tl)).unwrap()),
        ("stops_metric", accuracy(&flags(&pred.ss), &flags(&gt.ss)).unwrap()),
    ];
    for (k, x) in want {
        assert_eq!(m[k].as_f64().unwrap().to_bits(), x.to_bits(), "{k}");
    }
    let mean = losses.iter().sum::<f64>() / 7.0;
    assert_eq!(v["test_loss"].as_f64().unwrap(), mean);

    let perfect = TaskMetrics::compute(&gt, &gt).unwrap();
    assert_eq!(perfect.values(), [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);

    let cfg_path = t._dir.path().join("wide.cfg");
    fs::write(&cfg_path, "backbone.embed_dim = 32\nbackbone.heads = 2,4,8,16\n").unwrap();
    let o = run(&["eval", "--data", s(&t.data), "--ckpt", s(&t.ckpt), "--config", s(&cfg_path)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn write_log(dir: &Path, log: &DriveLog) {
    fs::write(dir.join(format!("{}.jsonl", log.route_id)), to_jsonl(log)).unwrap();
}

fn line(id: &str, length: f64, pts: &[(f64, f64, bool)], inf: &[Infraction]) -> DriveLog {
    DriveLog {
        route_id: id.into(),
        route_length: length,
        steps: pts.iter().map(|&(x, y, on_road)| Step { x, y, on_road }).collect(),
        infractions: inf.to_vec(),
    }
}

fn score_json(args: &[&str]) -> Value {
    let mut a = vec!["score", "--json"];
    a.extend_from_slice(args);
    serde_json::from_slice(&ok(&a).stdout).unwrap()
}

#[test]
fn score_hand_built_routes() {
    let t = tempfile::tempdir().unwrap();
    use Infraction::*;
    // 50 m of 100 with a pedestrian and a red light: 50 * 0.35
    write_log(t.path(), &line("a", 100.0, &[(0.0, 0.0, true), (30.0, 40.0, true)], &[Pedestrian, RedLight]));
    // the off-road segment from 12 m is not counted: 12 / 20
    write_log(t.path(), &line("b", 20.0, &[(0.0, 0.0, true), (12.0, 0.0, false), (20.0, 0.0, true)], &[]));
    // overshoot caps at 100; 0.6 * 0.6 * 0.8
    write_log(t.path(), &line("c", 50.0, &[(0.0, 0.0, true), (60.0, 0.0, true)], &[Vehicle, Vehicle, StopSign]));
    let v = score_json(&["--logs", s(t.path())]);
    let routes = v["routes"].as_array().unwrap();
    let want = [("a", 50.0, 0.35, 17.5), ("b", 60.0, 1.0, 60.0), ("c", 100.0, 0.288, 28.8)];
    for (r, (id, rc, ip, ds)) in routes.iter().zip(want) {
        assert_eq!(r["route_id"], id);
        assert!((r["rc"].as_f64().unwrap() - rc).abs() < 1e-9);
        assert!((r["ip"].as_f64().unwrap() - ip).abs() < 1e-12);
        assert!((r["ds"].as_f64().unwrap() - ds).abs() < 1e-9);
    }
    assert!((v["ds"].as_f64().unwrap() - (17.5 + 60.0 + 28.8) / 3.0).abs() < 1e-9);
    assert!((v["mean_rc"].as_f64().unwrap() - 70.0).abs() < 1e-9);
    assert!((v["mean_ip"].as_f64().unwrap() - (0.35 + 1.0 + 0.288) / 3.0).abs() < 1e-12);

    let table = String::from_utf8(ok(&["score", "--logs", s(t.path())]).stdout).unwrap();
    assert!(table.lines().next().unwrap().contains("RC"));
    assert!(table.contains("mean"));
}

#[test]
fn score_without_infractions_has_unit_penalties() {
    let t = tempfile::tempdir().unwrap();
    for (i, len) in [10.0, 25.0, 40.0].into_iter().enumerate() {
        write_log(t.path(), &line(&format!("r{i}"), len, &[(0.0, 0.0, true), (5.0, 5.0, true)], &[]));
    }
    let v = score_json(&["--logs", s(t.path())]);
    assert!(v["routes"].as_array().unwrap().iter().all(|r| r["ip"] == 1.0));
}

#[test]
fn score_table_two_aggregates() {
    let t = tempfile::tempdir().unwrap();
    let csv = t.path().join("table.csv");
    fs::write(&csv, "route_id,rc,ip\nx13,86.8683,0.3421\n").unwrap();
    let v = score_json(&["--pairs", s(&csv)]);
    let ds = v["ds"].as_f64().unwrap();
    assert!((ds - 29.71).abs() <= 0.01 && (29.71..=29.72).contains(&ds), "{ds}");
}

#[test]
fn score_rejects_corrupt_logs() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("r.jsonl"), "{\"route_id\":\"r\",\"kind\":\"step\"\n").unwrap();
    let o = run(&["score", "--logs", s(t.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("r.jsonl"));
}

fn bench_fps(ckpt: &Path, cfg: &Path, iters: &str) -> f64 {
    let o = ok(&["bench", "--ckpt", s(ckpt), "--config", s(cfg), "--iters", iters]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["peak_rss_kib"].as_u64().is_some_and(|k| k > 0));
    v["fps"].as_f64().unwrap()
}

#[test]
fn bench_reports_throughput() {
    let t = tempfile::tempdir().unwrap();
    let mut fps = Vec::new();
    for size in [64, 96] {
        let cfg_path = t.path().join(format!("{size}.cfg"));
        fs::write(&cfg_path, format!("backbone.input_size = {size}\n")).unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        let mut store = ParamStore::<f32>::new();
        Model::new(&mut store, &cfg.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ckpt = t.path().join(format!("{size}.ckpt"));
        save_params(&ckpt, &store).unwrap();
        if size == 64 {
            let o = run(&["bench", "--ckpt", s(&ckpt), "--iters", "0"]);
            assert_eq!(o.status.code(), Some(2));
        }
        fps.push(bench_fps(&ckpt, &cfg_path, "15"));
    }
    assert!(fps.iter().all(|f| f.is_finite() && *f > 0.0), "{fps:?}");
    // 2.25x the pixels
    assert!(fps[1] < fps[0], "{fps:?}");
}
