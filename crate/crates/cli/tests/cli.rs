use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsccal::nn3d::{encode_checkpoint, write_checkpoint, Adam, AdamConfig, MffNet, NetworkConfig, Parameters};
use lsccal::volume::{write_mvol, Grid, LabelMask, Volume};
use serde_json::Value;
use tempfile::TempDir;

const SMALL_NET: &str = "\
[network]
c0 = 2
growth = 2
dense_layers = 2
c1 = 2
c2 = 3
c3 = 2
";

fn lsccal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsccal")).args(args).output().expect("spawn lsccal")
}

fn ok(args: &[&str]) -> Output {
    let out = lsccal(args);
    assert!(
        out.status.success(),
        "lsccal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["phantom", "--output", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn spec_fields(dir: &Path) -> HashMap<String, String> {
    fs::read_to_string(dir.join("spec.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn evaluate(pred: &Path, truth: &Path, extra: &[&str]) -> (Value, String) {
    let mut args = vec!["evaluate", "--input", s(pred), "--truth", s(truth)];
    args.extend_from_slice(extra);
    let out = ok(&args);
    (serde_json::from_slice(&out.stdout).unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn small_config(dir: &Path, train: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL_NET}\n[train]\n{train}")).unwrap();
    path
}

#[test]
fn phantom_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = phantom(tmp.path(), "a", &["--seed", "7", "--noise", "50"]);
    let b = phantom(tmp.path(), "b", &["--seed", "7", "--noise", "50"]);
    for f in ["volume.mvol", "mask.mvol", "pose.txt", "spec.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn skew_euler_writes_rx() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &["--skew-euler", "10,0,0"]);
    let values: Vec<f64> =
        fs::read_to_string(dir.join("pose.txt")).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 12);
    let (sn, cs) = 10f64.to_radians().sin_cos();
    let rx = [1.0, 0.0, 0.0, 0.0, cs, -sn, 0.0, sn, cs];
    for (v, e) in values[..9].iter().zip(rx) {
        assert!((v - e).abs() < 1e-9, "{values:?}");
    }
    assert!(values[9..].iter().all(|v| *v == 0.0));
}

#[test]
fn mask_count_near_tube_volume() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let f = spec_fields(&dir);
    let num = |k: &str| f[k].parse::<f64>().unwrap();
    let spacing: Vec<f64> = f["spacing"].split(',').map(|v| v.parse().unwrap()).collect();
    let tube = 2.0
        * std::f64::consts::PI
        * num("tube_radius").powi(2)
        * num("major_radius")
        * num("arc_span_deg").to_radians();
    let expected = tube / spacing.iter().product::<f64>();
    let mask = lsccal::volume::read_mvol(dir.join("mask.mvol")).unwrap().into_mask().unwrap();
    let count = mask.count() as f64;
    assert!((count / expected - 1.0).abs() <= 0.2, "count {count}, tube volume {expected} voxels");
}

#[test]
fn phantom_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = lsccal(&["phantom", "--output", s(&tmp.path().join("p")), "--set", "tube_radius=-1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tube_radius"));
}

#[test]
fn config_file_then_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 11\n[phantom]\nnoise_amplitude = 40\nmajor_radius = 3.5\n").unwrap();
    let dir = phantom(tmp.path(), "p", &["--config", s(&cfg), "--noise", "80"]);
    let f = spec_fields(&dir);
    assert_eq!(f["seed"], "11");
    assert_eq!(f["major_radius"], "3.5");
    assert_eq!(f["noise_amplitude"], "80");
}

#[test]
fn threshold_recovers_noiseless_mask() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let seg = tmp.path().join("seg.mvol");
    ok(&["segment-threshold", "--input", s(&dir.join("volume.mvol")), "--output", s(&seg), "--band-from-spec", s(&dir.join("spec.txt"))]);
    let (eval, _) = evaluate(&seg, &dir.join("mask.mvol"), &[]);
    assert_eq!(eval["dsc"].as_f64(), Some(1.0));

    let out = lsccal(&["segment-threshold", "--input", s(&dir.join("volume.mvol")), "--output", s(&seg), "--lo", "5000", "--hi", "6000"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty segmentation"));
}

#[test]
fn threshold_under_half_gap_noise() {
    let tmp = TempDir::new().unwrap();
    for seed in ["1", "2", "3"] {
        let dir = phantom(tmp.path(), seed, &["--seed", seed, "--noise-fraction", "0.5"]);
        let seg = tmp.path().join(format!("{seed}.mvol"));
        ok(&["segment-threshold", "--input", s(&dir.join("volume.mvol")), "--output", s(&seg), "--band-from-spec", s(&dir.join("spec.txt"))]);
        let (eval, _) = evaluate(&seg, &dir.join("mask.mvol"), &[]);
        assert!(eval["dsc"].as_f64().unwrap() >= 0.95, "seed {seed}: {eval}");
    }
}

#[test]
fn zero_iterations_keeps_initialization() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let cfg = small_config(tmp.path(), "learning_rate = 0.02\n");
    let ckpt = tmp.path().join("net.ckpt");
    ok(&["train", "--config", s(&cfg), "--input", s(&dir), "--output", s(&ckpt), "--iterations", "0", "--seed", "5"]);

    let config = NetworkConfig::reduced();
    let net = MffNet::<f32>::new(config, 5).unwrap();
    let adam = Adam::new(AdamConfig { lr: 0.02, ..Default::default() });
    assert_eq!(fs::read(&ckpt).unwrap(), encode_checkpoint(&net, Some(&adam)));
    let log = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let cfg = small_config(tmp.path(), "iterations = 3\nbatch_size = 1\n");
    let run = |name: &str| {
        let ckpt = tmp.path().join(format!("{name}.ckpt"));
        ok(&["train", "--config", s(&cfg), "--input", s(&dir), "--output", s(&ckpt), "--seed", "9"]);
        (fs::read(&ckpt).unwrap(), fs::read_to_string(ckpt.with_extension("csv")).unwrap())
    };
    let (ckpt_a, log_a) = run("a");
    let (ckpt_b, log_b) = run("b");
    assert_eq!(log_a.lines().count(), 4);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
}

fn small_volume(dir: &Path) -> PathBuf {
    let grid = Grid::with_spacing([20, 24, 30], [0.5; 3]).unwrap();
    let voxels = (0..grid.len()).map(|i| if i % 7 == 0 { 1400.0 } else { -600.0 }).collect();
    let path = dir.join("small.mvol");
    write_mvol(&Volume::new(grid, voxels).unwrap().into(), &path).unwrap();
    path
}

#[test]
fn infer_crops_back_small_volumes() {
    let tmp = TempDir::new().unwrap();
    let input = small_volume(tmp.path());
    let ckpt = tmp.path().join("net.ckpt");
    write_checkpoint(&ckpt, &MffNet::<f32>::new(NetworkConfig::reduced(), 1).unwrap(), None).unwrap();
    let output = tmp.path().join("seg.mvol");
    let probs = tmp.path().join("probs.mvol");
    ok(&["infer", "--input", s(&input), "--checkpoint", s(&ckpt), "--output", s(&output), "--probabilities", s(&probs)]);
    let mask = lsccal::volume::read_mvol(&output).unwrap().into_mask().unwrap();
    assert_eq!(mask.dims(), [20, 24, 30]);
    let p = lsccal::volume::read_mvol(&probs).unwrap().into_volume().unwrap();
    assert_eq!(p.dims(), [20, 24, 30]);
    assert!(p.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_weights_warn_empty() {
    let tmp = TempDir::new().unwrap();
    let input = small_volume(tmp.path());
    let mut net = MffNet::<f32>::new(NetworkConfig::reduced(), 1).unwrap();
    net.visit_params(&mut |_, p, _| p.value.iter_mut().for_each(|v| *v = 0.0));
    let ckpt = tmp.path().join("zero.ckpt");
    write_checkpoint(&ckpt, &net, None).unwrap();
    let output = tmp.path().join("seg.mvol");
    let out = ok(&["infer", "--input", s(&input), "--checkpoint", s(&ckpt), "--output", s(&output)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty segmentation"));
    let mask = lsccal::volume::read_mvol(&output).unwrap().into_mask().unwrap();
    assert_eq!(mask.count(), 0);
}

#[test]
fn infer_needs_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let input = small_volume(tmp.path());
    let out = lsccal(&["infer", "--input", s(&input), "--checkpoint", s(&tmp.path().join("none.ckpt")), "--output", s(&tmp.path().join("o.mvol"))]);
    assert!(!out.status.success());
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn calibrate_identity_phantom() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let cal = tmp.path().join("cal");
    let out = ok(&["calibrate", "--input", s(&dir.join("volume.mvol")), "--mask", s(&dir.join("mask.mvol")), "--output", s(&cal)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rank: Excellent"));
    let r = report(&cal);
    assert_eq!(r["rank"], "Excellent");
    for key in ["iterations", "l1_mm", "l0_mm", "p1", "p2", "rms_mm", "angles_deg"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert!(r["angles_deg"].as_array().unwrap().iter().all(|a| a.as_f64().unwrap().abs() <= 0.5));
    for f in ["volume.mvol", "mask.mvol", "pose.txt"] {
        assert!(cal.join(f).exists(), "missing {f}");
    }
}

#[test]
fn calibrate_recovers_skew() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &["--skew-euler", "8,-6,11", "--skew-translation", "1.2,-0.7,0.4"]);
    let cal = tmp.path().join("cal");
    ok(&["calibrate", "--input", s(&dir.join("volume.mvol")), "--mask", s(&dir.join("mask.mvol")), "--output", s(&cal)]);
    let (eval, _) = evaluate(
        &cal.join("mask.mvol"),
        &cal.join("mask.mvol"),
        &["--report", s(&cal.join("report.json")), "--pose", s(&cal.join("pose.txt")), "--truth-pose", s(&dir.join("pose.txt"))],
    );
    assert!(eval["rotation_error_deg"].as_f64().unwrap() < 1.0, "{eval}");
    assert!(eval["translation_error_mm"].as_f64().unwrap() < 1.0, "{eval}");
    assert!(eval["rank"].is_string());
}

#[test]
fn calibrate_single_component_fails() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let full = lsccal::volume::read_mvol(dir.join("mask.mvol")).unwrap().into_mask().unwrap();
    let mut one = LabelMask::empty(*full.grid());
    for [i, j, k] in full.foreground() {
        if full.grid().world_of([i, j, k]).x < 0.0 {
            one.set(i, j, k, true);
        }
    }
    let one_path = tmp.path().join("one.mvol");
    write_mvol(&one.into(), &one_path).unwrap();
    let cal = tmp.path().join("cal");
    let out = lsccal(&["calibrate", "--input", s(&dir.join("volume.mvol")), "--mask", s(&one_path), "--output", s(&cal)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient anchors"));
    assert_eq!(report(&cal)["rank"], "Failed");
}

#[test]
fn evaluate_masks() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", &[]);
    let truth = dir.join("mask.mvol");
    let (eval, stderr) = evaluate(&truth, &truth, &[]);
    assert_eq!(eval["dsc"].as_f64(), Some(1.0));
    assert_eq!(eval["component_dsc"], serde_json::json!([1.0, 1.0]));
    assert!(stderr.is_empty());

    let grid = *lsccal::volume::read_mvol(&truth).unwrap().grid();
    let empty = tmp.path().join("empty.mvol");
    write_mvol(&LabelMask::empty(grid).into(), &empty).unwrap();
    let (eval, stderr) = evaluate(&empty, &truth, &[]);
    assert_eq!(eval["dsc"].as_f64(), Some(0.0));
    assert!(stderr.contains("warning"));

    let other = tmp.path().join("other.mvol");
    let small = Grid::with_spacing([8, 8, 8], [0.5; 3]).unwrap();
    write_mvol(&LabelMask::empty(small).into(), &other).unwrap();
    assert!(!lsccal(&["evaluate", "--input", s(&other), "--truth", s(&truth)]).status.success());
}

#[test]
fn evaluate_batch_table() {
    let tmp = TempDir::new().unwrap();
    let table = tmp.path().join("table.txt");
    ok(&["evaluate", "--batch", "4", "--seed", "0", "--output", s(&table)]);
    let text = fs::read_to_string(&table).unwrap();
    for rank in ["Excellent", "Good", "Failed"] {
        assert!(text.contains(rank), "{text}");
    }
}
