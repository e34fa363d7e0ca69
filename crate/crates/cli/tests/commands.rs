use photoreg_cli::checkpoint::{quantize, Checkpoint};
use photoreg_cli::config::Config;
use photoreg_core::field::{FieldConfig, RadianceField, SceneBounds};
use photoreg_core::encoding::EncodingSchedule;
use photoreg_core::regressor::{PoseRegressor, RegressorConfig};
use photoreg_core::se3::Pose;
use photoreg_core::train::{EpochRecord, LossTrace, TrainedField};
use photoreg_diff::AdamState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn photoreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_photoreg"))
        .args(args)
        .env("PHOTOREG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = photoreg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    let dir = args.iter().position(|a| *a == "--out").map(|i| args[i + 1]).expect("--out");
    serde_json::from_slice(&std::fs::read(Path::new(dir).join("result.json")).unwrap()).unwrap()
}

fn tiny_config() -> Value {
    json!({
        "seed": 5,
        "trajectory": {"kind": {"kind": "orbit", "radius": 2.6, "height": 0.9}, "count": 16},
        "camera": {"width": 16, "height": 12},
        "splits": {"test": 0.25, "val": 0.125, "unlabeled": 0.125},
        "field": {"depth": 2, "width": 16, "skip": null, "color_width": 8, "position_bands": 4, "direction_bands": 2},
        "field_training": {"epochs": 6, "rays_per_image": 32, "lr_start": 5e-3, "lr_end": 1e-3, "horizon": 3,
                           "render": {"bins": 16, "jitter": true, "clip_to_bounds": true, "chunk": 64}},
        "regressor": {"input_width": 16, "input_height": 12, "channels": [4, 8], "head_init": 1e-3},
        "regressor_training": {"lr": 1e-3, "max_epochs": 3, "batch_size": 2},
        "refine": {"train": {"lr": 1e-4, "max_epochs": 2, "batch_size": 1, "rays_per_image": 16},
                   "weights": {"photometric": 0.3, "pose": 0.7},
                   "render": {"bins": 16, "jitter": false, "clip_to_bounds": true, "chunk": 64}},
        "perturb": {"trials": 4, "seeds": [0], "pixels": 16,
                    "translation_magnitudes": [0.0, 0.5], "rotation_magnitudes": [0.0, 5.0],
                    "render": {"bins": 16, "jitter": false, "clip_to_bounds": true, "chunk": 64}}
    })
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("c.json"), serde_json::to_string_pretty(config).unwrap()).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

#[test]
fn weights_key_names_match_the_config_schema() {
    // guards the literal config above against schema drift
    let c: Config = Config::parse(&tiny_config().to_string(), "tiny").unwrap();
    assert_eq!(c.camera.width, 16);
    assert_eq!(c.refine.weights.photometric, 0.3);
}

#[test]
fn pipeline_runs_end_to_end_and_repeats_byte_for_byte() {
    let w = Workspace::new(&tiny_config());
    let c = w.p("c.json");
    let gen = ok(&["gen-scene", "--config", &c, "--out", &w.p("data")]);
    assert_eq!(gen["result"]["frames"], 16);
    assert_eq!(gen["result"]["splits"]["test"], 4);

    // eval with the dataset's own poses as predictions
    let e = ok(&["eval", "--config", &c, "--pred", &w.p("data"), "--data", &w.p("data"), "--out", &w.p("eval_gt")]);
    assert_eq!(e["result"]["summary"]["median_translation"], 0.0);
    assert!(e["result"]["summary"]["median_rotation_deg"].as_f64().unwrap() < 1e-6);
    assert_eq!(e["result"]["summary"]["translation_rate"], 1.0);
    let csv = std::fs::read_to_string(w.root.join("eval_gt/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let tf = ok(&["train-field", "--config", &c, "--data", &w.p("data"), "--out", &w.p("field")]);
    assert_eq!(tf["result"]["epochs_completed"], 6);
    assert!(tf["result"]["test_psnr"].as_f64().unwrap().is_finite());
    let trace = std::fs::read_to_string(w.root.join("field/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 7);

    let field = w.p("field/field.ckpt");
    let r = ok(&["render", "--config", &c, "--field", &field, "--data", &w.p("data"), "--pose-index", "0", "--out", &w.p("render")]);
    assert!(r["result"]["psnr"].as_f64().unwrap() > 0.0);
    for f in ["render.ppm", "disparity.ppm"] {
        assert!(w.root.join("render").join(f).is_file());
    }

    let tr = ok(&["train-regressor", "--config", &c, "--data", &w.p("data"), "--out", &w.p("reg")]);
    assert_eq!(tr["result"]["epochs_run"], 3);
    let reg = w.p("reg/regressor.ckpt");
    let from_ckpt = ok(&["eval", "--config", &c, "--pred", &w.p("reg"), "--data", &w.p("data"), "--out", &w.p("eval_reg")]);
    assert_eq!(from_ckpt["result"]["summary"], tr["result"]["splits"]["test"]);
    let from_txt = ok(&["eval", "--config", &c, "--pred", &w.p("reg/predictions.txt"), "--data", &w.p("data"), "--out", &w.p("eval_txt")]);
    assert_eq!(from_txt["result"]["summary"]["frames"], 4);

    let rf = ok(&["refine", "--config", &c, "--data", &w.p("data"), "--field", &field, "--regressor", &reg, "--out", &w.p("refine")]);
    assert!(rf["result"]["splits"]["test"]["median_translation"].as_f64().unwrap().is_finite());
    let ru = ok(&["refine-unlabeled", "--config", &c, "--data", &w.p("data"), "--field", &field, "--regressor", &reg, "--out", &w.p("unl")]);
    assert_eq!(ru["command"], "refine-unlabeled");
    assert_eq!(ru["result"]["splits"]["unlabeled"]["frames"], 2);

    let ps = ok(&["perturb-study", "--config", &c, "--field", &field, "--data", &w.p("data"), "--out", &w.p("perturb")]);
    for curve in ps["result"]["curves"].as_array().unwrap() {
        assert_eq!(curve["curve"]["rates"][0], 0.0);
    }
    assert!(w.root.join("perturb/perturb_rotation_seed0.csv").is_file());

    // same config and inputs: byte-identical result JSON
    for (cmd, dir, extra) in [
        ("gen-scene", "data_again", vec![]),
        ("train-field", "field_again", vec!["--data", "data"]),
        ("refine", "refine_again", vec!["--data", "data", "--field", "field/field.ckpt", "--regressor", "reg/regressor.ckpt"]),
    ] {
        let mut args = vec![cmd.to_string(), "--config".into(), c.clone(), "--out".into(), w.p(dir)];
        for pair in extra.chunks(2) {
            args.push(pair[0].into());
            args.push(w.p(pair[1]));
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&args);
        let first = match cmd {
            "gen-scene" => "data",
            "train-field" => "field",
            _ => "refine",
        };
        assert_eq!(
            std::fs::read(w.root.join(first).join("result.json")).unwrap(),
            std::fs::read(w.root.join(dir).join("result.json")).unwrap(),
            "{cmd} result differs between identical runs"
        );
    }
}

#[test]
fn pose_only_refinement_matches_continued_regression() {
    let mut cfg = tiny_config();
    cfg["refine"]["weights"] = json!({"photometric": 0.0, "pose": 1.0});
    cfg["regressor_training"] = cfg["refine"]["train"].clone();
    let w = Workspace::new(&cfg);
    let c = w.p("c.json");
    ok(&["gen-scene", "--config", &c, "--out", &w.p("data")]);
    ok(&["train-field", "--config", &c, "--data", &w.p("data"), "--out", &w.p("field")]);
    ok(&["train-regressor", "--config", &c, "--data", &w.p("data"), "--out", &w.p("reg")]);
    let reg = w.p("reg/regressor.ckpt");
    let cont = ok(&["train-regressor", "--config", &c, "--data", &w.p("data"), "--init", &reg, "--out", &w.p("cont")]);
    let rf = ok(&["refine", "--config", &c, "--data", &w.p("data"), "--field", &w.p("field/field.ckpt"), "--regressor", &reg, "--out", &w.p("refine")]);
    assert_eq!(cont["result"], rf["result"]);
}

#[test]
fn resumed_field_training_continues_the_loss_trace() {
    let mut cfg = tiny_config();
    cfg["field_training"]["epochs"] = json!(10);
    let w = Workspace::new(&cfg);
    let c = w.p("c.json");
    ok(&["gen-scene", "--config", &c, "--out", &w.p("data")]);
    ok(&["train-field", "--config", &c, "--data", &w.p("data"), "--out", &w.p("full")]);
    let part = ok(&["train-field", "--config", &c, "--data", &w.p("data"), "--out", &w.p("part"), "--stop-after", "5"]);
    assert_eq!(part["result"]["epochs_completed"], 5);
    let resumed = ok(&[
        "train-field", "--config", &c, "--data", &w.p("data"), "--out", &w.p("resumed"), "--resume", &w.p("part/field.ckpt"),
    ]);
    assert_eq!(resumed["result"]["epochs_completed"], 10);

    let losses = |dir: &str| -> Vec<f64> {
        let ck = Checkpoint::load(&w.root.join(dir).join("field.ckpt")).unwrap();
        ck.trace.records.iter().map(|r| r.train_loss).collect()
    };
    let (a, b) = (losses("full"), losses("resumed"));
    assert_eq!(a.len(), 10);
    assert_eq!(a[..5], b[..5]);
    // the step across the resume point stays in line with its neighbours
    let jump = (b[5] - b[4]).abs();
    let prev = (b[4] - b[3]).abs();
    assert!(jump <= 2.0 * prev.max((a[5] - a[4]).abs()), "jump {jump:e} vs previous step {prev:e}");
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-3 * x.abs(), "{x} vs {y}");
    }
}

fn sample_field() -> (TrainedField, AdamState, LossTrace) {
    let config = FieldConfig {
        depth: 2,
        width: 8,
        skip: None,
        color_width: 4,
        position_bands: 3,
        direction_bands: 1,
    };
    let mut field = RadianceField::new(config, SceneBounds::cube(1.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    quantize(field.params.values_mut());
    let n = field.param_count();
    let mut adam = AdamState::new(n, 1e-3);
    adam.m = (0..n).map(|i| i as f64 * 0.25).collect();
    adam.v = (0..n).map(|i| i as f64 * 0.5).collect();
    adam.step = 17;
    let mut position = EncodingSchedule::new(3, 10).unwrap();
    position.epoch = 4;
    let trained = TrainedField {
        field,
        position,
        direction: EncodingSchedule::fixed(1),
    };
    let mut trace = LossTrace::default();
    trace.push(EpochRecord {
        epoch: 0,
        train_loss: 0.1234567891234,
        val_loss: None,
        lr: 1e-3,
    });
    (trained, adam, trace)
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let (trained, adam, trace) = sample_field();
    let ck = Checkpoint::field(&trained, Some(&adam), 4, 9, &trace).with_config(&Config::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let header_end = std::fs::read(&path).unwrap().iter().position(|&b| b == b'\n').unwrap();
    let header: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()[..header_end]).unwrap();
    assert_eq!(header["param_count"], trained.field.param_count());
    assert_eq!(header["component"], "field");
    assert_eq!(back.into_field(&path).unwrap(), trained);

    let mut r = PoseRegressor::new(RegressorConfig::default(), &Pose::identity(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    quantize(r.params.values_mut());
    let ck = Checkpoint::regressor(&r, &trace, 3);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.clone().into_regressor(&path).unwrap(), r);
    assert!(matches!(back.into_field(&path), Err(e) if e.exit_code() == 5));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (trained, adam, trace) = sample_field();
    let bytes = Checkpoint::field(&trained, Some(&adam), 4, 9, &trace).to_bytes();
    let p = Path::new("f.ckpt");
    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).unwrap_err();
    assert!(truncated.to_string().contains("corrupt"), "{truncated}");
    assert_eq!(truncated.exit_code(), 5);

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped, p).unwrap_err().to_string().contains("checksum"));

    let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":99", 1);
    let e = Checkpoint::from_bytes(text.as_bytes(), p).unwrap_err();
    assert!(e.to_string().contains("version 99"), "{e}");
    assert_eq!(e.exit_code(), 5);

    assert_eq!(Checkpoint::from_bytes(b"hello\nworld", p).unwrap_err().exit_code(), 5);
    assert_eq!(Checkpoint::load(Path::new("/nonexistent/f.ckpt")).unwrap_err().exit_code(), 4);
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let w = Workspace::new(&json!({"camera": {"width": 0}}));
    let code = |args: &[&str]| photoreg(args).status.code().unwrap();
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["gen-scene", "--out", &w.p("x"), "--bogus"]), 2);

    let out = photoreg(&["gen-scene", "--config", &w.p("c.json"), "--out", &w.p("x")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("camera"));
    std::fs::write(w.root.join("bad.json"), r#"{"field": {"depth": "deep"}}"#).unwrap();
    let out = photoreg(&["gen-scene", "--config", &w.p("bad.json"), "--out", &w.p("x")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("field.depth"));

    let args = ["render", "--field", &w.p("none.ckpt"), "--data", &w.p("nodata"), "--pose-index", "0", "--out", &w.p("r")];
    assert_eq!(code(&args), 6);
    let tiny = Workspace::new(&tiny_config());
    ok(&["gen-scene", "--config", &tiny.p("c.json"), "--out", &tiny.p("data")]);
    let args = ["render", "--config", &tiny.p("c.json"), "--field", &tiny.p("none.ckpt"), "--data", &tiny.p("data"), "--pose-index", "0", "--out", &tiny.p("r")];
    assert_eq!(code(&args), 4);
}
