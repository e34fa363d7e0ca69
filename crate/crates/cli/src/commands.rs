//! One function per sub-command, plus the pieces the experiments share.

use crate::checkpoint::{quantize, Checkpoint};
use crate::config::Config;
use crate::error::{CliError, Result};
use crate::run::RunDir;
use photoreg_core::eval::{perturbation_study, pose_error_stats, threshold_rates, EvalReport, ErrorRateCurve, PerturbConfig, PerturbKind};
use photoreg_core::field::{psnr, render, FieldConfig, RenderOptions};
use photoreg_core::image::ImageTensor;
use photoreg_core::regressor::{mean_pose, PoseRegressor};
use photoreg_core::scenes::{build_dataset, dataset_from_poses, generate_trajectory, select_by_overlap, Dataset, SplitSpec};
use photoreg_core::se3::{format_poses, parse_poses, Pose};
use photoreg_core::train::{
    refine_direct, refine_unlabeled, setup_rng, train_regressor, FieldTrainConfig, FieldTrainer, RegressorOutcome, TrainedField,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).map_err(|source| CliError::Data {
        path: dir.to_path_buf(),
        source,
    })
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [usize]> {
    data.splits
        .get(name)
        .ok_or_else(|| CliError::Usage(format!("unknown split {name:?}; expected train, val, test or unlabeled")))
}

fn no_jitter(opts: &RenderOptions) -> RenderOptions {
    RenderOptions { jitter: false, ..*opts }
}

fn render_frame(trained: &TrainedField, pose: &Pose, data: &Dataset, opts: &RenderOptions) -> Result<(ImageTensor, Vec<f64>)> {
    let k = &data.intrinsics;
    // without jitter the generator is never drawn from
    let out = render(&trained.model(), &pose.flatten(), k, &k.all_pixels(), &no_jitter(opts), &mut setup_rng(0))?;
    Ok((out.image(k.width, k.height)?, out.disparity))
}

/// Mean PSNR of full-frame renders against the frames of `idx`.
pub fn held_out_psnr(trained: &TrainedField, data: &Dataset, idx: &[usize], opts: &RenderOptions) -> Result<f64> {
    if idx.is_empty() {
        return Err(photoreg_core::Error::Empty("evaluation split").into());
    }
    let mut sum = 0.0;
    for &i in idx {
        let (img, _) = render_frame(trained, &data.frames[i].pose, data, opts)?;
        sum += psnr(img.data(), data.frames[i].image.data())?;
    }
    Ok(sum / idx.len() as f64)
}

/// Mean PSNR of predicting every pixel as the training frames' mean colour.
pub fn mean_color_psnr(data: &Dataset, idx: &[usize]) -> Result<f64> {
    let mean = data.mean_color(&data.splits.train);
    let mut sum = 0.0;
    for &i in idx {
        let img = data.frames[i].image.data();
        let flat: Vec<f64> = (0..img.len()).map(|j| mean[j % 3]).collect();
        sum += psnr(&flat, img)?;
    }
    Ok(sum / idx.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseSummary {
    pub frames: usize,
    pub median_translation: f64,
    pub median_rotation_deg: f64,
    pub mean_translation: f64,
    pub mean_rotation_deg: f64,
    pub translation_rate: f64,
    pub rotation_rate: f64,
}

fn summarize(report: &EvalReport, config: &Config) -> Result<PoseSummary> {
    let (t, r) = threshold_rates(report, config.eval.translation_threshold, config.eval.rotation_threshold_deg)?;
    Ok(PoseSummary {
        frames: report.translation_errors.len(),
        median_translation: report.median_translation,
        median_rotation_deg: report.median_rotation,
        mean_translation: report.mean_translation,
        mean_rotation_deg: report.mean_rotation,
        translation_rate: t,
        rotation_rate: r,
    })
}

pub fn predict_all(regressor: &PoseRegressor, data: &Dataset, idx: &[usize]) -> Result<Vec<Pose>> {
    idx.iter()
        .map(|&i| Ok(regressor.predict(&data.frames[i].image)?))
        .collect()
}

/// Pose errors of the regressor on one split.
pub fn evaluate_regressor(regressor: &PoseRegressor, data: &Dataset, idx: &[usize]) -> Result<EvalReport> {
    Ok(pose_error_stats(&predict_all(regressor, data, idx)?, &data.poses(idx))?)
}

#[derive(Serialize)]
pub struct GenSceneResult {
    pub frames: usize,
    pub splits: BTreeMap<String, usize>,
    pub bounds_diameter: f64,
}

pub fn gen_scene(config: &Config, out: &Path) -> Result<Vec<u8>> {
    let k = config.camera.intrinsics()?;
    let data = build_dataset(&config.scene, &config.trajectory, &k, &config.splits, config.oracle_samples, config.seed)?;
    let mut run = RunDir::create(out, config)?;
    data.save(out)?;
    for name in ["meta.json", "poses.txt", "frames"] {
        run.output(name);
    }
    let splits = ["train", "val", "test", "unlabeled"]
        .iter()
        .map(|&s| (s.to_string(), data.splits.get(s).map_or(0, <[usize]>::len)))
        .collect();
    run.finish(
        "gen-scene",
        &GenSceneResult {
            frames: data.len(),
            splits,
            bounds_diameter: data.bounds.diameter(),
        },
    )
}

#[derive(Serialize)]
pub struct TrainFieldResult {
    pub epochs_completed: usize,
    pub final_train_loss: Option<f64>,
    pub test_psnr: Option<f64>,
    pub mean_color_psnr: Option<f64>,
}

pub fn train_field(config: &Config, data_dir: &Path, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<Vec<u8>> {
    let data = load_dataset(data_dir)?;
    let mut run = RunDir::create(out, config)?;
    run.input("data", data_dir)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            run.input("resume", path)?;
            let adam = ck.optimizer.clone().ok_or_else(|| CliError::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: "no optimizer state to resume from".into(),
            })?;
            let (epoch, trace) = (ck.epoch, ck.trace.clone());
            let trained = ck.into_field(path)?;
            if trained.field.config != config.field {
                return Err(CliError::config("field", "differs from the architecture stored in the checkpoint"));
            }
            FieldTrainer {
                config: config.field_training.clone(),
                trained,
                adam,
                epoch,
                trace,
            }
        }
        None => FieldTrainer::new(config.field_training.clone(), config.field.clone(), &data)?,
    };
    let stop = stop_after.unwrap_or(usize::MAX).min(config.field_training.epochs);
    while trainer.epoch < stop {
        trainer.run_epoch(&data)?;
    }
    quantize(trainer.trained.field.params.values_mut());
    quantize(&mut trainer.adam.m);
    quantize(&mut trainer.adam.v);
    let ck = Checkpoint::field(&trainer.trained, Some(&trainer.adam), trainer.epoch, config.field_training.seed, &trainer.trace)
        .with_config(config);
    ck.save(&run.file("field.ckpt"))?;
    run.output("field.ckpt");
    run.write("trace.csv", trainer.trace.to_csv().as_bytes())?;
    let test = &data.splits.test;
    let (test_psnr, mean_color) = if test.is_empty() {
        (None, None)
    } else {
        let opts = config.field_training.render;
        (Some(held_out_psnr(&trainer.trained, &data, test, &opts)?), Some(mean_color_psnr(&data, test)?))
    };
    run.finish(
        "train-field",
        &TrainFieldResult {
            epochs_completed: trainer.epoch,
            final_train_loss: trainer.trace.last().map(|r| r.train_loss),
            test_psnr,
            mean_color_psnr: mean_color,
        },
    )
}

#[derive(Serialize)]
pub struct RegressorResult {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// Pose errors per non-empty held-out split.
    pub splits: BTreeMap<String, PoseSummary>,
}

fn finish_regressor(mut run: RunDir, command: &str, outcome: RegressorOutcome, data: &Dataset, config: &Config, seed: u64) -> Result<Vec<u8>> {
    let mut regressor = outcome.regressor;
    quantize(regressor.params.values_mut());
    Checkpoint::regressor(&regressor, &outcome.trace, seed)
        .with_config(config)
        .save(&run.file("regressor.ckpt"))?;
    run.output("regressor.ckpt");
    run.write("trace.csv", outcome.trace.to_csv().as_bytes())?;
    let all: Vec<usize> = (0..data.len()).collect();
    run.write("predictions.txt", format_poses(&predict_all(&regressor, data, &all)?).as_bytes())?;
    let mut splits = BTreeMap::new();
    for name in ["val", "test", "unlabeled"] {
        let idx = split(data, name)?;
        if !idx.is_empty() {
            splits.insert(name.to_string(), summarize(&evaluate_regressor(&regressor, data, idx)?, config)?);
        }
    }
    run.finish(
        command,
        &RegressorResult {
            epochs_run: outcome.epochs_run,
            best_epoch: outcome.stop.best_epoch,
            best_val_loss: outcome.stop.best,
            splits,
        },
    )
}

fn load_regressor(path: &Path) -> Result<PoseRegressor> {
    Checkpoint::load(path)?.into_regressor(path)
}

fn load_field(path: &Path) -> Result<TrainedField> {
    Checkpoint::load(path)?.into_field(path)
}

/// Untrained regressor whose output bias is the mean training pose.
pub fn initial_regressor(config: &Config, data: &Dataset) -> Result<PoseRegressor> {
    let start = mean_pose(&data.poses(&data.splits.train))?;
    Ok(PoseRegressor::new(config.regressor.clone(), &start, &mut setup_rng(config.seed))?)
}

pub fn train_regressor_cmd(config: &Config, data_dir: &Path, out: &Path, init: Option<&Path>) -> Result<Vec<u8>> {
    let data = load_dataset(data_dir)?;
    let mut run = RunDir::create(out, config)?;
    run.input("data", data_dir)?;
    let start = match init {
        Some(path) => {
            let r = load_regressor(path)?;
            run.input("init", path)?;
            r
        }
        None => initial_regressor(config, &data)?,
    };
    let outcome = train_regressor(start, &data, &config.regressor_training)?;
    finish_regressor(run, "train-regressor", outcome, &data, config, config.regressor_training.seed)
}

pub fn refine_cmd(config: &Config, data_dir: &Path, field: &Path, regressor: &Path, out: &Path, unlabeled: bool) -> Result<Vec<u8>> {
    let data = load_dataset(data_dir)?;
    let trained = load_field(field)?;
    let start = load_regressor(regressor)?;
    let mut run = RunDir::create(out, config)?;
    run.input("data", data_dir)?;
    run.input("field", field)?;
    run.input("regressor", regressor)?;
    let model = trained.model();
    let (command, outcome) = if unlabeled {
        let images = data.splits.unlabeled.clone();
        if images.is_empty() {
            return Err(CliError::Data {
                path: data_dir.to_path_buf(),
                source: photoreg_core::Error::Empty("unlabeled split"),
            });
        }
        ("refine-unlabeled", refine_unlabeled(start, &model, &data, &images, &config.refine)?)
    } else {
        ("refine", refine_direct(start, &model, &data, &config.refine)?)
    };
    finish_regressor(run, command, outcome, &data, config, config.refine.train.seed)
}

/// Where `eval` takes its predicted poses from.
fn predictions(pred: &Path, data: &Dataset, idx: &[usize]) -> Result<(String, PathBuf, Vec<Pose>)> {
    let pick = |poses: Vec<Pose>, origin: &Path| -> Result<Vec<Pose>> {
        if poses.len() != data.len() {
            return Err(CliError::Usage(format!(
                "{} holds {} poses, the dataset has {} frames",
                origin.display(),
                poses.len(),
                data.len()
            )));
        }
        Ok(idx.iter().map(|&i| poses[i]).collect())
    };
    let from_text = |path: &Path| -> Result<Vec<Pose>> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        pick(parse_poses(&text, path)?, path)
    };
    if pred.is_dir() {
        let ckpt = pred.join("regressor.ckpt");
        if ckpt.is_file() {
            return Ok(("regressor".into(), ckpt.clone(), predict_all(&load_regressor(&ckpt)?, data, idx)?));
        }
        for (kind, name) in [("predictions", "predictions.txt"), ("dataset poses", "poses.txt")] {
            let p = pred.join(name);
            if p.is_file() {
                return Ok((kind.into(), p.clone(), from_text(&p)?));
            }
        }
        return Err(CliError::Usage(format!(
            "{} has no regressor.ckpt, predictions.txt or poses.txt",
            pred.display()
        )));
    }
    if pred.extension().is_some_and(|e| e == "ckpt") {
        return Ok(("regressor".into(), pred.to_path_buf(), predict_all(&load_regressor(pred)?, data, idx)?));
    }
    if !pred.exists() {
        return Err(CliError::Usage(format!("{} does not exist", pred.display())));
    }
    Ok(("predictions".into(), pred.to_path_buf(), from_text(pred)?))
}

#[derive(Serialize)]
pub struct EvalResult {
    pub split: String,
    pub summary: PoseSummary,
    pub report: EvalReport,
}

pub fn eval_cmd(config: &Config, pred: &Path, data_dir: &Path, split_name: Option<&str>, out: &Path) -> Result<Vec<u8>> {
    let data = load_dataset(data_dir)?;
    let name = split_name.unwrap_or(&config.eval.split).to_string();
    let idx = split(&data, &name)?.to_vec();
    let (kind, source, preds) = predictions(pred, &data, &idx)?;
    let mut run = RunDir::create(out, config)?;
    run.input("data", data_dir)?;
    run.input("predictions", &source)?;
    let truths = data.poses(&idx);
    let mut report = pose_error_stats(&preds, &truths).map_err(|e| match e {
        photoreg_core::Error::Empty(_) => CliError::Usage(format!("split {name:?} is empty")),
        other => other.into(),
    })?;
    report.provenance.insert("predictions".into(), kind);
    report.provenance.insert("split".into(), name.clone());
    let mut csv = String::from("frame,pred_x,pred_y,pred_z,true_x,true_y,true_z,translation_error,rotation_error_deg\n");
    for (j, &i) in idx.iter().enumerate() {
        let (p, t) = (preds[j].translation, truths[j].translation);
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            data.frames[i].id, p.x, p.y, p.z, t.x, t.y, t.z, report.translation_errors[j], report.rotation_errors[j]
        );
    }
    run.write("trajectory.csv", csv.as_bytes())?;
    let summary = summarize(&report, config)?;
    run.finish("eval", &EvalResult { split: name, summary, report })
}

#[derive(Serialize)]
pub struct RenderResult {
    pub frame: String,
    pub psnr: f64,
    pub max_disparity: f64,
}

pub fn render_cmd(config: &Config, field: &Path, data_dir: &Path, pose_index: usize, out: &Path) -> Result<Vec<u8>> {
    let data = load_dataset(data_dir)?;
    let trained = load_field(field)?;
    let frame = data
        .frames
        .get(pose_index)
        .ok_or_else(|| CliError::Usage(format!("pose index {pose_index} outside the dataset's {} frames", data.len())))?;
    let mut run = RunDir::create(out, config)?;
    run.input("data", data_dir)?;
    run.input("field", field)?;
    let (img, disparity) = render_frame(&trained, &frame.pose, &data, &config.field_training.render)?;
    run.write("render.ppm", &img.to_ppm())?;
    // full scale is a surface at the near plane
    let near = data.intrinsics.near;
    let grey: Vec<f64> = disparity.iter().flat_map(|&d| [(d * near).clamp(0.0, 1.0); 3]).collect();
    let disp_img = ImageTensor::new(data.intrinsics.width, data.intrinsics.height, grey)?;
    run.write("disparity.ppm", &disp_img.to_ppm())?;
    let psnr = psnr(img.data(), frame.image.data())?;
    run.finish(
        "render",
        &RenderResult {
            frame: frame.id.clone(),
            psnr,
            max_disparity: disparity.iter().copied().fold(0.0, f64::max),
        },
    )
}

#[derive(Serialize)]
pub struct PerturbResult {
    pub frame: String,
    pub curves: Vec<SeededCurve>,
    /// Per kind, the rate at each magnitude averaged over seeds.
    pub mean_rates: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize)]
pub struct SeededCurve {
    pub seed: u64,
    pub curve: ErrorRateCurve,
}

fn kind_name(kind: PerturbKind) -> &'static str {
    match kind {
        PerturbKind::Translation => "translation",
        PerturbKind::Rotation => "rotation",
    }
}

/// Error-rate curves of one frame for every configured kind and seed.
pub fn perturbation_curves(trained: &TrainedField, data: &Dataset, frame: usize, config: &Config) -> Result<Vec<(u64, ErrorRateCurve)>> {
    let p = &config.perturb;
    let f = &data.frames[frame];
    let mut out = Vec::new();
    for &kind in &p.kinds {
        for &seed in &p.seeds {
            let cfg = PerturbConfig {
                trials: p.trials,
                pixels: p.pixels,
                render: p.render,
                seed,
            };
            let curve = perturbation_study(&trained.model(), &f.pose, &f.image, &data.intrinsics, kind, &p.magnitudes(kind), &cfg)?;
            out.push((seed, curve));
        }
    }
    Ok(out)
}

pub fn perturb_cmd(config: &Config, field: &Path, data_dir: &Path, frame: Option<usize>, out: &Path) -> Result<Vec<u8>> {
    let data = load_dataset(data_dir)?;
    let trained = load_field(field)?;
    let frame = match frame.or(config.perturb.frame) {
        Some(i) if i < data.len() => i,
        Some(i) => return Err(CliError::Usage(format!("frame {i} outside the dataset's {} frames", data.len()))),
        None => *data.splits.test.first().ok_or_else(|| CliError::Usage("no test frame to anchor the study; pass --frame".into()))?,
    };
    let mut run = RunDir::create(out, config)?;
    run.input("data", data_dir)?;
    run.input("field", field)?;
    let curves = perturbation_curves(&trained, &data, frame, config)?;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (seed, c) in &curves {
        run.write(&format!("perturb_{}_seed{seed}.csv", kind_name(c.kind)), c.to_csv().as_bytes())?;
        let e = sums.entry(kind_name(c.kind).into()).or_insert((vec![0.0; c.rates.len()], 0));
        e.0.iter_mut().zip(&c.rates).for_each(|(s, r)| *s += r);
        e.1 += 1;
    }
    let mean_rates = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    run.finish(
        "perturb-study",
        &PerturbResult {
            frame: data.frames[frame].id.clone(),
            curves: curves.into_iter().map(|(seed, curve)| SeededCurve { seed, curve }).collect(),
            mean_rates,
        },
    )
}

/// The co-visible subset for the encoding ablation: indices into the
/// generated trajectory and the dataset rendered from them.
pub fn ablation_dataset(config: &Config) -> Result<(Vec<usize>, Dataset)> {
    let a = &config.ablation;
    let k = config.camera.intrinsics()?;
    let poses = generate_trajectory(&config.scene, &a.trajectory, &mut setup_rng(config.seed))?;
    let reference = a.reference.unwrap_or(poses.len() / 2);
    let selected = select_by_overlap(&poses, reference, &k, a.threshold, a.n_points, config.seed)?;
    let chosen: Vec<Pose> = selected.iter().map(|&i| poses[i]).collect();
    let splits = SplitSpec {
        test: a.test_fraction,
        val: 0.0,
        unlabeled: 0.0,
    };
    let data = dataset_from_poses(&config.scene, &chosen, &k, &splits, config.oracle_samples, config.seed)?;
    Ok((selected, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingVariant {
    FixedFull,
    FixedHalf,
    CoarseToFine,
}

impl EncodingVariant {
    pub const ALL: [EncodingVariant; 3] = [EncodingVariant::FixedFull, EncodingVariant::FixedHalf, EncodingVariant::CoarseToFine];
}

/// Trains one ablation arm and returns its mean held-out PSNR.
pub fn ablation_arm(config: &Config, data: &Dataset, variant: EncodingVariant, seed: u64) -> Result<f64> {
    let a = &config.ablation;
    let (bands, annealed) = match variant {
        EncodingVariant::FixedFull => (a.full_bands, false),
        EncodingVariant::FixedHalf => (a.half_bands, false),
        EncodingVariant::CoarseToFine => (a.annealed_bands, true),
    };
    let field = FieldConfig {
        position_bands: bands,
        ..config.field.clone()
    };
    let training = FieldTrainConfig {
        coarse_to_fine: annealed,
        seed,
        ..config.field_training.clone()
    };
    let (trained, _) = photoreg_core::train::train_field(data, training, field)?;
    held_out_psnr(&trained, data, &data.splits.test, &config.field_training.render)
}

#[derive(Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub psnr: BTreeMap<String, f64>,
}

#[derive(Serialize)]
pub struct AblationResult {
    pub selected_frames: Vec<usize>,
    pub train_frames: usize,
    pub test_frames: usize,
    pub rows: Vec<AblationRow>,
    /// Seeds where coarse-to-fine reaches at least the fixed-full PSNR.
    pub coarse_to_fine_at_least_full: usize,
}

fn variant_name(v: EncodingVariant) -> String {
    serde_json::to_value(v).expect("serializable").as_str().expect("string").to_string()
}

pub fn ablation_cmd(config: &Config, out: &Path) -> Result<Vec<u8>> {
    let (selected, data) = ablation_dataset(config)?;
    let mut run = RunDir::create(out, config)?;
    data.save(&run.file("data"))?;
    run.output("data");
    let mut rows = Vec::new();
    let mut wins = 0;
    let mut csv = String::from("seed,variant,psnr\n");
    for &seed in &config.ablation.seeds {
        let mut psnr = BTreeMap::new();
        for v in EncodingVariant::ALL {
            let p = ablation_arm(config, &data, v, seed)?;
            let _ = writeln!(csv, "{seed},{},{p:?}", variant_name(v));
            psnr.insert(variant_name(v), p);
        }
        if psnr[&variant_name(EncodingVariant::CoarseToFine)] >= psnr[&variant_name(EncodingVariant::FixedFull)] {
            wins += 1;
        }
        rows.push(AblationRow { seed, psnr });
    }
    run.write("ablation.csv", csv.as_bytes())?;
    run.finish(
        "encoding-ablation",
        &AblationResult {
            selected_frames: selected,
            train_frames: data.splits.train.len(),
            test_frames: data.splits.test.len(),
            rows,
            coarse_to_fine_at_least_full: wins,
        },
    )
}
