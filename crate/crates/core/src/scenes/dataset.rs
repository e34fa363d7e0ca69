use super::{generate_trajectory, oracle_render, SceneSpec, TrajectorySpec};
use crate::error::{Error, Result};
use crate::field::{CameraIntrinsics, SceneBounds};
use crate::image::ImageTensor;
use crate::se3::{format_poses, parse_poses, recenter_poses, Pose};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fractions of the frames assigned to each held-out split; the rest train.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub test: f64,
    pub val: f64,
    #[serde(default)]
    pub unlabeled: f64,
}

impl SplitSpec {
    /// Every eighth frame held out for testing.
    pub fn llff() -> Self {
        Self {
            test: 1.0 / 8.0,
            val: 0.0,
            unlabeled: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.test, self.val, self.unlabeled];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::invalid("split fractions", format!("{f:?} must be in [0, 1] and sum to at most 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Picks `count` entries of `remaining` at even strides and removes them.
fn take_strided(remaining: &mut Vec<usize>, count: usize) -> Vec<usize> {
    let len = remaining.len();
    let count = count.min(len);
    let pos: Vec<usize> = (0..count).map(|i| i * len / count).collect();
    let picked: Vec<usize> = pos.iter().map(|&p| remaining[p]).collect();
    for &p in pos.iter().rev() {
        remaining.remove(p);
    }
    picked
}

impl Splits {
    /// Test, then validation, then unlabeled frames are taken at even strides
    /// from the frames not yet assigned; whatever is left trains.
    pub fn assign(frames: usize, spec: &SplitSpec) -> Result<Self> {
        spec.validate()?;
        let count = |f: f64| (f * frames as f64).round() as usize;
        let mut remaining: Vec<usize> = (0..frames).collect();
        let test = take_strided(&mut remaining, count(spec.test));
        let val = take_strided(&mut remaining, count(spec.val));
        let unlabeled = take_strided(&mut remaining, count(spec.unlabeled));
        Ok(Self {
            train: remaining,
            val,
            test,
            unlabeled,
        })
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            "unlabeled" => Some(&self.unlabeled),
            _ => None,
        }
    }

    fn check(&self, frames: usize) -> Result<()> {
        let mut seen = vec![false; frames];
        for &i in self.train.iter().chain(&self.val).chain(&self.test).chain(&self.unlabeled) {
            if i >= frames {
                return Err(Error::invalid("splits", format!("index {i} out of range for {frames} frames")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("splits", format!("frame {i} assigned twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: ImageTensor,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    /// Scene volume in the recentred frame.
    pub bounds: SceneBounds,
    pub frames: Vec<Frame>,
    pub splits: Splits,
    pub seed: u64,
    /// Rigid map applied to the source poses (`P' = T ∘ P`).
    pub recentering: Pose,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    intrinsics: CameraIntrinsics,
    bounds: SceneBounds,
    splits: Splits,
    seed: u64,
    recentering: Pose,
    frame_ids: Vec<String>,
}

const FORMAT: &str = "photoreg-dataset";
const VERSION: u32 = 1;

impl Dataset {
    /// Recentres the poses on the mean training-camera centre and moves the
    /// bounds along with them. Images are quantised to 8 bits so the dataset
    /// survives a round trip through disk unchanged.
    pub fn assemble(
        intrinsics: CameraIntrinsics,
        bounds: SceneBounds,
        frames: Vec<Frame>,
        splits: Splits,
        seed: u64,
    ) -> Result<Self> {
        intrinsics.validate()?;
        splits.check(frames.len())?;
        if splits.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        for f in &frames {
            if f.image.width() != intrinsics.width || f.image.height() != intrinsics.height {
                return Err(Error::Shape {
                    what: "frame image",
                    expected: format!("{}x{}", intrinsics.width, intrinsics.height),
                    got: format!("{}x{}", f.image.width(), f.image.height()),
                });
            }
        }
        let train: Vec<Pose> = splits.train.iter().map(|&i| frames[i].pose).collect();
        let (_, recentering) = recenter_poses(&train)?;
        let frames = frames
            .into_iter()
            .map(|f| Frame {
                id: f.id,
                image: f.image.quantized(),
                pose: recentering.compose(&f.pose),
            })
            .collect();
        Ok(Self {
            intrinsics,
            bounds: bounds.transformed(&recentering),
            frames,
            splits,
            seed,
            recentering,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn images(&self, idx: &[usize]) -> Vec<&ImageTensor> {
        idx.iter().map(|&i| &self.frames[i].image).collect()
    }

    pub fn poses(&self, idx: &[usize]) -> Vec<Pose> {
        idx.iter().map(|&i| self.frames[i].pose).collect()
    }

    /// Mean colour over the given frames.
    pub fn mean_color(&self, idx: &[usize]) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for &i in idx {
            for px in self.frames[i].image.data().chunks(3) {
                for c in 0..3 {
                    sum[c] += px[c];
                }
                n += 1;
            }
        }
        sum.map(|s| s / n.max(1) as f64)
    }

    /// Directory with `meta.json`, `poses.txt` and `frames/<id>.ppm`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(Error::io(&frames_dir))?;
        let meta = Meta {
            format: FORMAT.into(),
            version: VERSION,
            intrinsics: self.intrinsics,
            bounds: self.bounds,
            splits: self.splits.clone(),
            seed: self.seed,
            recentering: self.recentering,
            frame_ids: self.frames.iter().map(|f| f.id.clone()).collect(),
        };
        let meta_path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("serializable");
        std::fs::write(&meta_path, text + "\n").map_err(Error::io(&meta_path))?;
        let poses: Vec<Pose> = self.frames.iter().map(|f| f.pose).collect();
        let pose_path = dir.join("poses.txt");
        std::fs::write(&pose_path, format_poses(&poses)).map_err(Error::io(&pose_path))?;
        for f in &self.frames {
            f.image.write_ppm(&frames_dir.join(format!("{}.ppm", f.id)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: Meta = serde_json::from_str(&text).map_err(Error::json(&meta_path))?;
        if meta.format != FORMAT || meta.version != VERSION {
            return Err(Error::invalid(
                "dataset",
                format!("{} is {} v{}, expected {FORMAT} v{VERSION}", meta_path.display(), meta.format, meta.version),
            ));
        }
        let pose_path = dir.join("poses.txt");
        let text = std::fs::read_to_string(&pose_path).map_err(Error::io(&pose_path))?;
        let poses = parse_poses(&text, &pose_path)?;
        if poses.len() != meta.frame_ids.len() {
            return Err(Error::Shape {
                what: "poses.txt lines",
                expected: meta.frame_ids.len().to_string(),
                got: poses.len().to_string(),
            });
        }
        meta.splits.check(poses.len())?;
        let frames = meta
            .frame_ids
            .into_iter()
            .zip(poses)
            .map(|(id, pose)| {
                let image = ImageTensor::read_ppm(&dir.join("frames").join(format!("{id}.ppm")))?;
                Ok(Frame { id, image, pose })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intrinsics: meta.intrinsics,
            bounds: meta.bounds,
            frames,
            splits: meta.splits,
            seed: meta.seed,
            recentering: meta.recentering,
        })
    }
}

/// Renders every pose of the trajectory with the oracle and assigns splits.
pub fn build_dataset(
    scene: &SceneSpec,
    trajectory: &TrajectorySpec,
    k: &CameraIntrinsics,
    splits: &SplitSpec,
    oracle_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = generate_trajectory(scene, trajectory, &mut rng)?;
    dataset_from_poses(scene, &poses, k, splits, oracle_samples, seed)
}

/// Renders the given poses with the oracle and assigns splits.
pub fn dataset_from_poses(
    scene: &SceneSpec,
    poses: &[Pose],
    k: &CameraIntrinsics,
    splits: &SplitSpec,
    oracle_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    scene.validate()?;
    let assigned = Splits::assign(poses.len(), splits)?;
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            Ok(Frame {
                id: format!("{i:05}"),
                image: oracle_render(scene, pose, k, oracle_samples)?,
                pose: *pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::assemble(*k, scene.bounds, frames, assigned, seed)
}

/// Every `d`-th entry of `indices`, starting with the first.
pub fn subsample_window(indices: &[usize], d: usize) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::invalid("spacing window", "must be at least 1"));
    }
    Ok(indices.iter().step_by(d).copied().collect())
}

/// Window 5 for sequences of up to 2000 frames, 10 beyond.
pub fn auto_window(frames: usize) -> usize {
    if frames <= 2000 {
        5
    } else {
        10
    }
}
