//! Directories of `<frame>.color.png` images with `<frame>.pose.txt` 4×4
//! camera-to-world matrices, as distributed with the 7-Scenes benchmark.

use super::{Dataset, Frame, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::field::{CameraIntrinsics, SceneBounds};
use crate::image::ImageTensor;
use crate::se3::{Pose, PoseVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const COLOR_SUFFIX: &str = ".color.png";
const POSE_SUFFIX: &str = ".pose.txt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SevenScenesImport {
    /// Focal length at the native resolution.
    pub focal: f64,
    pub native_width: usize,
    pub native_height: usize,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub splits: SplitSpec,
}

impl Default for SevenScenesImport {
    fn default() -> Self {
        Self {
            focal: 585.0,
            native_width: 640,
            native_height: 480,
            width: 64,
            height: 48,
            near: 0.5,
            far: 4.0,
            splits: SplitSpec::llff(),
        }
    }
}

fn parse_matrix(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("{e}"),
        })?;
    if vals.len() != 16 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("expected a 4x4 matrix, found {} values", vals.len()),
        });
    }
    let v: PoseVector = vals[..12].try_into().expect("twelve values");
    Ok(Pose::from_vector(&v))
}

/// Loads every image with its pose, sorted by file name; the homogeneous
/// row is dropped and images are resampled to the configured size. Bounds
/// enclose the camera centres padded by the far bound.
pub fn import_sevenscenes(dir: &Path, opts: &SevenScenesImport) -> Result<Dataset> {
    let mut images = BTreeMap::new();
    let mut poses = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(COLOR_SUFFIX) {
            images.insert(stem.to_string(), path);
        } else if let Some(stem) = name.strip_suffix(POSE_SUFFIX) {
            poses.insert(stem.to_string(), path);
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("image directory"));
    }
    if let Some(orphan) = poses.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::invalid("frame list", format!("pose {orphan} has no image")));
    }
    let k = CameraIntrinsics::new(opts.focal, opts.native_width, opts.native_height, opts.near, opts.far)?
        .resized(opts.width, opts.height);
    let mut frames = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let pose_path = poses.get(id).ok_or_else(|| Error::MissingPose(id.clone()))?;
        frames.push(Frame {
            id: id.clone(),
            image: ImageTensor::read_raster(path, opts.width, opts.height)?,
            pose: parse_matrix(pose_path)?,
        });
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for f in &frames {
        for i in 0..3 {
            min[i] = min[i].min(f.pose.translation[i] - opts.far);
            max[i] = max[i].max(f.pose.translation[i] + opts.far);
        }
    }
    let bounds = SceneBounds::new(min, max)?;
    let splits = Splits::assign(frames.len(), &opts.splits)?;
    Dataset::assemble(k, bounds, frames, splits, 0)
}

/// Writes the dataset's frames and (recentred) poses in the same layout.
pub fn export_sevenscenes(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for f in &dataset.frames {
        f.image.write_png(&dir.join(format!("{}{COLOR_SUFFIX}", f.id)))?;
        let v = f.pose.flatten();
        let mut text = String::new();
        for row in v.chunks(4) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            text.push_str(&cells.join(" "));
            text.push('\n');
        }
        text.push_str("0.0 0.0 0.0 1.0\n");
        let path = dir.join(format!("{}{POSE_SUFFIX}", f.id));
        std::fs::write(&path, text).map_err(Error::io(&path))?;
    }
    Ok(())
}
