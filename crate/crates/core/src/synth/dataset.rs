use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scene, Annotation, Scene, SceneModel, SceneSpec};
use crate::geometry::CameraIntrinsics;
use crate::pnm;
use crate::raster::RgbImage;
use crate::viewspace::ViewSpaceParams;
use crate::{Error, Result};

pub const FRAMES_DIR: &str = "frames";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SceneSpec,
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub viewspace: ViewSpaceParams,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameAnnotations {
    frame: usize,
    annotations: Vec<Annotation>,
}

fn frame_stem(dir: &Path, frame: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{frame:06}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_frame(dir: &Path, frame: usize, scene: &Scene) -> Result<()> {
    let stem = frame_stem(dir, frame);
    pnm::write_ppm(with_suffix(&stem, ".ppm"), &scene.image)?;
    pnm::write_depth_pgm(with_suffix(&stem, ".depth.pgm"), &scene.depth, scene.image.width, scene.image.height)?;
    let ann = FrameAnnotations {
        frame,
        annotations: scene.annotations.clone(),
    };
    let path = with_suffix(&stem, ".json");
    std::fs::write(&path, serde_json::to_string_pretty(&ann)?).map_err(|e| Error::io(&path, e))
}

/// Generates `spec.frames` frames in parallel and writes them with a manifest.
pub fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    models: &[SceneModel],
    viewspace: &ViewSpaceParams,
    cam: &CameraIntrinsics,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let frames = dir.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    (0..spec.frames).into_par_iter().try_for_each(|f| {
        let scene = generate_scene(spec, models, &viewspace.inplane, cam, f)?;
        write_frame(dir, f, &scene)
    })?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed: spec.seed,
        camera: *cam,
        viewspace: *viewspace,
        frames: spec.frames,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let s = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("{} not found; run `gen-data` first", path.display())),
        _ => Error::io(&path, e),
    })?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Image, depth (meters) and annotations of one stored frame.
pub fn load_frame(dir: &Path, frame: usize) -> Result<(RgbImage, Vec<f64>, Vec<Annotation>)> {
    let stem = frame_stem(dir, frame);
    let image = pnm::read_ppm(with_suffix(&stem, ".ppm"))?;
    let (depth, w, h) = pnm::read_depth_pgm(with_suffix(&stem, ".depth.pgm"))?;
    if (w, h) != (image.width, image.height) {
        return Err(Error::Data(format!("frame {frame}: image and depth sizes differ")));
    }
    let path = with_suffix(&stem, ".json");
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ann: FrameAnnotations = serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((image, depth, ann.annotations))
}
