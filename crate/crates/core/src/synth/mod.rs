//! Synthetic scenes rendered over procedural or user backgrounds, their
//! annotations, and an oracle detector that stands in for a trained network.

mod background;
mod dataset;
mod oracle;

pub use background::{procedural_background, BackgroundSource};
pub use dataset::{load_frame, read_manifest, write_dataset, write_frame, DatasetManifest, FRAMES_DIR};
pub use oracle::{oracle_detector, OracleNoise};

use std::path::PathBuf;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_priors, GroundTruthBox, TrainingTargets};
use crate::geometry::{BBox, CameraIntrinsics, Pose, TriMesh};
use crate::raster::{mask_box, render, RgbImage};
use crate::viewspace::{view_rotation, InplaneRange, ViewSpace, ViewSpaceParams};
use crate::{Error, Result, SymmetryClass};

/// Where a model's mesh comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshSource {
    /// One of `toy`, `cube`, `cylinder`, `sphere`.
    Builtin(String),
    /// ASCII PLY file, meters.
    Path(PathBuf),
}

impl MeshSource {
    pub fn load(&self) -> Result<TriMesh> {
        match self {
            MeshSource::Builtin(name) => match name.as_str() {
                "toy" => TriMesh::toy(),
                "cube" => TriMesh::cuboid(0.1, 0.1, 0.1),
                "cylinder" => TriMesh::cylinder(0.04, 0.12, 32),
                "sphere" => TriMesh::sphere(0.05, 2),
                _ => Err(Error::Config(format!("unknown builtin mesh {name:?}"))),
            },
            MeshSource::Path(p) => TriMesh::from_ply_path(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub mesh: MeshSource,
    #[serde(default)]
    pub symmetry: SymmetryClass,
}

/// A loaded model with its view space.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub name: String,
    pub mesh: TriMesh,
    pub viewspace: ViewSpace,
    /// Views before symmetry filtering, used for pose sampling.
    pub base_views: Vec<Vector3<f64>>,
}

impl SceneModel {
    pub fn load(spec: &ModelSpec, params: &ViewSpaceParams) -> Result<Self> {
        let params = ViewSpaceParams {
            symmetry: spec.symmetry,
            ..*params
        };
        let base = ViewSpace::from_params(&ViewSpaceParams {
            symmetry: SymmetryClass::None,
            ..params
        })?;
        Ok(Self {
            name: spec.name.clone(),
            mesh: spec.mesh.load()?,
            viewspace: ViewSpace::from_params(&params)?,
            base_views: base.views().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub models: Vec<ModelSpec>,
    /// Inclusive range of instances per frame.
    pub instances: [usize; 2],
    /// Centroid depth range, meters.
    pub z_range: [f64; 2],
    /// Centroid pixels are drawn from this centered fraction of the image.
    pub central_fraction: f64,
    /// Instances hidden by more than this fraction are redrawn (up to 20 tries).
    pub max_occlusion: f64,
    pub background: BackgroundSource,
    /// Depth of the background plane at the image center, meters (0 = none).
    pub background_depth: f64,
    /// Additive brightness offset range.
    pub brightness: [f64; 2],
    /// Contrast factor range (about mid-gray).
    pub contrast: [f64; 2],
    pub seed: u64,
    pub frames: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            models: vec![ModelSpec {
                name: "toy".into(),
                mesh: MeshSource::Builtin("toy".into()),
                symmetry: SymmetryClass::None,
            }],
            instances: [1, 3],
            z_range: [0.4, 1.2],
            central_fraction: 0.8,
            max_occlusion: 0.5,
            background: BackgroundSource::Procedural,
            background_depth: 1.6,
            brightness: [-0.1, 0.1],
            contrast: [0.8, 1.2],
            seed: 0,
            frames: 10,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.models.is_empty()
            && self.instances[0] <= self.instances[1]
            && self.z_range[0] > 0.0
            && self.z_range[0] <= self.z_range[1]
            && self.central_fraction > 0.0
            && self.central_fraction <= 1.0
            && (0.0..=1.0).contains(&self.max_occlusion)
            && self.background_depth >= 0.0
            && self.brightness[0] <= self.brightness[1]
            && self.contrast[0] > 0.0
            && self.contrast[0] <= self.contrast[1];
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid scene specification".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Model index.
    pub class: usize,
    pub pose: Pose,
    /// Tight box of the full (unoccluded) mask.
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Kept view id in the model's view space.
    pub view_id: usize,
    /// Detector view output (base view set) for `view_id`.
    pub base_view_id: usize,
    pub inplane_id: usize,
    /// Hidden mask pixels over full mask pixels.
    pub occlusion: f64,
    pub visible_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    /// Meters; 0 marks missing depth.
    pub depth: Vec<f64>,
    pub annotations: Vec<Annotation>,
}

/// Per-frame generator: stream `frame` of the spec seed.
pub fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

/// Random pose: a view of the base sphere, uniform in-plane angle, uniform
/// depth and centroid pixel uniform in the central part of the image.
pub fn sample_pose(
    rng: &mut impl Rng,
    model: &SceneModel,
    inplane: &InplaneRange,
    spec: &SceneSpec,
    cam: &CameraIntrinsics,
) -> Pose {
    let view = model.base_views[rng.random_range(0..model.base_views.len())];
    let angle = if inplane.max_deg > inplane.min_deg {
        rng.random_range(inplane.min_deg..=inplane.max_deg)
    } else {
        inplane.min_deg
    };
    let rot: UnitQuaternion<f64> = view_rotation(&view, angle);
    let z = rng.random_range(spec.z_range[0]..=spec.z_range[1]);
    let f = spec.central_fraction;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let u = rng.random_range(w * (1.0 - f) / 2.0..=w * (1.0 + f) / 2.0);
    let v = rng.random_range(h * (1.0 - f) / 2.0..=h * (1.0 + f) / 2.0);
    let c = cam.backproject_unchecked(&nalgebra::Vector2::new(u, v), z);
    Pose::new(rot, c - rot * model.mesh.centroid())
}

/// Annotation fields that follow from the pose alone.
pub fn annotate(class: usize, pose: &Pose, model: &SceneModel, cam: &CameraIntrinsics) -> Option<Annotation> {
    let bbox = mask_box(&model.mesh, pose, cam)?;
    let (view_id, inplane_id) = model.viewspace.assign(pose.rotation());
    Some(Annotation {
        class,
        pose: *pose,
        bbox,
        view_id,
        base_view_id: model.viewspace.base_index()[view_id],
        inplane_id,
        occlusion: 0.0,
        visible_pixels: 0,
    })
}

fn plane_depth(cam: &CameraIntrinsics, d: f64) -> Vec<f64> {
    // plane through (0, 0, d) tilted away toward the top of the image
    let n = Vector3::new(0.0, -0.35, 1.0).normalize();
    let k = n.z * d;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut out = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            let p = CameraIntrinsics::pixel_center(i, j);
            let ray = Vector3::new((p.x - cam.cx) / cam.fx, (p.y - cam.cy) / cam.fy, 1.0);
            out[j * w + i] = k / n.dot(&ray);
        }
    }
    out
}

/// Renders one frame of `spec`. Instances are composited by depth over the
/// background; brightness and contrast are jittered; images are never flipped.
pub fn generate_scene(
    spec: &SceneSpec,
    models: &[SceneModel],
    inplane: &InplaneRange,
    cam: &CameraIntrinsics,
    frame: usize,
) -> Result<Scene> {
    spec.validate()?;
    if models.len() != spec.models.len() {
        return Err(Error::Contract("loaded models do not match the scene spec".into()));
    }
    let mut rng = frame_rng(spec.seed, frame);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut image = background::render_background(&spec.background, w, h, &mut rng)?;
    let mut depth = if spec.background_depth > 0.0 {
        plane_depth(cam, spec.background_depth)
    } else {
        vec![0.0; w * h]
    };
    let n = rng.random_range(spec.instances[0]..=spec.instances[1]);

    struct Placed {
        ann: Annotation,
        mask: Vec<bool>,
        depth: Vec<f64>,
        color: Vec<[f32; 3]>,
    }
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..n {
        let class = rng.random_range(0..models.len());
        let model = &models[class];
        let mut chosen = None;
        for _ in 0..20 {
            let pose = sample_pose(&mut rng, model, inplane, spec, cam);
            let buf = render(&model.mesh, &pose, cam);
            let Some(ann) = annotate(class, &pose, model, cam) else { continue };
            // occlusion against already placed instances, both ways
            let worst = placed
                .iter()
                .map(|p| hidden_fraction(&p.mask, &p.depth, &buf.mask, &buf.depth))
                .chain(placed.iter().map(|p| hidden_fraction(&buf.mask, &buf.depth, &p.mask, &p.depth)))
                .fold(0.0, f64::max);
            let cand = Placed {
                ann,
                mask: buf.mask,
                depth: buf.depth,
                color: buf.color,
            };
            if worst <= spec.max_occlusion {
                chosen = Some(cand);
                break;
            }
            chosen.get_or_insert(cand);
        }
        if let Some(c) = chosen {
            placed.push(c);
        }
    }

    // z-buffer composite
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for k in 0..w * h {
        let mut best = if depth[k] > 0.0 { depth[k] } else { f64::INFINITY };
        for (idx, p) in placed.iter().enumerate() {
            if p.mask[k] && p.depth[k] < best {
                best = p.depth[k];
                owner[k] = Some(idx);
            }
        }
        if let Some(idx) = owner[k] {
            depth[k] = best;
            image.data[k] = placed[idx].color[k];
        }
    }
    let b = rng.random_range(spec.brightness[0]..=spec.brightness[1]) as f32;
    let c = rng.random_range(spec.contrast[0]..=spec.contrast[1]) as f32;
    for px in image.data.iter_mut() {
        for ch in px.iter_mut() {
            *ch = ((*ch - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
    }
    let annotations = placed
        .iter()
        .enumerate()
        .map(|(idx, p)| {
            let full = p.mask.iter().filter(|&&m| m).count();
            let visible = owner.iter().filter(|&&o| o == Some(idx)).count();
            Annotation {
                occlusion: if full == 0 { 1.0 } else { 1.0 - visible as f64 / full as f64 },
                visible_pixels: visible,
                ..p.ann
            }
        })
        .collect();
    Ok(Scene {
        image,
        depth,
        annotations,
    })
}

/// Fraction of mask `a` hidden behind mask `b`.
fn hidden_fraction(a: &[bool], da: &[f64], b: &[bool], db: &[f64]) -> f64 {
    let mut full = 0usize;
    let mut hidden = 0usize;
    for k in 0..a.len() {
        if a[k] {
            full += 1;
            if b[k] && db[k] < da[k] {
                hidden += 1;
            }
        }
    }
    if full == 0 {
        0.0
    } else {
        hidden as f64 / full as f64
    }
}

/// Problems found when re-deriving an annotation from its pose.
pub fn validate_annotation(a: &Annotation, models: &[SceneModel], cam: &CameraIntrinsics) -> Vec<String> {
    let mut issues = Vec::new();
    let Some(model) = models.get(a.class) else {
        return vec![format!("class {} has no model", a.class)];
    };
    match annotate(a.class, &a.pose, model, cam) {
        None => issues.push("pose renders an empty mask".into()),
        Some(re) => {
            if re.bbox != a.bbox {
                issues.push(format!("box {:?} is not the tight mask box {:?}", a.bbox, re.bbox));
            }
            if (re.view_id, re.inplane_id) != (a.view_id, a.inplane_id) {
                issues.push(format!(
                    "ids ({}, {}) differ from assigned ({}, {})",
                    a.view_id, a.inplane_id, re.view_id, re.inplane_id
                ));
            }
            if re.base_view_id != a.base_view_id {
                issues.push("base view id inconsistent".into());
            }
        }
    }
    if !(0.0..=1.0).contains(&a.occlusion) {
        issues.push(format!("occlusion {} outside [0, 1]", a.occlusion));
    }
    issues
}

/// Target assignment for a frame; labels use the detector's view outputs.
pub fn make_training_targets(annotations: &[Annotation], priors: &[BBox]) -> Result<TrainingTargets> {
    let gts: Vec<GroundTruthBox> = annotations
        .iter()
        .map(|a| GroundTruthBox {
            bbox: a.bbox,
            class_index: a.class + 1,
            view_id: a.base_view_id,
            inplane_id: a.inplane_id,
        })
        .collect();
    match_priors(priors, &gts)
}
