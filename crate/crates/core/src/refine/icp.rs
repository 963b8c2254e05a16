use nalgebra::{Matrix6, Vector3, Vector6};

use super::{solve_twist, RefineConfig, RefineOutcome, RefineStatus, TraceRow, MAX_HALVINGS, MIN_CORRESPONDENCES};
use crate::geometry::{CameraIntrinsics, Pose, TriMesh};
use crate::raster::{depth_to_normals, render_into, RenderBuffers};

/// Scene depth with back-projected points and estimated normals.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    /// Meters; 0 marks missing depth.
    pub depth: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl DepthFrame {
    pub fn new(depth: Vec<f64>, width: usize, height: usize, cam: &CameraIntrinsics) -> Self {
        assert_eq!(depth.len(), width * height, "depth size must match the frame");
        let normals = depth_to_normals(&depth, width, height, cam);
        let points = (0..width * height)
            .map(|k| cam.backproject_unchecked(&CameraIntrinsics::pixel_center(k % width, k / width), depth[k]))
            .collect();
        Self {
            width,
            height,
            depth,
            points,
            normals,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.depth.iter().all(|&d| !(d > 0.0))
    }
}

const MAX_STEP_ROTATION: f64 = 0.1;
const MAX_STEP_TRANSLATION: f64 = 0.02;
/// Twist norm below which a search window counts as settled.
const LEVEL_MOTION: f64 = 1e-3;
const MAX_LEVEL_ROUNDS: usize = 4;
/// Windowed association samples every `radius / WINDOW_SAMPLING`-th rendered pixel.
const WINDOW_SAMPLING: usize = 4;

/// Model point, scene point, scene normal.
type Correspondence = (Vector3<f64>, Vector3<f64>, Vector3<f64>);

/// Pairs rendered pixels with scene points. With `radius = 0` each rendered
/// pixel takes the scene point at the same pixel, subject to the depth and
/// normal gates; otherwise the nearest depth-gated scene point within the
/// window, over every `radius / WINDOW_SAMPLING`-th rendered pixel.
fn associate(
    pose: &Pose,
    frame: &DepthFrame,
    buf: &RenderBuffers,
    cam: &CameraIntrinsics,
    cfg: &RefineConfig,
    radius: usize,
) -> Vec<Correspondence> {
    let cos_gate = cfg.icp_normal_gate_deg.to_radians().cos();
    let inv = pose.inverse();
    let (w, h) = (buf.width as isize, buf.height as isize);
    let stride = (radius / WINDOW_SAMPLING).max(1) as isize;
    let r = radius as isize;
    let mut out = Vec::new();
    for k in 0..buf.mask.len() {
        let (i, j) = ((k % buf.width) as isize, (k / buf.width) as isize);
        if !buf.mask[k] || i % stride != 0 || j % stride != 0 {
            continue;
        }
        let p = cam.backproject_unchecked(&CameraIntrinsics::pixel_center(i as usize, j as usize), buf.depth[k]);
        let gate = cfg.icp_depth_gate + radius as f64 * p.z / cam.fx;
        let mut best: Option<(f64, usize)> = None;
        for jj in (j - r).max(0)..=(j + r).min(h - 1) {
            for ii in (i - r).max(0)..=(i + r).min(w - 1) {
                let m = (jj * w + ii) as usize;
                let Some(nq) = frame.normals[m] else { continue };
                let q = frame.points[m];
                let d2 = if r == 0 { (p.z - q.z).powi(2) } else { (p - q).norm_squared() };
                if d2 > gate * gate || (r == 0 && buf.normals[k].dot(&nq) < cos_gate) {
                    continue;
                }
                if best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, m));
                }
            }
        }
        if let Some((_, m)) = best {
            out.push((inv.transform(&p), frame.points[m], frame.normals[m].expect("checked above")));
        }
    }
    out
}

fn objective(pose: &Pose, corr: &[Correspondence]) -> f64 {
    corr.iter()
        .map(|(x, q, n)| n.dot(&(pose.transform(x) - q)).powi(2))
        .sum()
}

/// Moves the pose along the ray through its centroid by the dominant depth
/// difference to the scene over the rendered mask. Differences are grouped in
/// runs spanning twice the depth gate; the farthest run holding at least half
/// as many pixels as the densest one gives the median, so a nearer occluder
/// covering part of the mask does not pull the pose.
fn align_depth(pose: &Pose, mesh: &TriMesh, frame: &DepthFrame, cam: &CameraIntrinsics, cfg: &RefineConfig, buf: &mut RenderBuffers) -> Pose {
    render_into(mesh, pose, cam, buf);
    let mut diffs: Vec<f64> = (0..buf.mask.len())
        .filter(|&k| buf.mask[k] && frame.depth[k] > 0.0)
        .map(|k| frame.depth[k] - buf.depth[k])
        .filter(|d| d.abs() <= cfg.icp_align_window)
        .collect();
    if diffs.len() < MIN_CORRESPONDENCES {
        return *pose;
    }
    diffs.sort_by(f64::total_cmp);
    let mut runs = Vec::with_capacity(diffs.len());
    let mut lo = 0;
    for hi in 0..diffs.len() {
        while diffs[hi] - diffs[lo] > 2.0 * cfg.icp_depth_gate {
            lo += 1;
        }
        runs.push((lo, hi + 1));
    }
    let densest = runs.iter().map(|(a, b)| b - a).max().unwrap_or(0);
    let (a, b) = runs
        .into_iter()
        .rev()
        .find(|(a, b)| 2 * (b - a) >= densest)
        .expect("the densest run qualifies");
    let med = diffs[(a + b) / 2];
    let c = pose.transform(&mesh.centroid());
    pose.with_translation(pose.translation() + c * (med / c.z))
}

/// Projective point-to-plane ICP.
///
/// Association starts with a search window of `icp_search_px` pixels. The
/// window halves once an update moves less than `LEVEL_MOTION`, after
/// `MAX_LEVEL_ROUNDS` rounds at one radius, or when an update is rejected.
/// At radius 0 rendered pixels pair with the scene point at the same pixel,
/// kept when depth and normal agree within the configured gates, which
/// drops pixels covered by occluders. Each round solves the linearized
/// normal equations in closed form with a capped step; an update that
/// raises the objective is halved up to three times and, at radius 0,
/// otherwise stops the refinement.
pub fn refine_icp(
    init: &Pose,
    mesh: &TriMesh,
    frame: &DepthFrame,
    cam: &CameraIntrinsics,
    cfg: &RefineConfig,
    buf: &mut RenderBuffers,
) -> RefineOutcome {
    if frame.is_empty() {
        return RefineOutcome::skipped(*init);
    }
    let mut pose = if cfg.icp_depth_align {
        align_depth(init, mesh, frame, cam, cfg, buf)
    } else {
        *init
    };
    let mut trace = Vec::new();
    let mut status = RefineStatus::IterationLimit;
    let mut residual = f64::NAN;
    let mut radius = cfg.icp_search_px;
    let mut level_rounds = 0;
    for round in 0..cfg.icp_rounds {
        render_into(mesh, &pose, cam, buf);
        level_rounds += 1;
        let corr = associate(&pose, frame, buf, cam, cfg, radius);
        if corr.len() < MIN_CORRESPONDENCES {
            if round == 0 {
                return RefineOutcome::skipped(*init);
            }
            break;
        }
        let before = objective(&pose, &corr);
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, q, n) in &corr {
            let p = pose.transform(x);
            let r = n.dot(&(p - q));
            let pn = p.cross(n);
            let j = Vector6::new(pn.x, pn.y, pn.z, n.x, n.y, n.z);
            h += j * j.transpose();
            g += j * r;
        }
        let Some(delta) = solve_twist(&h, &g) else { break };
        // poorly constrained directions get a bounded step
        let (rot, shift) = (delta.fixed_rows::<3>(0).norm(), delta.fixed_rows::<3>(3).norm());
        let mut scale = (MAX_STEP_ROTATION / rot).min(MAX_STEP_TRANSLATION / shift).min(1.0);
        let mut halvings = 0;
        let mut accepted = None;
        loop {
            let cand = pose.left_update(&(delta * scale));
            let after = objective(&cand, &corr);
            if after <= before {
                accepted = Some((cand, after));
                break;
            }
            if halvings == MAX_HALVINGS {
                break;
            }
            halvings += 1;
            scale *= 0.5;
        }
        trace.push(TraceRow {
            round,
            step: 0,
            correspondences: corr.len(),
            objective_before: before,
            objective_after: accepted.map_or(before, |a| a.1),
            halvings,
            accepted: accepted.is_some(),
        });
        let Some((cand, after)) = accepted else {
            if radius > 0 {
                (radius, level_rounds) = (radius / 2, 0);
                continue;
            }
            residual = (before / corr.len() as f64).sqrt();
            status = RefineStatus::Converged;
            break;
        };
        pose = cand;
        residual = (after / corr.len() as f64).sqrt();
        let motion = (delta * scale).norm();
        if radius > 0 {
            if motion < LEVEL_MOTION || level_rounds == MAX_LEVEL_ROUNDS {
                (radius, level_rounds) = (radius / 2, 0);
            }
        } else if motion < cfg.tolerance {
            status = RefineStatus::Converged;
            break;
        }
    }
    RefineOutcome {
        pose,
        residual,
        status,
        trace,
    }
}

/// Mean `|⟨rendered normal, scene normal⟩|` over rendered pixels that have a
/// scene normal. With `depth_gate`, pixels whose depths differ by more than
/// the gate count as 0.
pub fn verify_normals(
    pose: &Pose,
    mesh: &TriMesh,
    frame: &DepthFrame,
    cam: &CameraIntrinsics,
    depth_gate: Option<f64>,
    buf: &mut RenderBuffers,
) -> f64 {
    render_into(mesh, pose, cam, buf);
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..buf.mask.len() {
        if !buf.mask[k] {
            continue;
        }
        let Some(n) = frame.normals[k] else { continue };
        count += 1;
        if depth_gate.is_some_and(|g| (buf.depth[k] - frame.depth[k]).abs() > g) {
            continue;
        }
        sum += buf.normals[k].dot(&n).abs();
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).clamp(0.0, 1.0)
    }
}
