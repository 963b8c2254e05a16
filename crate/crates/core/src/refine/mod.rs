//! Pose refinement against RGB edges (robust IRLS) and depth (projective
//! point-to-plane ICP), verification scores and best-pose selection.

mod edges;
mod icp;

pub use edges::{refine_edges, scene_edges, verify_contour, EdgeMap};
pub use icp::{refine_icp, verify_normals, DepthFrame};

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose, TriMesh};
use crate::lifting::HypothesisPool;
use crate::raster::RenderBuffers;
use crate::{Error, Result};

/// Below this many correspondences a refiner leaves the pose untouched.
pub const MIN_CORRESPONDENCES: usize = 6;
/// Maximum number of step halvings when an update increases the objective.
pub const MAX_HALVINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Correspondence-search rounds of the edge refiner.
    pub rounds: usize,
    /// Reweighting / Gauss-Newton steps per edge round.
    pub inner_iterations: usize,
    pub search_radius_px: f64,
    pub search_step_px: f64,
    /// Edge pixels whose orientation deviates more than this from the
    /// contour normal are skipped during search (degrees).
    pub edge_angle_gate_deg: f64,
    /// Geman-McLure scale, pixels.
    pub gm_scale: f64,
    /// Association rounds of the ICP refiner.
    pub icp_rounds: usize,
    pub icp_depth_gate: f64,
    pub icp_normal_gate_deg: f64,
    /// Association window radius (pixels) of the first ICP rounds, halved
    /// level by level down to same-pixel association.
    pub icp_search_px: usize,
    /// Shift the hypothesis along its viewing ray by the median depth
    /// difference before ICP.
    pub icp_depth_align: bool,
    /// Depth differences beyond this (meters) are ignored by the alignment.
    pub icp_align_window: f64,
    /// Stop once an update moves less than this (radians plus meters).
    pub tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            inner_iterations: 10,
            search_radius_px: 20.0,
            search_step_px: 1.0,
            edge_angle_gate_deg: 60.0,
            gm_scale: 5.0,
            icp_rounds: 30,
            icp_depth_gate: 0.02,
            icp_normal_gate_deg: 45.0,
            icp_search_px: 16,
            icp_depth_align: true,
            icp_align_window: 0.15,
            tolerance: 1e-7,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rounds > 0
            && self.inner_iterations > 0
            && self.search_radius_px > 0.0
            && self.search_step_px > 0.0
            && self.edge_angle_gate_deg > 0.0
            && self.gm_scale > 0.0
            && self.icp_rounds > 0
            && self.icp_depth_gate > 0.0
            && self.icp_normal_gate_deg > 0.0
            && self.icp_align_window > 0.0
            && self.tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("refinement parameters must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Converged,
    IterationLimit,
    /// Too few correspondences; pose returned unchanged.
    Skipped,
}

/// One solver step: objective over the step's fixed correspondences before
/// and after the (possibly halved) update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub step: usize,
    pub correspondences: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    pub halvings: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub pose: Pose,
    /// Mean robust residual (edges, pixels²) or RMS point-to-plane distance
    /// (ICP, meters) at the final pose.
    pub residual: f64,
    pub status: RefineStatus,
    pub trace: Vec<TraceRow>,
}

impl RefineOutcome {
    fn skipped(pose: Pose) -> Self {
        Self {
            pose,
            residual: f64::NAN,
            status: RefineStatus::Skipped,
            trace: Vec::new(),
        }
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("round,step,correspondences,objective_before,objective_after,halvings,accepted\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{:.9e},{:.9e},{},{}\n",
            r.round, r.step, r.correspondences, r.objective_before, r.objective_after, r.halvings, r.accepted
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Solves the damped normal equations `(H + λ·diag(H)) x = -g`.
pub(crate) fn solve_twist(h: &Matrix6<f64>, g: &Vector6<f64>) -> Option<Vector6<f64>> {
    let mut a = *h;
    for k in 0..6 {
        a[(k, k)] += 1e-9 * a[(k, k)].max(1e-12);
    }
    a.cholesky().map(|c| -c.solve(g))
}

/// Which refiner runs on each hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    None,
    Edges,
    #[default]
    Icp,
    Both,
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "edges" => Ok(Self::Edges),
            "icp" => Ok(Self::Icp),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown refinement mode {s:?}"))),
        }
    }
}

impl RefineMode {
    pub fn uses_depth(self) -> bool {
        matches!(self, Self::Icp | Self::Both)
    }
}

/// Preprocessed observations of one frame, shared read-only by workers.
pub struct SceneObservation<'a> {
    pub edges: &'a EdgeMap,
    pub depth: Option<&'a DepthFrame>,
}

/// Refines and verifies every hypothesis of `pool` in parallel. Contour
/// verification is used without depth, normal verification with it.
pub fn refine_pool(
    pool: &mut HypothesisPool,
    mesh: &TriMesh,
    scene: &SceneObservation,
    cam: &CameraIntrinsics,
    cfg: &RefineConfig,
    mode: RefineMode,
) -> Result<()> {
    if mode.uses_depth() && scene.depth.is_none() {
        return Err(Error::Config(format!("refinement mode {mode:?} needs scene depth")));
    }
    let results: Vec<(Pose, f64)> = pool
        .hypotheses
        .par_iter()
        .map_init(
            || RenderBuffers::for_camera(cam),
            |buf, h| {
                let mut pose = h.pose;
                if matches!(mode, RefineMode::Edges | RefineMode::Both) {
                    pose = refine_edges(&pose, mesh, scene.edges, cam, cfg, buf).pose;
                }
                if let (true, Some(d)) = (mode.uses_depth(), scene.depth) {
                    pose = refine_icp(&pose, mesh, d, cam, cfg, buf).pose;
                }
                let score = match scene.depth {
                    Some(d) if mode.uses_depth() => {
                        verify_normals(&pose, mesh, d, cam, Some(cfg.icp_depth_gate), buf)
                    }
                    _ => verify_contour(&pose, mesh, scene.edges, cam, buf),
                };
                (pose, score)
            },
        )
        .collect();
    for (h, (pose, score)) in pool.hypotheses.iter_mut().zip(results) {
        if mode != RefineMode::None {
            h.refined = Some(pose);
        }
        h.verification = Some(score);
    }
    Ok(())
}

/// Index of the highest score; ties go to the earliest entry.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(k);
        }
    }
    best
}

/// Best hypothesis of a verified pool: `(index, final pose, score)`.
pub fn select_pool_best(pool: &HypothesisPool) -> Option<(usize, Pose, f64)> {
    let scores: Vec<f64> = pool
        .hypotheses
        .iter()
        .map(|h| h.verification.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let k = select_best(&scores)?;
    Some((k, *pool.hypotheses[k].final_pose(), scores[k]))
}
