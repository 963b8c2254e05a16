use nalgebra::{Matrix6, Vector2, Vector3, Vector6};

use super::{solve_twist, RefineConfig, RefineOutcome, RefineStatus, TraceRow, MAX_HALVINGS, MIN_CORRESPONDENCES};
use crate::geometry::{CameraIntrinsics, Pose, TriMesh};
use crate::raster::{extract_contour, mask_gradient, render_into, RenderBuffers, RgbImage};

/// Sobel response of a scene image.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    /// Unit gradient direction; zero where the magnitude is zero.
    pub orientation: Vec<Vector2<f64>>,
    pub mask: Vec<bool>,
}

impl EdgeMap {
    pub fn is_edge(&self, i: isize, j: isize) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height && self.mask[j as usize * self.width + i as usize]
    }

    pub fn orientation_at(&self, i: usize, j: usize) -> Vector2<f64> {
        self.orientation[j * self.width + i]
    }

    pub fn edge_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sobel gradients per color channel, keeping the strongest channel at each
/// pixel; a pixel is an edge when its magnitude reaches the mean plus one
/// standard deviation of all nonzero magnitudes. Border pixels have no
/// response.
pub fn scene_edges(image: &RgbImage) -> EdgeMap {
    let (w, h) = (image.width, image.height);
    let mut magnitude = vec![0.0; w * h];
    let mut orientation = vec![Vector2::zeros(); w * h];
    if w >= 3 && h >= 3 {
        for ch in 0..3 {
            let l = |i: usize, j: usize| image.data[j * w + i][ch] as f64;
            for j in 1..h - 1 {
                for i in 1..w - 1 {
                    let gx = (l(i + 1, j - 1) + 2.0 * l(i + 1, j) + l(i + 1, j + 1))
                        - (l(i - 1, j - 1) + 2.0 * l(i - 1, j) + l(i - 1, j + 1));
                    let gy = (l(i - 1, j + 1) + 2.0 * l(i, j + 1) + l(i + 1, j + 1))
                        - (l(i - 1, j - 1) + 2.0 * l(i, j - 1) + l(i + 1, j - 1));
                    let m = gx.hypot(gy);
                    let k = j * w + i;
                    if m > 1e-12 && m > magnitude[k] {
                        magnitude[k] = m;
                        orientation[k] = Vector2::new(gx / m, gy / m);
                    }
                }
            }
        }
    }
    let nz: Vec<f64> = magnitude.iter().copied().filter(|&m| m > 0.0).collect();
    let mask = if nz.is_empty() {
        vec![false; w * h]
    } else {
        let n = nz.len() as f64;
        let mean = nz.iter().sum::<f64>() / n;
        let sd = (nz.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
        // slack absorbs rounding when all magnitudes are equal
        let thr = (mean + sd) * (1.0 - 1e-9);
        magnitude.iter().map(|&m| m > 0.0 && m >= thr).collect()
    };
    EdgeMap {
        width: w,
        height: h,
        magnitude,
        orientation,
        mask,
    }
}

/// Bilinear sample of a per-pixel field at a continuous image position
/// (pixel centers at half-integers); outside the image counts as 0.
fn bilinear(f: &impl Fn(isize, isize) -> f64, p: Vector2<f64>) -> f64 {
    let (x, y) = (p.x - 0.5, p.y - 0.5);
    let (i, j) = (x.floor(), y.floor());
    let (fx, fy) = (x - i, y - j);
    let (i, j) = (i as isize, j as isize);
    (1.0 - fy) * ((1.0 - fx) * f(i, j) + fx * f(i + 1, j)) + fy * ((1.0 - fx) * f(i, j + 1) + fx * f(i + 1, j + 1))
}

/// Peak of `f` along `normal` near `start + s·normal` from a parabola
/// through three samples one pixel apart.
fn peak_along(f: &impl Fn(isize, isize) -> f64, start: Vector2<f64>, normal: Vector2<f64>, s: f64) -> f64 {
    let m = |t: f64| bilinear(f, start + normal * t);
    let (m0, mp, mm) = (m(s), m(s + 1.0), m(s - 1.0));
    let curv = mm - 2.0 * m0 + mp;
    if curv < 0.0 {
        s + (0.5 * (mm - mp) / curv).clamp(-1.0, 1.0)
    } else {
        s
    }
}

/// Nearest edge along `±normal` from `start`, nearest step first and the
/// outward side first on ties, as a sub-pixel distance along the normal.
fn search_edge(start: Vector2<f64>, normal: Vector2<f64>, edges: &EdgeMap, cfg: &RefineConfig) -> Option<f64> {
    let cos_gate = cfg.edge_angle_gate_deg.to_radians().cos();
    let steps = (cfg.search_radius_px / cfg.search_step_px).floor() as usize;
    let magnitude = |i: isize, j: isize| {
        if i < 0 || j < 0 || i as usize >= edges.width || j as usize >= edges.height {
            0.0
        } else {
            edges.magnitude[j as usize * edges.width + i as usize]
        }
    };
    for k in 0..=steps {
        for sign in [1.0, -1.0] {
            if k == 0 && sign < 0.0 {
                continue;
            }
            let s = sign * k as f64 * cfg.search_step_px;
            let p = start + normal * s;
            let (i, j) = (p.x.floor() as isize, p.y.floor() as isize);
            if edges.is_edge(i, j) && edges.orientation_at(i as usize, j as usize).dot(&normal).abs() >= cos_gate {
                return Some(peak_along(&magnitude, start, normal, s));
            }
        }
    }
    None
}

/// Sub-pixel silhouette position along the outward normal of a contour pixel.
fn silhouette_offset(buf: &RenderBuffers, start: Vector2<f64>, normal: Vector2<f64>) -> f64 {
    let (w, h) = (buf.width, buf.height);
    let magnitude = |i: isize, j: isize| {
        if i < 0 || j < 0 || i as usize >= w || j as usize >= h {
            0.0
        } else {
            mask_gradient(&buf.mask, w, h, i as usize, j as usize).norm()
        }
    };
    peak_along(&magnitude, start, normal, 0.5)
}

fn gm_rho(r2: f64, s2: f64) -> f64 {
    0.5 * s2 * r2 / (s2 + r2)
}

fn gm_weight(r2: f64, s2: f64) -> f64 {
    let a = s2 / (s2 + r2);
    a * a
}

/// Model point, matched edge pixel and the contour normal it was found along.
type Correspondence = (Vector3<f64>, Vector2<f64>, Vector2<f64>);

/// Robust objective `Σ ρ(⟨n, π(R·X + t) − y⟩)` over fixed correspondences.
fn objective(pose: &Pose, corr: &[Correspondence], cam: &CameraIntrinsics, s2: f64) -> f64 {
    let mut sum = 0.0;
    for (x, y, n) in corr {
        let p = pose.transform(x);
        if p.z <= 0.0 {
            return f64::INFINITY;
        }
        sum += gm_rho(n.dot(&(cam.project_unchecked(&p) - y)).powi(2), s2);
    }
    sum
}

/// Weighted Gauss-Newton system for a left twist at `pose`.
fn linearize(pose: &Pose, corr: &[Correspondence], cam: &CameraIntrinsics, s2: f64) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (x, y, n) in corr {
        let p = pose.transform(x);
        let r = n.dot(&(cam.project_unchecked(&p) - y));
        let w = gm_weight(r * r, s2);
        let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
        let dpi = nalgebra::Matrix2x3::new(
            cam.fx * iz, 0.0, -cam.fx * p.x * iz2,
            0.0, cam.fy * iz, -cam.fy * p.y * iz2,
        );
        // dP/dω = -[P]×, dP/dv = I
        let mut dp = nalgebra::Matrix3x6::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-p.cross_matrix()));
        dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
        let j: Vector6<f64> = (n.transpose() * dpi * dp).transpose();
        h += w * j * j.transpose();
        g += w * r * j;
    }
    (h, g)
}

/// Contour-to-edge alignment by iteratively reweighted Gauss-Newton with
/// Geman-McLure weights on the distance along the contour normal.
///
/// Each round renders the current pose, searches the nearest compatible scene
/// edge along each contour normal and then takes up to `inner_iterations`
/// reweighted steps on those fixed correspondences. A step that raises the
/// robust objective is halved up to three times and otherwise ends the round.
pub fn refine_edges(
    init: &Pose,
    mesh: &TriMesh,
    edges: &EdgeMap,
    cam: &CameraIntrinsics,
    cfg: &RefineConfig,
    buf: &mut RenderBuffers,
) -> RefineOutcome {
    let s2 = cfg.gm_scale * cfg.gm_scale;
    let mut pose = *init;
    let mut trace = Vec::new();
    let mut status = RefineStatus::IterationLimit;
    let mut best: Option<(f64, Pose)> = None;
    for round in 0..=cfg.rounds {
        let (corr, score) = associate(&pose, mesh, edges, cam, cfg, buf);
        if corr.len() < MIN_CORRESPONDENCES {
            if round == 0 {
                return RefineOutcome::skipped(*init);
            }
            break;
        }
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, pose));
        }
        if round == cfg.rounds {
            break;
        }
        let mut round_motion = 0.0;
        for step in 0..cfg.inner_iterations {
            let before = objective(&pose, &corr, cam, s2);
            let (h, g) = linearize(&pose, &corr, cam, s2);
            let Some(delta) = solve_twist(&h, &g) else { break };
            let mut scale = 1.0;
            let mut accepted = None;
            let mut halvings = 0;
            loop {
                let cand = pose.left_update(&(delta * scale));
                let after = objective(&cand, &corr, cam, s2);
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
                step,
                correspondences: corr.len(),
                objective_before: before,
                objective_after: accepted.map_or(before, |a| a.1),
                halvings,
                accepted: accepted.is_some(),
            });
            let Some((cand, _)) = accepted else { break };
            pose = cand;
            let motion = (delta * scale).norm();
            round_motion += motion;
            if motion < cfg.tolerance {
                break;
            }
        }
        if round_motion < cfg.tolerance {
            status = RefineStatus::Converged;
            break;
        }
    }
    let (residual, pose) = best.expect("round 0 scored");
    RefineOutcome {
        pose,
        residual,
        status,
        trace,
    }
}

/// Correspondences of a pose and its score.
///
/// Targets are the edge pixels nearest to the searched peak. The score is the
/// mean robust residual between the sub-pixel rendered silhouette and the
/// sub-pixel scene edge over all contour pixels, with pixels lacking an edge
/// at the saturated cost.
fn associate(
    pose: &Pose,
    mesh: &TriMesh,
    edges: &EdgeMap,
    cam: &CameraIntrinsics,
    cfg: &RefineConfig,
    buf: &mut RenderBuffers,
) -> (Vec<Correspondence>, f64) {
    let s2 = cfg.gm_scale * cfg.gm_scale;
    render_into(mesh, pose, cam, buf);
    let contour = extract_contour(buf, pose, cam);
    let mut corr = Vec::with_capacity(contour.len());
    let mut fine = Vec::with_capacity(contour.len());
    for c in contour.iter().filter(|c| c.normal.norm_squared() > 0.0) {
        let start = CameraIntrinsics::pixel_center(c.pixel.0, c.pixel.1);
        let Some(s) = search_edge(start, c.normal, edges, cfg) else { continue };
        corr.push((c.model_point, start + c.normal * s.round(), c.normal));
        let b = silhouette_offset(buf, start, c.normal);
        fine.push((c.model_point, start + c.normal * (s - b), c.normal));
    }
    let missing = contour.len() - corr.len();
    let score = (objective(pose, &fine, cam, s2) + missing as f64 * 0.5 * s2) / contour.len().max(1) as f64;
    (corr, score)
}

/// Mean over silhouette pixels of the best `|⟨contour normal, scene gradient⟩|`
/// among edge pixels in the 3×3 neighborhood (0 when there is none).
pub fn verify_contour(
    pose: &Pose,
    mesh: &TriMesh,
    edges: &EdgeMap,
    cam: &CameraIntrinsics,
    buf: &mut RenderBuffers,
) -> f64 {
    render_into(mesh, pose, cam, buf);
    let contour = extract_contour(buf, pose, cam);
    if contour.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for c in &contour {
        let (i, j) = (c.pixel.0 as isize, c.pixel.1 as isize);
        let mut best: f64 = 0.0;
        for dj in -1..=1 {
            for di in -1..=1 {
                if edges.is_edge(i + di, j + dj) {
                    let o = edges.orientation_at((i + di) as usize, (j + dj) as usize);
                    best = best.max(o.dot(&c.normal).abs());
                }
            }
        }
        sum += best;
    }
    (sum / contour.len() as f64).clamp(0.0, 1.0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::metrics::mean_reprojection_error;
    use crate::raster::render;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_image() -> RgbImage {
        let mut img = RgbImage::new(20, 12);
        for j in 0..12 {
            for i in 10..20 {
                img.set(i, j, [1.0, 1.0, 1.0]);
            }
        }
        img
    }

    #[test]
    fn constant_image_has_no_edges() {
        let mut img = RgbImage::new(16, 16);
        img.data.iter_mut().for_each(|p| *p = [0.4, 0.4, 0.4]);
        assert_eq!(scene_edges(&img).edge_count(), 0);
    }

    #[test]
    fn vertical_step_gives_horizontal_orientation() {
        let e = scene_edges(&step_image());
        assert!(e.edge_count() > 0);
        for j in 0..12 {
            for i in 0..20 {
                let k = j * 20 + i;
                if e.mask[k] {
                    assert!(i == 9 || i == 10, "edge at column {i}");
                    assert!((e.orientation[k] - Vector2::new(1.0, 0.0)).norm() < 1e-6);
                }
            }
        }
    }

    pub(crate) fn scene(mesh: &TriMesh, pose: &Pose, cam: &CameraIntrinsics) -> RgbImage {
        let buf = render(mesh, pose, cam);
        let mut img = buf.color_image();
        // faint textured background
        for j in 0..img.height {
            for i in 0..img.width {
                if !buf.mask[j * img.width + i] {
                    let (x, y) = (i as f32, j as f32);
                    let grain = ((i * 7919 + j * 104_729) % 97) as f32 / 97.0;
                    let v = 0.45 + 0.05 * (x / 7.0).sin() * (y / 11.0).cos() + 0.02 * grain;
                    img.set(i, j, [v, v, v]);
                }
            }
        }
        img
    }

    pub(crate) fn gt_pose() -> Pose {
        Pose::new(
            UnitQuaternion::from_euler_angles(0.4, -0.3, 0.9),
            Vector3::new(0.02, -0.01, 0.6),
        )
    }

    pub(crate) fn perturb(p: &Pose, rng: &mut ChaCha8Rng, deg: f64, px: f64, cam: &CameraIntrinsics) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let r = UnitQuaternion::from_scaled_axis(axis * deg.to_radians());
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let z = p.translation().z;
        let d = Vector3::new(dir.cos(), dir.sin(), 0.0) * px * z / cam.fx;
        Pose::new(r * p.rotation(), p.translation() + d)
    }

    #[test]
    fn contour_pixels_lie_near_detected_edges() {
        let (mesh, cam, gt) = (TriMesh::toy().unwrap(), CameraIntrinsics::kinect(), gt_pose());
        let edges = scene_edges(&scene(&mesh, &gt, &cam));
        let buf = render(&mesh, &gt, &cam);
        let contour = extract_contour(&buf, &gt, &cam);
        let near = contour
            .iter()
            .filter(|c| {
                let (i, j) = (c.pixel.0 as isize, c.pixel.1 as isize);
                (-2..=2).any(|dj| (-2..=2).any(|di| edges.is_edge(i + di, j + dj)))
            })
            .count();
        assert!(near as f64 >= 0.8 * contour.len() as f64, "{near}/{}", contour.len());
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (mesh, cam, gt) = (TriMesh::toy().unwrap(), CameraIntrinsics::kinect(), gt_pose());
        let edges = scene_edges(&scene(&mesh, &gt, &cam));
        let mut buf = RenderBuffers::for_camera(&cam);
        let out = refine_edges(&gt, &mesh, &edges, &cam, &RefineConfig::default(), &mut buf);
        assert!(out.pose.rotation_angle_to(&gt).to_degrees() < 0.2, "{}", out.pose.rotation_angle_to(&gt).to_degrees());
        assert!(out.pose.translation_distance(&gt) < 1e-3, "{}", out.pose.translation_distance(&gt));
    }

    #[test]
    fn converges_from_perturbation() {
        let (mesh, cam, gt) = (TriMesh::toy().unwrap(), CameraIntrinsics::kinect(), gt_pose());
        let edges = scene_edges(&scene(&mesh, &gt, &cam));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut buf = RenderBuffers::for_camera(&cam);
        let mut ok = 0;
        for _ in 0..6 {
            let init = perturb(&gt, &mut rng, 3.0, 10.0, &cam);
            let out = refine_edges(&init, &mesh, &edges, &cam, &RefineConfig::default(), &mut buf);
            assert!(out.trace.iter().filter(|t| t.accepted).all(|t| t.objective_after <= t.objective_before));
            if mean_reprojection_error(&gt, &out.pose, &mesh, &cam) < 1.5 {
                ok += 1;
            }
        }
        assert!(ok >= 5, "{ok}/6");
    }

    #[test]
    fn robust_to_clutter() {
        let (mesh, cam, gt) = (TriMesh::toy().unwrap(), CameraIntrinsics::kinect(), gt_pose());
        let mut edges = scene_edges(&scene(&mesh, &gt, &cam));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // move 30% of the edge pixels to random places with random orientation
        let ids: Vec<usize> = (0..edges.mask.len()).filter(|&k| edges.mask[k]).collect();
        for &k in &ids {
            if rng.random_bool(0.3) {
                edges.mask[k] = false;
                let m = rng.random_range(0..edges.mask.len());
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                edges.mask[m] = true;
                edges.orientation[m] = Vector2::new(a.cos(), a.sin());
            }
        }
        let mut buf = RenderBuffers::for_camera(&cam);
        let mut errs = Vec::new();
        for _ in 0..4 {
            let init = perturb(&gt, &mut rng, 3.0, 10.0, &cam);
            let out = refine_edges(&init, &mesh, &edges, &cam, &RefineConfig::default(), &mut buf);
            errs.push(mean_reprojection_error(&gt, &out.pose, &mesh, &cam));
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean < 3.0, "{errs:?}");
    }

    #[test]
    fn empty_edges_skip() {
        let (mesh, cam, gt) = (TriMesh::toy().unwrap(), CameraIntrinsics::kinect(), gt_pose());
        let edges = scene_edges(&RgbImage::new(cam.width as usize, cam.height as usize));
        let mut buf = RenderBuffers::for_camera(&cam);
        let out = refine_edges(&gt, &mesh, &edges, &cam, &RefineConfig::default(), &mut buf);
        assert_eq!(out.status, RefineStatus::Skipped);
        assert_eq!(out.pose, gt);
    }

    #[test]
    fn verification_scores() {
        let (mesh, cam, gt) = (TriMesh::toy().unwrap(), CameraIntrinsics::kinect(), gt_pose());
        let mut edges = scene_edges(&scene(&mesh, &gt, &cam));
        let mut buf = RenderBuffers::for_camera(&cam);
        let s = verify_contour(&gt, &mesh, &edges, &cam, &mut buf);
        assert!(s > 0.9 && s <= 1.0, "{s}");
        let far = gt.with_translation(gt.translation() + Vector3::new(0.25, 0.0, 0.0));
        assert!(verify_contour(&far, &mesh, &edges, &cam, &mut buf) < 0.05);
        edges.orientation.iter_mut().for_each(|o| *o = -*o);
        assert_eq!(verify_contour(&gt, &mesh, &edges, &cam, &mut buf), s);
    }
}
