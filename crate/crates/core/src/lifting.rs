//! Detections to 6D hypotheses: non-maximum suppression, projective
//! lifting through the canonical table and hypothesis pools.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::Detection;
use crate::geometry::{BBox, CameraIntrinsics, Pose, TriMesh};
use crate::raster::{projected_extent, CanonicalTable};
use crate::viewspace::ViewSpace;
use crate::{Error, Result};

pub const NMS_IOU: f64 = 0.45;
/// Boxes with a smaller diagonal (pixels) are not lifted.
pub const MIN_DIAGONAL: f64 = 2.0;

/// Greedy suppression: repeatedly keep the highest-scoring detection and drop
/// detections of the same class overlapping it by more than `iou_threshold`.
/// Equal scores keep input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score().total_cmp(&detections[a].score()));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &detections[k];
            o.class_index() == d.class_index() && o.bbox.iou(&d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

/// Pose of the cell `(view_id, inplane_id)` whose projection fits `bbox`.
///
/// Depth follows the diagonal ratio `z_s = (l_r / l_s) · z_r`; the model
/// centroid is back-projected from the box center plus the reference
/// centroid offset scaled by `l_s / l_r`.
pub fn lift(
    bbox: &BBox,
    view_id: usize,
    inplane_id: usize,
    table: &CanonicalTable,
    cam: &CameraIntrinsics,
) -> Result<Pose> {
    let l_s = bbox.diagonal();
    if !(l_s >= MIN_DIAGONAL) {
        return Err(Error::Domain(format!("box diagonal {l_s:.2} px too small to lift")));
    }
    let e = table.get(view_id, inplane_id).ok_or_else(|| {
        Error::Contract(format!("no canonical entry for view {view_id}, in-plane {inplane_id}"))
    })?;
    let scale = l_s / e.diag;
    let z = table.z_r / scale;
    let c = bbox.center() + e.offset() * scale;
    let centroid_cam = cam.backproject(&c, z)?;
    let r = e.rotation();
    Ok(Pose::new(r, centroid_cam - r * table.model_centroid()))
}

/// Fixed-point correction of a lifted pose: rescales depth and shifts the
/// centroid until the mesh's projected extent matches `bbox`. Zero iterations
/// return the pose unchanged.
pub fn correct_lift(pose: &Pose, bbox: &BBox, mesh: &TriMesh, cam: &CameraIntrinsics, iterations: usize) -> Pose {
    let centroid = mesh.centroid();
    let r = *pose.rotation();
    let mut p = *pose;
    for _ in 0..iterations {
        let e = projected_extent(mesh, &p, cam);
        let c = p.transform(&centroid);
        if !(e.diagonal() > 0.0) || c.z <= 0.0 {
            break;
        }
        let ratio = e.diagonal() / bbox.diagonal();
        let px = cam.project_unchecked(&c) + (bbox.center() - e.center());
        let z = c.z * ratio;
        match cam.backproject(&px, z) {
            Ok(c_new) => p = Pose::new(r, c_new - r * centroid),
            Err(_) => break,
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub view_id: usize,
    /// Index of the view among the detector's scored views.
    pub base_view_id: usize,
    pub inplane_id: usize,
    pub pose: Pose,
    /// Product of view and in-plane probabilities.
    pub prior_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<f64>,
}

impl Hypothesis {
    /// Refined pose if present, else the lifted one.
    pub fn final_pose(&self) -> &Pose {
        self.refined.as_ref().unwrap_or(&self.pose)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisPool {
    pub detection: Detection,
    pub hypotheses: Vec<Hypothesis>,
}

/// Indices of the `k` largest scores among `candidates`, best first, ties to
/// the earlier candidate.
fn top_k(scores: &[f64], candidates: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut c: Vec<usize> = candidates.collect();
    c.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    c.truncate(k);
    c
}

/// Lifts the `v_parse` most confident kept views times the `r_parse` most
/// confident in-plane bins, ordered by descending probability product.
///
/// `detection.view_scores` runs over the base (unfiltered) view set, so views
/// removed by the symmetry filter are never parsed.
pub fn build_pool(
    detection: &Detection,
    table: &CanonicalTable,
    vs: &ViewSpace,
    cam: &CameraIntrinsics,
    v_parse: usize,
    r_parse: usize,
) -> Result<HypothesisPool> {
    if v_parse == 0 || r_parse == 0 {
        return Err(Error::Config("parse counts must be at least 1".into()));
    }
    if detection.view_scores.len() != vs.base_len() || detection.inplane_scores.len() != vs.num_inplane() {
        return Err(Error::Contract(format!(
            "detection scores ({} views, {} in-plane) do not match the view space ({}, {})",
            detection.view_scores.len(),
            detection.inplane_scores.len(),
            vs.base_len(),
            vs.num_inplane()
        )));
    }
    let views = top_k(&detection.view_scores, vs.base_index().iter().copied(), v_parse);
    let inplanes = top_k(&detection.inplane_scores, 0..vs.num_inplane(), r_parse);
    let mut hypotheses = Vec::with_capacity(views.len() * inplanes.len());
    for &b in &views {
        let view_id = vs.view_id_for_base(b).expect("candidate drawn from kept views");
        for &m in &inplanes {
            hypotheses.push(Hypothesis {
                view_id,
                base_view_id: b,
                inplane_id: m,
                pose: lift(&detection.bbox, view_id, m, table, cam)?,
                prior_score: detection.view_scores[b] * detection.inplane_scores[m],
                refined: None,
                verification: None,
            });
        }
    }
    hypotheses.sort_by(|a, b| b.prior_score.total_cmp(&a.prior_score));
    Ok(HypothesisPool {
        detection: detection.clone(),
        hypotheses,
    })
}

/// Pools for many detections; detections that cannot be lifted are dropped.
pub fn build_pools(
    detections: &[Detection],
    table: &CanonicalTable,
    vs: &ViewSpace,
    cam: &CameraIntrinsics,
    v_parse: usize,
    r_parse: usize,
) -> Result<Vec<HypothesisPool>> {
    let pools: Vec<Result<HypothesisPool>> = detections
        .par_iter()
        .map(|d| build_pool(d, table, vs, cam, v_parse, r_parse))
        .collect();
    let mut out = Vec::with_capacity(pools.len());
    for p in pools {
        match p {
            Ok(p) => out.push(p),
            Err(Error::Domain(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Applies [`correct_lift`] to every hypothesis of a pool.
pub fn correct_pool(pool: &mut HypothesisPool, mesh: &TriMesh, cam: &CameraIntrinsics, iterations: usize) {
    let bbox = pool.detection.bbox;
    for h in &mut pool.hypotheses {
        h.pose = correct_lift(&h.pose, &bbox, mesh, cam, iterations);
    }
}

/// Centroid depth implied by a box of diagonal `l_s` for a cell of diagonal `l_r`.
pub fn projective_depth(l_s: f64, l_r: f64, z_r: f64) -> f64 {
    l_r / l_s * z_r
}

pub fn pools_to_json(pools: &[HypothesisPool]) -> Result<String> {
    Ok(serde_json::to_string_pretty(pools)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;
    use crate::raster::{precompute_canonical, CANONICAL_DISTANCE};
    use crate::raster::mask_box;
    use crate::viewspace::{build_viewspace, InplaneRange, SymmetryClass};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(bbox: BBox, score: f64, class: usize) -> Detection {
        let mut class_scores = vec![0.0; 3];
        class_scores[class] = score;
        class_scores[0] = 1.0 - score;
        Detection {
            prior_id: None,
            class_scores,
            view_scores: vec![],
            inplane_scores: vec![],
            offsets: [0.0; 4],
            bbox,
        }
    }

    fn oracle_nms(d: &[Detection], thr: f64) -> Vec<Detection> {
        let mut alive: Vec<bool> = vec![true; d.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..d.len() {
                if alive[i] && best.is_none_or(|b| d[i].score() > d[b].score()) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            for i in 0..d.len() {
                if alive[i] && d[i].class_index() == d[b].class_index() && d[i].bbox.iou(&d[b].bbox) > thr {
                    alive[i] = false;
                }
            }
            out.push(d[b].clone());
        }
        out
    }

    #[test]
    fn nms_basic() {
        let a = det(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9, 1);
        assert_eq!(nms(&[a.clone()], NMS_IOU), vec![a.clone()]);
        let b = det(BBox::new(0.0, 0.0, 10.0, 10.0), 0.8, 1);
        assert_eq!(nms(&[b.clone(), a.clone()], NMS_IOU), vec![a.clone()]);
        let c = det(BBox::new(0.0, 0.0, 10.0, 10.0), 0.8, 2);
        assert_eq!(nms(&[a.clone(), c.clone()], NMS_IOU).len(), 2);
    }

    #[test]
    fn nms_chain_matches_oracle() {
        // each box overlaps its neighbour by IoU 0.6
        let chain: Vec<Detection> = (0..5)
            .map(|k| det(BBox::new(k as f64 * 2.5, 0.0, 10.0 + k as f64 * 2.5, 10.0), 0.5 + 0.08 * ((k * 3) % 5) as f64, 1))
            .collect();
        let out = nms(&chain, NMS_IOU);
        assert_eq!(out, oracle_nms(&chain, NMS_IOU));
        assert_eq!(nms(&out, NMS_IOU), out);
    }

    #[test]
    fn nms_random_matches_oracle_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..12);
            let d: Vec<Detection> = (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..30.0);
                    let y = rng.random_range(0.0..30.0);
                    let s = rng.random_range(5.0..20.0);
                    det(BBox::new(x, y, x + s, y + s), rng.random_range(0.1..1.0), rng.random_range(1..3))
                })
                .collect();
            let out = nms(&d, NMS_IOU);
            assert_eq!(out, oracle_nms(&d, NMS_IOU));
            assert_eq!(nms(&out, NMS_IOU), out);
        }
    }

    fn setup() -> (TriMesh, ViewSpace, CanonicalTable, CameraIntrinsics) {
        let mesh = TriMesh::toy().unwrap();
        let vs = build_viewspace(1, true, SymmetryClass::None, InplaneRange { min_deg: -10.0, max_deg: 10.0, step_deg: 10.0 }).unwrap();
        let cam = CameraIntrinsics::kinect();
        let table = precompute_canonical(&mesh, &vs, &cam, CANONICAL_DISTANCE).unwrap();
        (mesh, vs, table, cam)
    }

    #[test]
    fn canonical_box_lifts_to_canonical_pose() {
        let (_, vs, table, cam) = setup();
        for v in 0..vs.num_views() {
            let e = table.get(v, 1).unwrap();
            let p = lift(&e.bbox, v, 1, &table, &cam).unwrap();
            let want = table.canonical_pose(v, 1).unwrap();
            assert!(p.translation_distance(&want) < 1e-9);
            let c = table.model_centroid();
            let a = cam.project_unchecked(&p.transform(&c));
            let b = cam.project_unchecked(&want.transform(&c));
            assert!((a - b).norm() < 1.0);
            assert!(p.rotation_angle_to(&want) < 1e-9);
        }
    }

    #[test]
    fn half_diagonal_doubles_depth() {
        let (_, _, table, cam) = setup();
        let e = table.get(3, 0).unwrap();
        let c = e.bbox.center();
        let half = BBox::from_center(c.x, c.y, e.bbox.width() / 2.0, e.bbox.height() / 2.0);
        let p = lift(&half, 3, 0, &table, &cam).unwrap();
        let centroid = p.transform(&table.model_centroid());
        assert!((centroid.z - 1.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn depth_scales_inversely_with_box(
            cx in 150.0f64..450.0,
            cy in 120.0f64..360.0,
            w in 20.0f64..120.0,
            h in 20.0f64..120.0,
            k in 0.3f64..3.0,
            v in 0usize..10,
        ) {
            let (_, _, table, cam) = setup();
            let b = BBox::from_center(cx, cy, w, h);
            let bk = BBox::from_center(cx, cy, w * k, h * k);
            let z1 = lift(&b, v, 1, &table, &cam).unwrap().transform(&table.model_centroid()).z;
            let zk = lift(&bk, v, 1, &table, &cam).unwrap().transform(&table.model_centroid()).z;
            proptest::prop_assert!((zk * k - z1).abs() < 1e-9 * z1);
        }
    }

    #[test]
    fn tiny_box_rejected() {
        let (_, _, table, cam) = setup();
        assert!(matches!(lift(&BBox::new(10.0, 10.0, 11.0, 11.0), 0, 0, &table, &cam), Err(Error::Domain(_))));
        assert!(lift(&BBox::new(10.0, 10.0, 50.0, 50.0), 999, 0, &table, &cam).is_err());
    }

    #[test]
    fn render_measure_lift_at_070() {
        let (mesh, vs, table, cam) = setup();
        let v = 4;
        let rot = vs.cell_rotation(v, 1);
        let t = Vector3::new(0.0, 0.0, 0.7) - rot * mesh.centroid();
        let gt = Pose::new(rot, t);
        let b = mask_box(&mesh, &gt, &cam).unwrap();
        let p = lift(&b, v, 1, &table, &cam).unwrap();
        let z_est = p.transform(&mesh.centroid()).z;
        assert!((z_est - 0.7).abs() / 0.7 < 0.02, "{z_est}");
        let c = correct_lift(&p, &b, &mesh, &cam, 3);
        let z_c = c.transform(&mesh.centroid()).z;
        assert!((z_c - 0.7).abs() / 0.7 < 0.02, "{z_c}");
        assert!(c.translation_distance(&gt) < 0.005, "{}", c.translation_distance(&gt));
    }

    #[test]
    fn correction_keeps_a_consistent_pose() {
        let (mesh, vs, _table, cam) = setup();
        let rot = vs.cell_rotation(9, 2);
        let gt = Pose::new(rot, Vector3::new(0.08, -0.05, 0.9) - rot * mesh.centroid());
        let ext = projected_extent(&mesh, &gt, &cam);
        let c = correct_lift(&gt, &ext, &mesh, &cam, 3);
        assert!(c.translation_distance(&gt) < 1e-9);
        assert_eq!(correct_lift(&gt, &BBox::new(0.0, 0.0, 5.0, 5.0), &mesh, &cam, 0), gt);
    }

    fn scored_detection(vs: &ViewSpace, rng: &mut ChaCha8Rng) -> Detection {
        let mut view_scores: Vec<f64> = (0..vs.base_len()).map(|_| rng.random_range(0..4) as f64).collect();
        let s: f64 = view_scores.iter().sum::<f64>() + 1e-9;
        view_scores.iter_mut().for_each(|x| *x /= s);
        let inplane_scores: Vec<f64> = (0..vs.num_inplane()).map(|_| rng.random_range(0..3) as f64 / 4.0).collect();
        Detection {
            prior_id: None,
            class_scores: vec![0.1, 0.9],
            view_scores,
            inplane_scores,
            offsets: [0.0; 4],
            bbox: BBox::new(280.0, 200.0, 360.0, 270.0),
        }
    }

    #[test]
    fn single_parse_is_argmax() {
        let (_, vs, table, cam) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = scored_detection(&vs, &mut rng);
        d.view_scores[7] = 5.0;
        d.inplane_scores[2] = 5.0;
        let pool = build_pool(&d, &table, &vs, &cam, 1, 1).unwrap();
        assert_eq!(pool.hypotheses.len(), 1);
        assert_eq!((pool.hypotheses[0].base_view_id, pool.hypotheses[0].inplane_id), (7, 2));
    }

    #[test]
    fn pool_matches_stable_sort_oracle() {
        let (_, vs, table, cam) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let d = scored_detection(&vs, &mut rng);
            let pool = build_pool(&d, &table, &vs, &cam, 3, 3).unwrap();
            assert_eq!(pool.hypotheses.len(), 9);
            // oracle: stable sort of (score, id) pairs
            let mut vo: Vec<(usize, f64)> = d.view_scores.iter().copied().enumerate().collect();
            vo.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut ro: Vec<(usize, f64)> = d.inplane_scores.iter().copied().enumerate().collect();
            ro.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut want = Vec::new();
            for &(v, sv) in &vo[..3] {
                for &(r, sr) in &ro[..3] {
                    want.push((v, r, sv * sr));
                }
            }
            want.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            let got: Vec<(usize, usize, f64)> =
                pool.hypotheses.iter().map(|h| (h.base_view_id, h.inplane_id, h.prior_score)).collect();
            assert_eq!(got, want);
            assert!(pool.hypotheses.iter().all(|h| h.pose.translation().z > 0.0));
        }
    }

    #[test]
    fn pool_never_parses_discarded_views() {
        let mesh = TriMesh::cylinder(0.05, 0.12, 24).unwrap();
        let vs = build_viewspace(2, true, SymmetryClass::Symmetric, InplaneRange { min_deg: 0.0, max_deg: 0.0, step_deg: 5.0 }).unwrap();
        let cam = CameraIntrinsics::kinect();
        let table = precompute_canonical(&mesh, &vs, &cam, CANONICAL_DISTANCE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = scored_detection(&vs, &mut rng);
            let pool = build_pool(&d, &table, &vs, &cam, 3, 1).unwrap();
            for h in &pool.hypotheses {
                assert_eq!(vs.base_index()[h.view_id], h.base_view_id);
            }
        }
    }

    #[test]
    fn mismatched_scores_rejected() {
        let (_, vs, table, cam) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = scored_detection(&vs, &mut rng);
        d.view_scores.pop();
        assert!(matches!(build_pool(&d, &table, &vs, &cam, 3, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_json_roundtrip() {
        let (_, vs, table, cam) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = build_pool(&scored_detection(&vs, &mut rng), &table, &vs, &cam, 2, 2).unwrap();
        let s = pools_to_json(std::slice::from_ref(&pool)).unwrap();
        let back: Vec<HypothesisPool> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0].hypotheses.len(), 4);
        assert_eq!(back[0].hypotheses[0].view_id, pool.hypotheses[0].view_id);
    }
}
