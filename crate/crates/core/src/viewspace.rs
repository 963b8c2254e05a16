//! Discrete rotation space: icosphere viewpoints times in-plane bins.
//!
//! A view vector is the camera position on the unit sphere expressed in the
//! model frame; the camera looks at the model origin along `-view`. The
//! camera "up" direction is the model +z axis projected into the image
//! plane, or model +y at the two poles.

use std::collections::HashMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_LEVEL: u32 = 5;
const BOUNDARY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryClass {
    #[default]
    None,
    /// Mirror-symmetric about the model x-z plane: only views with y ≥ 0 are kept.
    SemiSymmetric,
    /// Rotationally symmetric about the model z-axis: only the meridian arc
    /// x = 0, y ≥ 0 is kept.
    Symmetric,
}

/// In-plane rotation bins `min, min + step, ..., max` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InplaneRange {
    pub min_deg: f64,
    pub max_deg: f64,
    pub step_deg: f64,
}

impl Default for InplaneRange {
    fn default() -> Self {
        Self {
            min_deg: -45.0,
            max_deg: 45.0,
            step_deg: 5.0,
        }
    }
}

impl InplaneRange {
    pub fn bins(&self) -> Result<Vec<f64>> {
        let span = self.max_deg - self.min_deg;
        let n = span / self.step_deg;
        if !(self.step_deg > 0.0) || span < 0.0 || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "in-plane step {} must divide range [{}, {}]",
                self.step_deg, self.min_deg, self.max_deg
            )));
        }
        let n = n.round() as usize;
        Ok((0..=n)
            .map(|k| self.min_deg + k as f64 * self.step_deg)
            .collect())
    }
}

/// Icosahedron in the golden-ratio orientation, subdivided `level` times with
/// renormalized edge midpoints.
///
/// Vertex order is deterministic: the 12 base vertices, then midpoints in
/// order of first creation. Faces are counter-clockwise seen from outside.
pub fn subdivided_icosahedron(level: u32) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>)> {
    if level > MAX_LEVEL {
        return Err(Error::Config(format!(
            "icosphere level {level} exceeds maximum {MAX_LEVEL}"
        )));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push((verts[a] + verts[b]).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Ok((verts, faces))
}

/// Unit vertices of the level-`level` icosphere (`10·4^level + 2` of them).
pub fn build_icosphere(level: u32) -> Result<Vec<Vector3<f64>>> {
    subdivided_icosahedron(level).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpaceParams {
    pub level: u32,
    pub hemisphere: bool,
    #[serde(default)]
    pub symmetry: SymmetryClass,
    #[serde(default)]
    pub inplane: InplaneRange,
}

impl Default for ViewSpaceParams {
    fn default() -> Self {
        Self {
            level: 3,
            hemisphere: true,
            symmetry: SymmetryClass::None,
            inplane: InplaneRange::default(),
        }
    }
}

/// The discretized rotation space of one object.
///
/// `views` holds the views kept after symmetry filtering. The unfiltered
/// (hemisphere-only) list is the "base" view set a detector scores;
/// `base_index[k]` is the position of `views[k]` within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ViewSpaceJson", into = "ViewSpaceJson")]
pub struct ViewSpace {
    level: u32,
    hemisphere: bool,
    symmetry: SymmetryClass,
    views: Vec<Vector3<f64>>,
    base_index: Vec<usize>,
    base_len: usize,
    inplane: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ViewSpaceJson {
    level: u32,
    hemisphere: bool,
    symmetry: SymmetryClass,
    views: Vec<[f64; 3]>,
    base_index: Vec<usize>,
    base_count: usize,
    inplane: Vec<f64>,
}

impl From<ViewSpace> for ViewSpaceJson {
    fn from(v: ViewSpace) -> Self {
        Self {
            level: v.level,
            hemisphere: v.hemisphere,
            symmetry: v.symmetry,
            views: v.views.iter().map(|p| [p.x, p.y, p.z]).collect(),
            base_index: v.base_index,
            base_count: v.base_len,
            inplane: v.inplane,
        }
    }
}

impl TryFrom<ViewSpaceJson> for ViewSpace {
    type Error = Error;

    fn try_from(j: ViewSpaceJson) -> Result<Self> {
        let views: Vec<Vector3<f64>> = j.views.iter().map(|p| Vector3::from(*p)).collect();
        let ok = !views.is_empty()
            && views.len() == j.base_index.len()
            && views.iter().all(|v| (v.norm() - 1.0).abs() < 1e-9)
            && j.base_index.windows(2).all(|w| w[0] < w[1])
            && j.base_index.iter().all(|&i| i < j.base_count)
            && !j.inplane.is_empty()
            && j.inplane.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Data("inconsistent view space JSON".into()));
        }
        Ok(ViewSpace {
            level: j.level,
            hemisphere: j.hemisphere,
            symmetry: j.symmetry,
            views,
            base_index: j.base_index,
            base_len: j.base_count,
            inplane: j.inplane,
        })
    }
}

fn keep_for_symmetry(v: &Vector3<f64>, symmetry: SymmetryClass) -> bool {
    match symmetry {
        SymmetryClass::None => true,
        SymmetryClass::SemiSymmetric => v.y >= -BOUNDARY_EPS,
        SymmetryClass::Symmetric => v.x.abs() <= BOUNDARY_EPS && v.y >= -BOUNDARY_EPS,
    }
}

pub fn build_viewspace(
    level: u32,
    hemisphere_only: bool,
    symmetry: SymmetryClass,
    inplane: InplaneRange,
) -> Result<ViewSpace> {
    let bins = inplane.bins()?;
    let base: Vec<Vector3<f64>> = build_icosphere(level)?
        .into_iter()
        .filter(|v| !hemisphere_only || v.z >= -BOUNDARY_EPS)
        .collect();
    let (base_index, views): (Vec<usize>, Vec<Vector3<f64>>) = base
        .iter()
        .enumerate()
        .filter(|(_, v)| keep_for_symmetry(v, symmetry))
        .map(|(i, v)| (i, *v))
        .unzip();
    if views.is_empty() {
        return Err(Error::Config(format!(
            "view space (level {level}, hemisphere {hemisphere_only}, {symmetry:?}) is empty"
        )));
    }
    Ok(ViewSpace {
        level,
        hemisphere: hemisphere_only,
        symmetry,
        views,
        base_index,
        base_len: base.len(),
        inplane: bins,
    })
}

impl ViewSpace {
    pub fn from_params(p: &ViewSpaceParams) -> Result<Self> {
        build_viewspace(p.level, p.hemisphere, p.symmetry, p.inplane)
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn hemisphere(&self) -> bool {
        self.hemisphere
    }

    pub fn symmetry(&self) -> SymmetryClass {
        self.symmetry
    }

    pub fn views(&self) -> &[Vector3<f64>] {
        &self.views
    }

    pub fn inplane_bins(&self) -> &[f64] {
        &self.inplane
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_inplane(&self) -> usize {
        self.inplane.len()
    }

    pub fn num_cells(&self) -> usize {
        self.views.len() * self.inplane.len()
    }

    /// Size of the unfiltered view set scored by a detector.
    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn base_index(&self) -> &[usize] {
        &self.base_index
    }

    /// Kept view id for a base view id, `None` if the view was discarded.
    pub fn view_id_for_base(&self, base_id: usize) -> Option<usize> {
        self.base_index.binary_search(&base_id).ok()
    }

    pub fn cell_rotation(&self, view_id: usize, inplane_id: usize) -> UnitQuaternion<f64> {
        view_rotation(&self.views[view_id], self.inplane[inplane_id])
    }

    /// The (view, in-plane) cell nearest to `rotation`.
    pub fn assign(&self, rotation: &UnitQuaternion<f64>) -> (usize, usize) {
        assign_view_inplane(rotation, self)
    }
}

/// Camera axes for a view with zero in-plane rotation, as rows of the
/// model-to-camera rotation matrix.
fn base_rotation_matrix(view: &Vector3<f64>) -> Matrix3<f64> {
    let v = view.normalize();
    let forward = -v;
    let z = Vector3::z();
    let mut up = z - forward * z.dot(&forward);
    if up.norm() < 1e-9 {
        up = Vector3::y();
    }
    let up = up.normalize();
    let down = -up;
    let right = down.cross(&forward);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

fn inplane_matrix(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
}

/// Model-to-camera rotation for a camera on the sphere at `view`, rolled by
/// `inplane_deg` about its optical axis.
pub fn view_rotation(view: &Vector3<f64>, inplane_deg: f64) -> UnitQuaternion<f64> {
    let m = inplane_matrix(inplane_deg) * base_rotation_matrix(view);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Camera position on the unit sphere (model frame) for a rotation.
pub fn viewing_direction(rotation: &UnitQuaternion<f64>) -> Vector3<f64> {
    -(rotation.inverse() * Vector3::z())
}

/// Roll (degrees, in (-180, 180]) of `rotation` about the optical axis of
/// `view`: the angle of the closest rotation about z to `R * B(view)^T`.
pub fn roll_degrees(rotation: &UnitQuaternion<f64>, view: &Vector3<f64>) -> f64 {
    let r = rotation.to_rotation_matrix().into_inner();
    let delta = r * base_rotation_matrix(view).transpose();
    (delta[(1, 0)] - delta[(0, 1)])
        .atan2(delta[(0, 0)] + delta[(1, 1)])
        .to_degrees()
}

pub(crate) fn wrapped_angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn assign_view_inplane(rotation: &UnitQuaternion<f64>, vs: &ViewSpace) -> (usize, usize) {
    let mut rotation = *rotation;
    let mut v = viewing_direction(&rotation);
    if vs.symmetry == SymmetryClass::Symmetric && v.x.hypot(v.y) > 1e-12 {
        // azimuth is unobservable: spin the model so the view lands on the kept half-plane
        let a = std::f64::consts::FRAC_PI_2 - v.y.atan2(v.x);
        let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a);
        rotation *= spin.inverse();
        v = viewing_direction(&rotation);
    }
    let mut view_id = 0;
    let mut best = f64::NEG_INFINITY;
    for (k, w) in vs.views.iter().enumerate() {
        let d = v.dot(w);
        if d > best {
            best = d;
            view_id = k;
        }
    }
    let roll = roll_degrees(&rotation, &vs.views[view_id]);
    let mut inplane_id = 0;
    let mut best = f64::INFINITY;
    for (m, b) in vs.inplane.iter().enumerate() {
        let d = wrapped_angle_diff(roll, *b);
        if d < best {
            best = d;
            inplane_id = m;
        }
    }
    (view_id, inplane_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
        let q = nalgebra::Quaternion::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        UnitQuaternion::from_quaternion(q)
    }

    #[test]
    fn icosphere_counts() {
        for (level, n) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
            let v = build_icosphere(level).unwrap();
            assert_eq!(v.len(), n);
            assert!(v.iter().all(|p| (p.norm() - 1.0).abs() < 1e-9));
        }
        assert!(matches!(build_icosphere(6), Err(Error::Config(_))));
    }

    #[test]
    fn icosphere_has_no_duplicates() {
        let v = build_icosphere(3).unwrap();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                assert!(v[i].angle(&v[j]) > 1e-6);
            }
        }
    }

    #[test]
    fn viewspace_examples() {
        let vs = build_viewspace(3, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        assert_eq!(vs.num_views(), 337);
        assert_eq!(vs.num_inplane(), 19);
        let full = build_viewspace(0, false, SymmetryClass::None, InplaneRange::default()).unwrap();
        assert_eq!(full.num_views(), 12);

        let semi =
            build_viewspace(3, true, SymmetryClass::SemiSymmetric, InplaneRange::default()).unwrap();
        let brute = build_icosphere(3)
            .unwrap()
            .iter()
            .filter(|v| v.z >= -1e-6 && v.y >= -1e-6)
            .count();
        assert_eq!(semi.num_views(), brute);
        assert_eq!(semi.base_len(), 337);
    }

    #[test]
    fn symmetry_filters_are_nested() {
        for hemi in [false, true] {
            let mk = |s| build_viewspace(3, hemi, s, InplaneRange::default()).unwrap();
            let none = mk(SymmetryClass::None);
            let semi = mk(SymmetryClass::SemiSymmetric);
            let sym = mk(SymmetryClass::Symmetric);
            let contains = |outer: &ViewSpace, inner: &ViewSpace| {
                inner.base_index().iter().all(|b| outer.base_index().contains(b))
            };
            assert!(contains(&none, &semi) && contains(&semi, &sym));
            assert!(sym.num_views() < semi.num_views() && semi.num_views() < none.num_views());
            assert!(sym.views().iter().all(|v| v.x.abs() < 1e-6));
        }
    }

    #[test]
    fn bad_inplane_step_rejected() {
        let r = InplaneRange {
            min_deg: -45.0,
            max_deg: 45.0,
            step_deg: 7.0,
        };
        assert!(build_viewspace(1, true, SymmetryClass::None, r).is_err());
    }

    #[test]
    fn reference_view_rotation() {
        let r = view_rotation(&Vector3::z(), 0.0).to_rotation_matrix().into_inner();
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!((r - expect).norm() < 1e-12);
        let a = view_rotation(&Vector3::z(), 90.0);
        let b = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), (-90f64).to_radians());
        let back = b * a;
        assert!(back.angle_to(&view_rotation(&Vector3::z(), 0.0)) < 1e-9);
    }

    #[test]
    fn view_rotation_looks_at_origin() {
        for v in build_icosphere(2).unwrap() {
            for deg in [-40.0, 0.0, 25.0] {
                let r = view_rotation(&v, deg);
                // model origin seen from camera at distance 1 lies on the optical axis
                let cam_pos_in_cam = r * v + Vector3::new(0.0, 0.0, 1.0);
                assert!(cam_pos_in_cam.norm() < 1e-9);
                assert!((viewing_direction(&r) - v).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn every_cell_roundtrips() {
        let vs = build_viewspace(3, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        for k in 0..vs.num_views() {
            for m in 0..vs.num_inplane() {
                assert_eq!(vs.assign(&vs.cell_rotation(k, m)), (k, m));
            }
        }
    }

    #[test]
    fn one_degree_perturbation_keeps_cell() {
        let vs = build_viewspace(3, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 0..vs.num_views() {
            for m in [0, 4, 9, 13, 18] {
                let axis = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                )
                .normalize();
                let d = UnitQuaternion::from_scaled_axis(axis * 1f64.to_radians());
                assert_eq!(vs.assign(&(d * vs.cell_rotation(k, m))), (k, m), "cell {k},{m}");
            }
        }
    }

    /// Exhaustive oracle: smallest view angle, then the bin whose cell
    /// rotation is geodesically closest.
    fn oracle_assign(r: &UnitQuaternion<f64>, vs: &ViewSpace) -> (usize, usize) {
        let v = -(r.to_rotation_matrix().into_inner().transpose() * Vector3::z());
        let mut k_best = 0;
        let mut ang_best = f64::INFINITY;
        for (k, w) in vs.views().iter().enumerate() {
            let ang = v.dot(w).clamp(-1.0, 1.0).acos();
            if ang < ang_best - 1e-12 {
                ang_best = ang;
                k_best = k;
            }
        }
        let mut b_best = 0;
        let mut geo_best = f64::INFINITY;
        for b in 0..vs.num_inplane() {
            let g = r.angle_to(&vs.cell_rotation(k_best, b));
            if g < geo_best {
                geo_best = g;
                b_best = b;
            }
        }
        (k_best, b_best)
    }

    #[test]
    fn assignment_matches_exhaustive_oracle() {
        let vs = build_viewspace(3, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            assert_eq!(vs.assign(&r), oracle_assign(&r, &vs));
        }
    }

    #[test]
    fn symmetric_assignment_ignores_azimuth() {
        let vs =
            build_viewspace(3, true, SymmetryClass::Symmetric, InplaneRange::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random::<f64>() * 6.28);
            let v = viewing_direction(&r);
            if v.z.abs() > 0.999 {
                continue;
            }
            assert_eq!(vs.assign(&r), vs.assign(&(r * spin)));
        }
    }

    #[test]
    fn json_roundtrip_and_shape() {
        let vs = build_viewspace(1, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        let s = serde_json::to_string(&vs).unwrap();
        assert!(s.contains("\"level\":1") && s.contains("\"symmetry\":\"none\""));
        let back: ViewSpace = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vs);
    }
}
