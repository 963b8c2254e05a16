use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask_box;
use crate::geometry::{BBox, CameraIntrinsics, Pose, TriMesh};
use crate::viewspace::ViewSpace;
use crate::{Error, Result};

/// Canonical centroid distance, meters.
pub const CANONICAL_DISTANCE: f64 = 0.5;

/// Reference projection of one (view, in-plane) cell at the canonical distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalEntry {
    pub key: [usize; 2],
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Diagonal `l_r` of the box, pixels.
    pub diag: f64,
    /// Projected model centroid minus box center, pixels.
    pub offset: [f64; 2],
    /// Cell rotation as `[w, x, y, z]`.
    pub q: [f64; 4],
}

impl CanonicalEntry {
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            self.q[0], self.q[1], self.q[2], self.q[3],
        ))
    }

    pub fn offset(&self) -> Vector2<f64> {
        Vector2::new(self.offset[0], self.offset[1])
    }
}

/// Per-cell boxes at distance `z_r` under the target camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTable {
    pub z_r: f64,
    pub camera: CameraIntrinsics,
    pub num_views: usize,
    pub num_inplane: usize,
    pub model_centroid: [f64; 3],
    pub entries: Vec<CanonicalEntry>,
}

impl CanonicalTable {
    pub fn get(&self, view_id: usize, inplane_id: usize) -> Option<&CanonicalEntry> {
        if view_id >= self.num_views || inplane_id >= self.num_inplane {
            return None;
        }
        self.entries.get(view_id * self.num_inplane + inplane_id)
    }

    pub fn model_centroid(&self) -> Vector3<f64> {
        Vector3::from(self.model_centroid)
    }

    /// Pose of the cell at the canonical distance (centroid on the optical axis).
    pub fn canonical_pose(&self, view_id: usize, inplane_id: usize) -> Option<Pose> {
        let e = self.get(view_id, inplane_id)?;
        let r = e.rotation();
        Some(Pose::new(r, Vector3::new(0.0, 0.0, self.z_r) - r * self.model_centroid()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: CanonicalTable = serde_json::from_str(&s)?;
        if t.entries.len() != t.num_views * t.num_inplane
            || t.entries.iter().enumerate().any(|(k, e)| {
                e.key != [k / t.num_inplane.max(1), k % t.num_inplane.max(1)] || !(e.diag > 0.0)
            })
        {
            return Err(Error::Data(format!("{}: inconsistent canonical table", path.display())));
        }
        Ok(t)
    }
}

/// Continuous box of the projected vertices; pixel-center masks of the same
/// pose have this extent up to half a pixel per side.
pub fn projected_extent(mesh: &TriMesh, pose: &Pose, cam: &CameraIntrinsics) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in mesh.vertices() {
        let p = cam.project_unchecked(&pose.transform(v));
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    BBox::new(x0, y0, x1, y1)
}

/// Places every cell of `vs` with the model centroid at `(0, 0, z_r)` and
/// records the projected box, its diagonal and the centroid offset.
pub fn precompute_canonical(
    mesh: &TriMesh,
    vs: &ViewSpace,
    cam: &CameraIntrinsics,
    z_r: f64,
) -> Result<CanonicalTable> {
    if !(z_r > 0.0) || mesh.diameter() >= 2.0 * z_r {
        return Err(Error::Config(format!(
            "mesh diameter {:.3} m does not fit at canonical distance {z_r} m",
            mesh.diameter()
        )));
    }
    let r = vs.num_inplane();
    let centroid = mesh.centroid();
    let entries: Vec<Result<CanonicalEntry>> = (0..vs.num_cells())
        .into_par_iter()
        .map(|cell| {
            let (v, m) = (cell / r, cell % r);
            let rot = vs.cell_rotation(v, m);
            let pose = Pose::new(rot, Vector3::new(0.0, 0.0, z_r) - rot * centroid);
            mask_box(mesh, &pose, cam).ok_or_else(|| {
                Error::Config(format!("empty canonical mask at cell (view {v}, in-plane {m})"))
            })?;
            let bbox = projected_extent(mesh, &pose, cam);
            let c = cam.project_unchecked(&pose.transform(&centroid));
            let q = pose.rotation().quaternion();
            Ok(CanonicalEntry {
                key: [v, m],
                bbox,
                diag: bbox.diagonal(),
                offset: [c.x - bbox.center().x, c.y - bbox.center().y],
                q: [q.w, q.i, q.j, q.k],
            })
        })
        .collect();
    Ok(CanonicalTable {
        z_r,
        camera: *cam,
        num_views: vs.num_views(),
        num_inplane: r,
        model_centroid: centroid.into(),
        entries: entries.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viewspace::{build_viewspace, InplaneRange, SymmetryClass};

    #[test]
    fn sphere_table_is_rotation_invariant() {
        let mesh = TriMesh::sphere(0.08, 3).unwrap();
        let vs = build_viewspace(1, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        let cam = CameraIntrinsics::kinect();
        let t = precompute_canonical(&mesh, &vs, &cam, CANONICAL_DISTANCE).unwrap();
        assert_eq!(t.entries.len(), vs.num_cells());
        let d0 = t.entries[0].diag;
        for e in &t.entries {
            assert!((e.diag - d0).abs() <= 1.0 + 1e-9, "{} vs {d0}", e.diag);
            // centered symmetric mesh: centroid projects to the box center
            assert!(e.offset().norm() <= 1.0);
        }
    }

    #[test]
    fn oversized_mesh_is_rejected() {
        let mesh = TriMesh::cuboid(1.0, 1.0, 1.0).unwrap();
        let vs = build_viewspace(0, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        assert!(matches!(
            precompute_canonical(&mesh, &vs, &CameraIntrinsics::kinect(), 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn offscreen_cell_names_the_cell() {
        // sub-pixel projection on a one-pixel camera misses the pixel center
        let mesh = TriMesh::cuboid(0.01, 0.01, 0.01).unwrap();
        let vs = build_viewspace(0, true, SymmetryClass::None, InplaneRange::default()).unwrap();
        let cam = CameraIntrinsics::new(0.5, 0.5, 0.1, 0.1, 1, 1).unwrap();
        match precompute_canonical(&mesh, &vs, &cam, 0.5) {
            Err(Error::Config(m)) => assert!(m.contains("cell")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
