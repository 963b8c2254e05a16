use nalgebra::Vector3;

use crate::geometry::CameraIntrinsics;

/// Neighbors further apart than this in depth are treated as a discontinuity.
const MAX_DEPTH_JUMP: f64 = 0.05;

/// Camera-frame normals from a depth map by central differences, oriented
/// toward the camera. `None` where any of the four neighbors is missing or
/// across a depth discontinuity.
pub fn depth_to_normals(
    depth: &[f64],
    width: usize,
    height: usize,
    cam: &CameraIntrinsics,
) -> Vec<Option<Vector3<f64>>> {
    let mut out = vec![None; width * height];
    if width < 3 || height < 3 {
        return out;
    }
    let point = |i: usize, j: usize| {
        cam.backproject_unchecked(&CameraIntrinsics::pixel_center(i, j), depth[j * width + i])
    };
    for j in 1..height - 1 {
        for i in 1..width - 1 {
            let d = depth[j * width + i];
            if !(d > 0.0) {
                continue;
            }
            let nb = [
                depth[j * width + i - 1],
                depth[j * width + i + 1],
                depth[(j - 1) * width + i],
                depth[(j + 1) * width + i],
            ];
            if nb.iter().any(|&x| !(x > 0.0) || (x - d).abs() > MAX_DEPTH_JUMP) {
                continue;
            }
            let dx = point(i + 1, j) - point(i - 1, j);
            let dy = point(i, j + 1) - point(i, j - 1);
            let n = dx.cross(&dy);
            let len = n.norm();
            if len < 1e-15 {
                continue;
            }
            let mut n = n / len;
            if n.dot(&point(i, j)) > 0.0 {
                n = -n;
            }
            out[j * width + i] = Some(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, TriMesh};
    use crate::raster::render;
    use nalgebra::UnitQuaternion;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 300.0, 80.0, 60.0, 160, 120).unwrap()
    }

    #[test]
    fn fronto_parallel_plane() {
        let depth = vec![1.0; 160 * 120];
        let n = depth_to_normals(&depth, 160, 120, &cam());
        for j in 1..119 {
            for i in 1..159 {
                let v = n[j * 160 + i].unwrap();
                assert!((v - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
            }
        }
        assert!(n[0].is_none());
    }

    #[test]
    fn tilted_plane_is_45_degrees() {
        // plane z = 1 + x (45° about the y axis), intersected with each ray
        let c = cam();
        let mut depth = vec![0.0; 160 * 120];
        for j in 0..120 {
            for i in 0..160 {
                let ray = c.backproject_unchecked(&CameraIntrinsics::pixel_center(i, j), 1.0);
                depth[j * 160 + i] = 1.0 / (1.0 - ray.x);
            }
        }
        let n = depth_to_normals(&depth, 160, 120, &c);
        let expect = Vector3::new(1.0, 0.0, -1.0).normalize();
        for v in n.iter().flatten() {
            assert!(v.angle(&expect).to_degrees() < 1.0);
            assert!((v.angle(&Vector3::new(0.0, 0.0, -1.0)).to_degrees() - 45.0).abs() < 1.0);
        }
    }

    #[test]
    fn agrees_with_rasterizer_normals() {
        let mesh = TriMesh::toy().unwrap();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.6, -0.3, 0.2),
            Vector3::new(0.0, 0.0, 0.45),
        );
        let buf = render(&mesh, &pose, &cam());
        let n = depth_to_normals(&buf.depth, buf.width, buf.height, &cam());
        let mut angles: Vec<f64> = (0..n.len())
            .filter_map(|k| n[k].map(|v| v.angle(&buf.normals[k]).to_degrees()))
            .collect();
        assert!(angles.len() > 500);
        angles.sort_by(f64::total_cmp);
        assert!(angles[angles.len() / 2] < 10.0);
    }
}
