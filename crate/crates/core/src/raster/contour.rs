use nalgebra::{Vector2, Vector3};

use super::RenderBuffers;
use crate::geometry::{CameraIntrinsics, Pose};

/// One silhouette pixel of a rendered mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourPoint {
    pub pixel: (usize, usize),
    /// Back-projected surface point in the camera frame.
    pub camera_point: Vector3<f64>,
    /// The same point in the model frame.
    pub model_point: Vector3<f64>,
    /// Outward unit direction of the silhouette; zero for isolated pixels.
    pub normal: Vector2<f64>,
}

#[inline]
fn mask_at(mask: &[bool], w: usize, h: usize, i: isize, j: isize) -> f64 {
    if i < 0 || j < 0 || i as usize >= w || j as usize >= h {
        0.0
    } else if mask[j as usize * w + i as usize] {
        1.0
    } else {
        0.0
    }
}

/// Sobel gradient of a boolean mask (points toward the inside).
pub(crate) fn mask_gradient(mask: &[bool], w: usize, h: usize, i: usize, j: usize) -> Vector2<f64> {
    let (i, j) = (i as isize, j as isize);
    let m = |di: isize, dj: isize| mask_at(mask, w, h, i + di, j + dj);
    let gx = (m(1, -1) + 2.0 * m(1, 0) + m(1, 1)) - (m(-1, -1) + 2.0 * m(-1, 0) + m(-1, 1));
    let gy = (m(-1, 1) + 2.0 * m(0, 1) + m(1, 1)) - (m(-1, -1) + 2.0 * m(0, -1) + m(1, -1));
    Vector2::new(gx, gy)
}

pub(crate) fn is_boundary(mask: &[bool], w: usize, h: usize, i: usize, j: usize) -> bool {
    if !mask[j * w + i] {
        return false;
    }
    let (i, j) = (i as isize, j as isize);
    [(1, 0), (-1, 0), (0, 1), (0, -1)]
        .iter()
        .any(|&(di, dj)| mask_at(mask, w, h, i + di, j + dj) == 0.0)
}

pub(crate) fn outward_normal(mask: &[bool], w: usize, h: usize, i: usize, j: usize) -> Vector2<f64> {
    let g = -mask_gradient(mask, w, h, i, j);
    if g.norm() > 1e-9 {
        return g.normalize();
    }
    let (ii, jj) = (i as isize, j as isize);
    let mut acc = Vector2::zeros();
    for (di, dj) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
        if mask_at(mask, w, h, ii + di, jj + dj) == 0.0 {
            acc += Vector2::new(di as f64, dj as f64);
        }
    }
    if acc.norm() > 1e-9 {
        acc.normalize()
    } else {
        Vector2::zeros()
    }
}

/// Mask pixels with at least one background 4-neighbor (the image border
/// counts as background), in row-major order.
pub fn extract_contour(buf: &RenderBuffers, pose: &Pose, cam: &CameraIntrinsics) -> Vec<ContourPoint> {
    let (w, h) = (buf.width, buf.height);
    let inv = pose.inverse();
    let mut out = Vec::new();
    for j in 0..h {
        for i in 0..w {
            if !is_boundary(&buf.mask, w, h, i, j) {
                continue;
            }
            let d = buf.depth[j * w + i];
            let camera_point = cam.backproject_unchecked(&CameraIntrinsics::pixel_center(i, j), d);
            out.push(ContourPoint {
                pixel: (i, j),
                camera_point,
                model_point: inv.transform(&camera_point),
                normal: outward_normal(&buf.mask, w, h, i, j),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;
    use crate::raster::render;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn synthetic(mask_fn: impl Fn(usize, usize) -> bool) -> RenderBuffers {
        let mut b = RenderBuffers::new(64, 48);
        for j in 0..48 {
            for i in 0..64 {
                if mask_fn(i, j) {
                    let k = b.index(i, j);
                    b.mask[k] = true;
                    b.depth[k] = 1.0;
                }
            }
        }
        b
    }

    #[test]
    fn rectangle_perimeter() {
        let b = synthetic(|i, j| (27..37).contains(&i) && (19..29).contains(&j));
        let c = extract_contour(&b, &Pose::identity(), &cam());
        assert_eq!(c.len(), 36);
        // corner normals are diagonal, edge normals axis-aligned and outward
        let left = c.iter().find(|p| p.pixel == (27, 23)).unwrap();
        assert!((left.normal - Vector2::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn single_pixel_and_empty() {
        let b = synthetic(|i, j| i == 5 && j == 5);
        let c = extract_contour(&b, &Pose::identity(), &cam());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].normal, Vector2::zeros());
        assert!(extract_contour(&synthetic(|_, _| false), &Pose::identity(), &cam()).is_empty());
    }

    #[test]
    fn sphere_contour_normals_are_radial() {
        let mesh = TriMesh::sphere(0.05, 3).unwrap();
        let pose = Pose::from_translation(Vector3::new(0.01, -0.02, 0.5));
        let buf = render(&mesh, &pose, &cam());
        let c = extract_contour(&buf, &pose, &cam());
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (k, &m) in buf.mask.iter().enumerate() {
            if m {
                sx += (k % buf.width) as f64 + 0.5;
                sy += (k / buf.width) as f64 + 0.5;
                n += 1.0;
            }
        }
        let centroid = Vector2::new(sx / n, sy / n);
        let mut angles: Vec<f64> = c
            .iter()
            .map(|p| {
                let r = Vector2::new(p.pixel.0 as f64 + 0.5, p.pixel.1 as f64 + 0.5) - centroid;
                r.angle(&p.normal).to_degrees()
            })
            .collect();
        angles.sort_by(f64::total_cmp);
        assert!(angles[angles.len() / 2] < 15.0);
    }

    #[test]
    fn contour_points_reproject_onto_their_pixels() {
        let mesh = TriMesh::toy().unwrap();
        let pose = Pose::new(
            nalgebra::UnitQuaternion::from_euler_angles(0.5, 0.2, -0.4),
            Vector3::new(0.0, 0.01, 0.6),
        );
        let buf = render(&mesh, &pose, &cam());
        for p in extract_contour(&buf, &pose, &cam()) {
            let px = cam().project(&pose.transform(&p.model_point)).unwrap();
            let center = CameraIntrinsics::pixel_center(p.pixel.0, p.pixel.1);
            assert!((px - center).norm() < 0.71);
        }
    }
}
