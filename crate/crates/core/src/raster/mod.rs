//! Deterministic z-buffered software rasterizer and the buffers derived from it.
//!
//! Coverage rule: a pixel is covered when its center lies inside the projected
//! triangle, with the top-left rule deciding centers exactly on an edge.
//! Depth is interpolated perspective-correctly (linear in 1/z); color and
//! normals are flat per face.

mod canonical;
mod contour;
mod normals;

pub use canonical::{precompute_canonical, projected_extent, CanonicalEntry, CanonicalTable, CANONICAL_DISTANCE};
pub use contour::{extract_contour, ContourPoint};
pub(crate) use contour::mask_gradient;
pub use normals::depth_to_normals;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{BBox, CameraIntrinsics, Point2, Pose, TriMesh};

/// Triangles with a vertex closer than this (meters) are not drawn.
pub const NEAR_PLANE: f64 = 1e-3;

const DEFAULT_GRAY: f64 = 0.7;

/// Row-major RGB image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> [f32; 3] {
        self.data[j * self.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, c: [f32; 3]) {
        self.data[j * self.width + i] = c;
    }

    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
            .collect()
    }
}

/// Per-pixel output of [`render`]. `mask[k] ⇔ depth[k] > 0`; normals face the
/// camera and are zero where the mask is false.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub normals: Vec<Vector3<f64>>,
    /// Set when every vertex lies behind the near plane.
    pub behind_camera: bool,
}

impl RenderBuffers {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            mask: vec![false; n],
            normals: vec![Vector3::zeros(); n],
            behind_camera: false,
        }
    }

    pub fn for_camera(cam: &CameraIntrinsics) -> Self {
        Self::new(cam.width as usize, cam.height as usize)
    }

    pub fn clear(&mut self) {
        self.color.fill([0.0; 3]);
        self.depth.fill(0.0);
        self.mask.fill(false);
        self.normals.fill(Vector3::zeros());
        self.behind_camera = false;
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Tight box around the mask in continuous pixel coordinates.
    pub fn tight_box(&self) -> Option<BBox> {
        mask_tight_box(&self.mask, self.width, self.height)
    }

    pub fn color_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }
}

pub fn mask_tight_box(mask: &[bool], width: usize, height: usize) -> Option<BBox> {
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    let mut any = false;
    for j in 0..height {
        let row = &mask[j * width..(j + 1) * width];
        if let Some(first) = row.iter().position(|&m| m) {
            let last = row.iter().rposition(|&m| m).unwrap_or(first);
            any = true;
            lo = (lo.0.min(first), lo.1.min(j));
            hi = (hi.0.max(last), hi.1.max(j));
        }
    }
    any.then(|| BBox::new(lo.0 as f64, lo.1 as f64, hi.0 as f64 + 1.0, hi.1 as f64 + 1.0))
}

#[inline]
fn edge(a: &Point2, b: &Point2, p: &Point2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn is_top_left(a: &Point2, b: &Point2) -> bool {
    let d = b - a;
    (d.y == 0.0 && d.x > 0.0) || d.y < 0.0
}

/// Calls `visit(i, j, barycentrics)` for every pixel whose center is covered
/// by the screen-space triangle. Winding is irrelevant.
pub(crate) fn rasterize_triangle(
    mut p: [Point2; 3],
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize, [f64; 3]),
) -> bool {
    let mut area = edge(&p[0], &p[1], &p[2]);
    if !area.is_finite() || area.abs() < 1e-12 {
        return false;
    }
    let mut swapped = false;
    if area < 0.0 {
        p.swap(1, 2);
        area = -area;
        swapped = true;
    }
    let min_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
    let i0 = (min_x - 0.5).ceil().max(0.0);
    let j0 = (min_y - 0.5).ceil().max(0.0);
    let i1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
    let j1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
    if i1 < i0 || j1 < j0 {
        return false;
    }
    let tl = [
        is_top_left(&p[1], &p[2]),
        is_top_left(&p[2], &p[0]),
        is_top_left(&p[0], &p[1]),
    ];
    let inv_area = 1.0 / area;
    let mut hit = false;
    for j in j0 as usize..=j1 as usize {
        for i in i0 as usize..=i1 as usize {
            let c = Point2::new(i as f64 + 0.5, j as f64 + 0.5);
            let w = [edge(&p[1], &p[2], &c), edge(&p[2], &p[0], &c), edge(&p[0], &p[1], &c)];
            let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && tl[k]));
            if inside {
                hit = true;
                let b = if swapped {
                    [w[0] * inv_area, w[2] * inv_area, w[1] * inv_area]
                } else {
                    [w[0] * inv_area, w[1] * inv_area, w[2] * inv_area]
                };
                visit(i, j, b);
            }
        }
    }
    hit
}

struct CameraTriangle {
    screen: [Point2; 3],
    inv_z: [f64; 3],
    normal: Vector3<f64>,
    color: [f32; 3],
}

fn camera_triangles<'a>(
    mesh: &'a TriMesh,
    cam_pts: &'a [Vector3<f64>],
    cam: &'a CameraIntrinsics,
) -> impl Iterator<Item = CameraTriangle> + 'a {
    mesh.faces().iter().filter_map(move |f| {
        let p = [cam_pts[f[0]], cam_pts[f[1]], cam_pts[f[2]]];
        if p.iter().any(|q| q.z <= NEAR_PLANE) {
            return None;
        }
        let mut n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        let len = n.norm();
        if len < 1e-18 {
            return None;
        }
        n /= len;
        let centroid = (p[0] + p[1] + p[2]) / 3.0;
        if n.dot(&centroid) > 0.0 {
            n = -n;
        }
        let base = match mesh.colors() {
            Some(c) => (c[f[0]] + c[f[1]] + c[f[2]]) / 3.0,
            None => Vector3::repeat(DEFAULT_GRAY),
        };
        let shade = 0.3 + 0.7 * n.dot(&centroid.normalize()).abs();
        let col = base * shade;
        Some(CameraTriangle {
            screen: [
                cam.project_unchecked(&p[0]),
                cam.project_unchecked(&p[1]),
                cam.project_unchecked(&p[2]),
            ],
            inv_z: [1.0 / p[0].z, 1.0 / p[1].z, 1.0 / p[2].z],
            normal: n,
            color: [col.x as f32, col.y as f32, col.z as f32],
        })
    })
}

/// Renders `mesh` at `pose` into fresh buffers sized to the camera.
pub fn render(mesh: &TriMesh, pose: &Pose, cam: &CameraIntrinsics) -> RenderBuffers {
    let mut buf = RenderBuffers::for_camera(cam);
    render_into(mesh, pose, cam, &mut buf);
    buf
}

/// Like [`render`], reusing caller-owned buffers (cleared first).
pub fn render_into(mesh: &TriMesh, pose: &Pose, cam: &CameraIntrinsics, buf: &mut RenderBuffers) {
    assert_eq!(
        (buf.width, buf.height),
        (cam.width as usize, cam.height as usize),
        "buffer size must match the camera"
    );
    buf.clear();
    let cam_pts: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| pose.transform(v)).collect();
    if cam_pts.iter().all(|p| p.z <= NEAR_PLANE) {
        buf.behind_camera = true;
        return;
    }
    let (w, h) = (buf.width, buf.height);
    for tri in camera_triangles(mesh, &cam_pts, cam) {
        rasterize_triangle(tri.screen, w, h, |i, j, b| {
            let inv = b[0] * tri.inv_z[0] + b[1] * tri.inv_z[1] + b[2] * tri.inv_z[2];
            if inv <= 0.0 {
                return;
            }
            let z = 1.0 / inv;
            let k = j * w + i;
            let d = buf.depth[k];
            if d == 0.0 || z < d {
                buf.depth[k] = z;
                buf.mask[k] = true;
                buf.normals[k] = tri.normal;
                buf.color[k] = tri.color;
            }
        });
    }
}

/// Tight box of the rendered mask without filling any buffers.
pub fn mask_box(mesh: &TriMesh, pose: &Pose, cam: &CameraIntrinsics) -> Option<BBox> {
    let cam_pts: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| pose.transform(v)).collect();
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    let mut any = false;
    for tri in camera_triangles(mesh, &cam_pts, cam) {
        rasterize_triangle(tri.screen, w, h, |i, j, _| {
            any = true;
            lo = (lo.0.min(i), lo.1.min(j));
            hi = (hi.0.max(i), hi.1.max(j));
        });
    }
    any.then(|| BBox::new(lo.0 as f64, lo.1 as f64, hi.0 as f64 + 1.0, hi.1 as f64 + 1.0))
}

/// Projected 2D position of a model-frame point, if in front of the camera.
pub fn project_model_point(
    pose: &Pose,
    cam: &CameraIntrinsics,
    p: &Vector3<f64>,
) -> Option<Vector2<f64>> {
    cam.project(&pose.transform(p)).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn cube_front_face_area() {
        let mesh = TriMesh::cuboid(0.1, 0.1, 0.1).unwrap();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let buf = render(&mesh, &pose, &cam());
        // front face at z = 0.95, side 0.1 m; count pixel centers inside it
        let half = 500.0 * 0.05 / 0.95;
        let inside = |c: f64| (0..640).filter(|&i| (i as f64 + 0.5 - c).abs() < half).count();
        let expect = inside(320.0) * inside(240.0);
        assert_eq!(buf.mask_count(), expect);
        for (k, &m) in buf.mask.iter().enumerate() {
            assert_eq!(m, buf.depth[k] > 0.0);
            if m {
                assert!((buf.depth[k] - 0.95).abs() < 1e-9);
                assert!((buf.normals[k] - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn outside_frustum_and_behind_camera() {
        let mesh = TriMesh::cuboid(0.1, 0.1, 0.1).unwrap();
        let off = render(&mesh, &Pose::from_translation(Vector3::new(5.0, 0.0, 1.0)), &cam());
        assert!(off.is_empty() && !off.behind_camera);
        let behind = render(&mesh, &Pose::from_translation(Vector3::new(0.0, 0.0, -1.0)), &cam());
        assert!(behind.is_empty() && behind.behind_camera);
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = TriMesh::toy().unwrap();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.3, -0.5, 1.1),
            Vector3::new(0.02, -0.01, 0.6),
        );
        assert_eq!(render(&mesh, &pose, &cam()), render(&mesh, &pose, &cam()));
    }

    #[test]
    fn shared_edges_are_watertight() {
        // a square split along its diagonal, corners on pixel centers
        let tri_a = [Point2::new(10.5, 10.5), Point2::new(30.5, 10.5), Point2::new(30.5, 30.5)];
        let tri_b = [Point2::new(10.5, 10.5), Point2::new(30.5, 30.5), Point2::new(10.5, 30.5)];
        let mut count = vec![0u8; 64 * 64];
        for t in [tri_a, tri_b] {
            rasterize_triangle(t, 64, 64, |i, j, _| count[j * 64 + i] += 1);
        }
        assert!(count.iter().all(|&c| c <= 1), "double coverage");
        assert_eq!(count.iter().filter(|&&c| c == 1).count(), 20 * 20);
    }

    #[test]
    fn mask_box_matches_render() {
        let mesh = TriMesh::toy().unwrap();
        for k in 0..10 {
            let pose = Pose::new(
                UnitQuaternion::from_euler_angles(0.3 * k as f64, 0.2, -0.1 * k as f64),
                Vector3::new(0.01 * k as f64, -0.02, 0.5 + 0.05 * k as f64),
            );
            assert_eq!(mask_box(&mesh, &pose, &cam()), render(&mesh, &pose, &cam()).tight_box());
        }
    }

    #[test]
    fn box_diagonal_shrinks_with_distance() {
        let mesh = TriMesh::toy().unwrap();
        let r = UnitQuaternion::from_euler_angles(0.4, 0.1, 0.7);
        let diags: Vec<f64> = [0.4, 0.6, 0.8, 1.0, 1.2]
            .iter()
            .map(|&z| {
                mask_box(&mesh, &Pose::new(r, Vector3::new(0.0, 0.0, z)), &cam())
                    .unwrap()
                    .diagonal()
            })
            .collect();
        assert!(diags.windows(2).all(|w| w[1] < w[0]), "{diags:?}");
    }
}
