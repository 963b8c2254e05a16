//! Rigid transforms, the pinhole camera and 2D boxes.
//!
//! Camera frame convention: +z forward, +x right, +y down. Pixel coordinates
//! are continuous and the integer pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)`.

mod mesh;

pub use mesh::TriMesh;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point2 = Vector2<f64>;
pub type Point3 = Vector3<f64>;

/// Rigid transform mapping the model frame into the camera frame.
///
/// The rotation is stored as a unit quaternion canonicalized to `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    q: [f64; 4],
    t: [f64; 3],
}

impl TryFrom<PoseJson> for Pose {
    type Error = Error;

    fn try_from(raw: PoseJson) -> Result<Self> {
        let q = Quaternion::new(raw.q[0], raw.q[1], raw.q[2], raw.q[3]);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || raw.t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("invalid pose {:?} {:?}", raw.q, raw.t)));
        }
        Ok(Pose::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::from(raw.t),
        ))
    }
}

impl From<Pose> for PoseJson {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseJson {
            q: [q.w, q.i, q.j, q.k],
            t: p.translation.into(),
        }
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = q.into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::from_quaternion(q)
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Self::new(self.rotation, t)
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose::new(r, -(r * self.translation))
    }

    /// Geodesic angle between the two rotations, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Left-multiplied increment `(ω, v)`: `R ← exp(ω)·R`, `t ← exp(ω)·t + v`.
    ///
    /// To first order a camera-frame point `P = R·X + t` moves to `P + ω×P + v`.
    pub fn left_update(&self, twist: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(twist[0], twist[1], twist[2]);
        let v = Vector3::new(twist[3], twist[4], twist[5]);
        let dr = UnitQuaternion::from_scaled_axis(omega);
        Pose::new(dr * self.rotation, dr * self.translation + v)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn transform(pose: &Pose, point: &Point3) -> Point3 {
    pose.transform(point)
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsJson")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsJson> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsJson) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && fx.is_finite()
            && fy.is_finite()
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::Config(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} size={width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// The LineMOD-style Kinect camera used throughout the tests and examples.
    pub fn kinect() -> Self {
        Self::new(572.4114, 573.5704, 325.2611, 242.0490, 640, 480).expect("valid")
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn project(&self, p: &Point3) -> Result<Point2> {
        if !(p.z > 0.0) {
            return Err(Error::Domain(format!("cannot project point with depth {}", p.z)));
        }
        Ok(self.project_unchecked(p))
    }

    /// Projection without the depth check; callers guarantee `p.z > 0`.
    #[inline]
    pub fn project_unchecked(&self, p: &Point3) -> Point2 {
        Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn backproject(&self, px: &Point2, depth: f64) -> Result<Point3> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("cannot back-project at depth {depth}")));
        }
        Ok(self.backproject_unchecked(px, depth))
    }

    #[inline]
    pub fn backproject_unchecked(&self, px: &Point2, depth: f64) -> Point3 {
        Point3::new(
            (px.x - self.cx) * depth / self.fx,
            (px.y - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Center of integer pixel `(i, j)`.
    #[inline]
    pub fn pixel_center(i: usize, j: usize) -> Point2 {
        Point2::new(i as f64 + 0.5, j as f64 + 0.5)
    }
}

pub fn project(point: &Point3, cam: &CameraIntrinsics) -> Result<Point2> {
    cam.project(point)
}

pub fn backproject(pixel: &Point2, depth: f64, cam: &CameraIntrinsics) -> Result<Point3> {
    cam.backproject(pixel, depth)
}

/// Axis-aligned box given by its corners `(x0, y0)`–`(x1, y1)`, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn clamp(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_map(|(w, t)| {
                Pose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::from(w)),
                    Vector3::from(t),
                )
            })
    }

    #[test]
    fn project_examples() {
        let c = cam();
        let p = c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Point2::new(320.0, 240.0));
        let p = c.project(&Vector3::new(0.1, 0.0, 0.5)).unwrap();
        assert_abs_diff_eq!(p.x, 420.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 240.0, epsilon = 1e-12);
        assert!(matches!(
            c.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(Error::Domain(_))
        ));
        assert!(c.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn backproject_examples() {
        let c = cam();
        let p = c.backproject(&Point2::new(320.0, 240.0), 2.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let p = c.backproject(&Point2::new(420.0, 240.0), 0.5).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(0.1, 0.0, 0.5), epsilon = 1e-12);
        assert!(c.backproject(&Point2::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn pixel_grid_roundtrip() {
        let c = cam();
        for j in (0..480).step_by(37) {
            for i in (0..640).step_by(41) {
                let px = CameraIntrinsics::pixel_center(i, j);
                let back = c.project(&c.backproject(&px, 1.0).unwrap()).unwrap();
                assert!((back - px).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn transform_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform(&p), p);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 0.5));
        assert_eq!(t.transform(&Vector3::zeros()), Vector3::new(0.0, 0.0, 0.5));
        let rz = Pose::from_rotation(UnitQuaternion::from_axis_angle(
            &Vector3::z_axis(),
            std::f64::consts::FRAC_PI_2,
        ));
        assert_abs_diff_eq!(
            rz.transform(&Vector3::x()),
            Vector3::y(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, -0.5, 4, 4).is_err());
    }

    #[test]
    fn json_formats() {
        let p = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(0.1, -0.2, 0.8),
        );
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.starts_with("{\"q\":["));
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert!(back.rotation_angle_to(&p) < 1e-12);
        assert!(serde_json::from_str::<Pose>(r#"{"q":[0,0,0,0],"t":[0,0,0]}"#).is_err());

        let c: CameraIntrinsics = serde_json::from_str(
            r#"{"fx":500,"fy":500,"cx":320,"cy":240,"width":640,"height":480}"#,
        )
        .unwrap();
        assert_eq!(c, cam());
        assert!(serde_json::from_str::<CameraIntrinsics>(
            r#"{"fx":-5,"fy":500,"cx":320,"cy":240,"width":640,"height":480}"#
        )
        .is_err());
    }

    #[test]
    fn bbox_iou_hand_computed() {
        let a = BBox::new(0.0, 0.0, 2.0, 1.0);
        let b = BBox::new(1.0, 0.0, 3.0, 1.0);
        assert_abs_diff_eq!(a.iou(&b), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    proptest! {
        #[test]
        fn quaternion_stays_unit_and_canonical(a in arb_pose(), b in arb_pose()) {
            for p in [a, b, a.compose(&b), a.inverse()] {
                let q = p.rotation().quaternion();
                prop_assert!((q.norm() - 1.0).abs() < 1e-9);
                prop_assert!(q.w >= 0.0);
            }
        }

        #[test]
        fn compose_with_inverse_is_identity(a in arb_pose()) {
            let id = a.compose(&a.inverse());
            prop_assert!(id.rotation_angle_to(&Pose::identity()) < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
        }

        #[test]
        fn composition_matches_sequential_transform(
            a in arb_pose(), b in arb_pose(), p in prop::array::uniform3(-5.0f64..5.0)
        ) {
            let p = Vector3::from(p);
            let lhs = a.compose(&b).transform(&p);
            let rhs = a.transform(&b.transform(&p));
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn rotation_matrix_orthonormal(a in arb_pose()) {
            let r = a.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn backproject_project_roundtrip(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.05f64..10.0
        ) {
            let c = cam();
            let p = Vector3::new(x, y, z);
            let px = c.project(&p).unwrap();
            let back = c.backproject(&px, z).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
