//! Discrete-viewpoint 6D object pose estimation.
//!
//! The crate covers everything around a single-shot detector that scores
//! object class, discrete viewpoint and in-plane rotation per prior box:
//!
//! 1. [`geometry`]: poses, pinhole camera, triangle meshes.
//! 2. [`viewspace`]: icosphere viewpoints, in-plane bins, symmetry filtering.
//! 3. [`raster`]: deterministic software rasterizer, contours, depth normals,
//!    and the canonical bounding-box table.
//! 4. [`anchors`]: prior boxes, target assignment, hard negatives and the
//!    multibox loss with analytic gradients.
//! 5. [`lifting`]: NMS and the projective lifting of 2D boxes into pools of
//!    6D hypotheses.
//! 6. [`refine`]: contour IRLS and point-to-plane projective ICP refinement,
//!    verification and best-pose selection.
//! 7. [`metrics`]: detection scores, IoU-2D, VSS and ADD.
//! 8. [`synth`]: synthetic scenes and an oracle detector standing in for a
//!    trained network.
//! 9. [`pipeline`]: configuration, end-to-end runs and evaluation.

pub mod anchors;
pub mod error;
pub mod geometry;
pub mod lifting;
pub mod metrics;
pub mod pipeline;
pub mod pnm;
pub mod raster;
pub mod refine;
pub mod synth;
pub mod viewspace;

pub use error::{Error, Result};
pub use geometry::{BBox, CameraIntrinsics, Pose, TriMesh};
pub use viewspace::{SymmetryClass, ViewSpace};
