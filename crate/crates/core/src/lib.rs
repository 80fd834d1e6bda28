//! Joint 3D point tracking and reconstruction from time-dependent pointmaps.

// NaN must fail every validity check, so negated comparisons are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod camera;
pub mod geometry;
pub mod gradcheck;
pub mod lie;
pub mod losses;
pub mod metrics;
pub mod oracle;

pub use adapt::{tta_optimize, AdaptOutcome, AdaptState};
pub use camera::{solve_cameras_for_video, CameraSolution, CameraSolverConfig, PoseEstimate};
pub use geometry::{
    FrameTag, Intrinsics, Pixel, PixelGrid, Pointmap, PoseSE3, TrackSet, Tracks2, Tracks3, Vec2, Vec3,
};
pub use lie::Twist;
pub use losses::{DepthSupervision, LossBreakdown, LossWeights, TrackSupervision};
pub use metrics::{AlignmentMode, MetricReport, Thresholds};
pub use oracle::{Preset, RenderedSequence, SceneSpec};
