//! Semantic Gaussian scene completion on voxel grids.

// `!(x > 0.0)` rejects NaN as well; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fit;
pub mod gaussian;
pub mod grid;
pub mod harmonics;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod predict;
pub mod scene;

pub use error::{Error, Result};
pub use fit::{
    finite_diff_check, fit, prepare, FitConfig, FitOutcome, FitProblem, ModelParams, ParamVector, TrajectoryRecord,
};
pub use gaussian::{build_covariance, eval_gaussian, quat_to_rotation, splat, Covariance3, SemanticGaussian};
pub use grid::{FeatureVolume, GridSpec, LabelGrid, ScalarGrid, SemanticVolume, VoxelGrid};
pub use harmonics::{eval_ssh, expand_semantics, orth_loss, sh_basis, ShField, ShProjection};
pub use losses::{align_loss, ce_loss, lovasz_loss, scal_loss, total_loss, LossBreakdown, ScalVariant, IGNORE_LABEL};
pub use metrics::{compute_metrics, MetricsReport};
pub use predict::{fuse, gauss_predict, voxel_head};
pub use scene::{
    broadcast_tpv, init_gaussians, select_anchors, similarity_map, tpv_pool, AnchorSet, GaussianHead, LinearHead,
    ScaleRange, SimilarityMode, TpvPlanes,
};
