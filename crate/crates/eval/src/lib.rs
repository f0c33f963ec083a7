//! Evaluation protocols: the multi-instance IMIM score, relative-pose AUC and
//! homography corner-error AUC, with the seeded robust estimators they need.

pub mod auc;
pub mod error;
pub mod homography;
pub mod imim;
pub mod pose;

pub use auc::{auc, auc_at, ErrorCurve};
pub use error::{EvalError, Result};
pub use homography::{corner_error, estimate_homography, HomographyEstimate};
pub use imim::{aggregate_imim, imim_score, ImimAggregate, ImimReport};
pub use pose::{estimate_pose, pose_error, relative_pose, PoseError, PoseEstimate};
