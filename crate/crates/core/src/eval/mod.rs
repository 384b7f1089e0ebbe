//! Distribution distance, perceptual diversity and oracle accuracy.

mod metrics;
mod report;

pub use metrics::{
    attribute_accuracy, attribute_scores, diversity_score, feature_distance, fid, perceptual_distance, FID_EPSILON,
};
pub use report::{evaluate, model_hashes, EvalConfig, EvalReport, EDIT_TARGETS};
