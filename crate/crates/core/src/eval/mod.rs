//! Offline evaluation: labels, ROC AUC, user segments, model comparison, and
//! a synthetic data generator with known ground truth.

mod auc;
mod comparison;
mod labels;
mod segments;
mod simulate;

pub use auc::{roc_auc, roc_auc_brute_force};
pub use comparison::{run_model_comparison, ComparisonConfig, ComparisonReport, EvalWindows, ModelEvaluation, ModelReport};
pub use labels::{build_labels, LabelOptions, LabeledPair, Provenance};
pub use segments::{segment_users, ActivityCounts, SegmentId};
pub use simulate::{simulate_dataset, BlockSpec, GroundTruth, SimSpec, Simulation};

use crate::error::{Error, Result};

/// Applications and views per impression.
pub fn api_vpi(impressions: u64, views: u64, applies: u64) -> Result<(f64, f64)> {
    if impressions == 0 {
        return Err(Error::Validation("API/VPI need at least one impression".into()));
    }
    let n = impressions as f64;
    Ok((applies as f64 / n, views as f64 / n))
}
