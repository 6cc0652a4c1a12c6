//! Metrics and explanations: ROC/AUC, confusion counts, forecast MSE tables,
//! the post-processing A/B comparison and grad×input saliency.

mod metrics;
mod report;

pub use metrics::{
    auc, auc_pairs, confusion_at, roc_points, trapezoid, Confusion, RocCurve, RocPoint,
};
pub use report::{
    mean_saliency, metrics_csv, mse_of, mse_table, postproc_ab, roc_csv, saliency, AbRow, MseTable,
    PostprocAb, SaliencyMap, SpikeConfig,
};
