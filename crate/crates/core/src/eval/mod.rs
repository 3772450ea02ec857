//! Heatmap decoding, PCKh / PCK / AUC and the visibility precision–recall analysis.

mod decode;
mod metrics;
mod report;
mod visibility;

pub use decode::{decode, decode_head, Detection};
pub use metrics::{auc_alphas, mean_responses, pck, pck_torso, pckh, to_input, MetricReport, Reference};
pub use report::{metrics_csv, pr_csv, write_json, write_text};
pub use visibility::{precision_recall, visibility_pr, PrPoint, VisibilityPr};
