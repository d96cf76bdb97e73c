//! Offline evaluation.
//!
//! Recall@k and category accuracy over held-out query images, same-item
//! merging of duplicate listings, the fusion-weight sweep and the report
//! comparing I2I, MIEM and their fusion.

mod merge;
mod metrics;
mod offline;
mod report;

pub use merge::{merge_same_items, probe_pairs, ClassifierTraining, LabeledPair, SameItemClassifier, SameItemGroups};
pub use metrics::{category_accuracy, mean_hits, modal_category, recall_at_k, CATEGORY_TOP, RECALL_KS};
pub use offline::{
    collect_recalls, expand_truth, run_offline_eval, score_results, sweep_fusion_weight, synthetic_eval_queries, EvalIndexes,
    EvalOptions, EvalQuery, EvalReport, EvalRow, QueryRecalls, SweepResult, ROW_FUSED, ROW_I2I, ROW_MIEM, ROW_PAIR,
};

#[cfg(test)]
mod tests;
