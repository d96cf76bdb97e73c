//! Online serving.
//!
//! A request flows through detection, the two embedding models, I2I and
//! MIEM recall with per-product dedup, score fusion and ranking; every
//! request and every returned item is written to the activity log.

mod activity;
mod http;
mod recall;
mod service;

pub use activity::{read_activity_log, ActivityEvent, ActivityLog, EventKind};
pub use http::{router, serve, EventBody, SearchBody};
pub use recall::{
    detect_stub, fuse_scores, i2i_key, rank_candidates, recall_with_dedup, split_i2i_key, BoundingBox, FusedCandidate,
    RankedItem, RecallCandidate, RecallOptions, RecallSource,
};
pub use service::{DualIndexSet, EngineConfig, SearchEngine, SearchRequest, SearchResponse, StageTimings};
