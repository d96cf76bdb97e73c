//! The daily item-feature pipeline.
//!
//! Each day starts from the previous day's full-feature partition: entries
//! whose product is still available and unchanged are copied forward, the
//! rest of the catalog is embedded, and the difference between the two
//! partitions becomes delete/update commands for the index. The same job
//! runs once per index: MIEM keyed by product, I2I keyed by product image.

mod churn;
mod partition;
mod pipeline;

pub use churn::simulate_churn;
pub use partition::{
    day_key, day_timestamp, decode_records, encode_records, parse_day, FeaturePartition, FeatureRecord, Manifest,
    PartitionStore, StoreLock, COMMAND_FILE, RECORD_FILE,
};
pub use pipeline::{
    apply_commands, build_index, build_index_from_partition, commands_from_ndjson, commands_to_ndjson, copy_forward,
    daily_job, diff_partitions, embed_new_items, validate_item, ApplyReport, CatalogSnapshot, DailyOptions,
    DailyOutput, DailyReport, EmbedFailure, FeatureExtractor, I2iExtractor, IndexCommand, MiemExtractor,
    PairExtractor, RejectReason, Validation,
};
