//! Interaction logs, k-core filtering, per-user sequences, leave-one-out
//! splits and lettered candidate sets.

mod candidates;
mod filter;
mod ingest;
mod prepared;
mod sequence;
mod split;

pub use candidates::{
    letter_index, sample_candidates, sample_candidates_including, CandidateOption, CandidateSet, CatalogEntry,
    ItemCatalog, LETTERS, NUM_CANDIDATES,
};
pub use filter::{five_core_filter, k_core_filter, min_degrees, CORE_THRESHOLD};
pub use ingest::{ingest, parse_row, render_row, Density, IngestReport, Interaction, InteractionLog, MalformedRow};
pub use prepared::{
    candidate_seed, hex, jsonl_bytes, read_jsonl, write_jsonl, DatasetStats, LogCounts, PrepareConfig, PrepareReport, PreparedDataset, UserCandidates,
};
pub use sequence::{build_sequences, interval_days, DuplicateTimestamp, SequenceReport, UserSequence, SECONDS_PER_DAY};
pub use split::{leave_one_out_split, split_all, ItemRef, Split, SplitAssignment, SplitReport};
