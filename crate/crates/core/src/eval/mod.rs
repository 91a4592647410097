pub mod benchmark;
pub mod clip;
pub mod datasets;
pub mod metrics;

pub use benchmark::{benchmark_run, MethodConfig, MetricRow, MetricTable};
pub use clip::{ClipEncoder, ClipVitB32, FixtureClip};
pub use datasets::{build_dataset, DatasetId, DatasetOptions, EditPair, PairSource};
pub use metrics::{clip_directional_similarity, clip_score, cosine};
