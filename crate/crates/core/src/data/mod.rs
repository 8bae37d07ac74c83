//! Datasets, synthetic tasks, tiling and metrics.

pub mod dataset;
pub mod image;
pub mod metrics;
pub mod patch;
pub mod synth;

pub use dataset::{write_dataset, Manifest, ManifestEntry, Sample, Split};
pub use metrics::{compute_metrics, Confusion, MetricsAccumulator, MetricsReport};
pub use patch::{crop, pad_to_multiple, PatchGrid};
pub use synth::SynthTask;
