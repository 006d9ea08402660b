//! Dual-RNN rumour detection over hour-partitioned social engagement streams.
//!
//! The pipeline: events with timestamped posts are grouped into hour
//! partitions; post texts and per-user interaction histories are embedded
//! with DBOW paragraph vectors; per-partition embeddings are averaged,
//! padded with all-ones vectors and scaled by ln(m_k + 1) + 1; two two-layer
//! GRU branches (text and user) with max-pooling-over-time feed a dense
//! softmax head trained with cross-entropy and Adam.

pub mod corpus;
pub mod embed;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod synth;
pub mod util;

pub use corpus::{Event, Label, PartitionedEvent, Post};
pub use embed::{DocEmbeddingModel, UserDocument};
pub use features::SequenceFeatures;
pub use model::{DrrdModel, Prediction, TrainConfig};
pub use synth::SynthConfig;
