//! Parameter-free conversion of dense transformer feed-forward layers into
//! sparse mixtures of experts.
//!
//! A dense layer `y = σ(x·K)·V` is split by clustering its key columns into
//! equal-size groups ([`clustering`]); each group becomes an expert and the
//! gate is the mean key of each expert ([`emoe`]). Experts can be merged back
//! into the original layer bit for bit. [`stats`] measures how selection
//! lines up with neuron activation, and [`train`] is a small deterministic
//! fine-tuning harness with hand-written gradients.

pub mod clustering;
pub mod emoe;
pub mod error;
pub mod ffn;
pub mod io;
pub mod numerics;
pub mod stats;
pub mod train;

pub use clustering::{
    balanced_kmeans, partition_objective, random_partition, ClusteringReport, KMeansConfig,
    Partition,
};
pub use emoe::{select_experts, EmoeLayer, Expert, GateMode, Router, SelectionPolicy};
pub use error::{Error, Result};
pub use ffn::FfnLayer;
pub use numerics::{apply_activation, topk_indices, ActivationKind, DType, Matrix, Rng, Scalar};
pub use stats::{
    activation_ratios, export_heatmap, flops_report, usage_histogram, ActivationRatios,
    FlopsReport, Heatmap, UsageHistogram,
};
