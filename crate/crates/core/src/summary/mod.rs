//! Hierarchical datasets and the two-level set summary network.

mod dataset;
mod network;

pub use dataset::{DatasetMeta, HierarchicalDataset};
pub use network::{
    deep_invariant, equivariant_module, invariant_module, softmax, tape_deep_invariant, tape_equivariant,
    tape_invariant, Forward, InputScaling, StackedBatch, SummaryConfig, SummaryNet, LOG_FLOOR,
};
