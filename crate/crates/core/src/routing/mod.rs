//! Routing logs and expert-specialization diagnostics.

mod log;
mod probe;

pub use log::{LayerRecords, RoutingLog, ROUTING_SCHEMA_VERSION};
pub use probe::{
    collect_routing, collect_routing_windows, cooccurrence_similarity, gate_mass, greedy_group,
    intra_group_similarity, normalized_gate_distribution, overlap_vs_samplesize, partition_score,
    selection_counts, shared_topk_overlap, top_experts, GateDistribution, Overlap, OverlapPoint,
    RankingPolicy, SampleMode, SimilarityMatrix,
};

#[cfg(test)]
pub(crate) use log::fixtures;
