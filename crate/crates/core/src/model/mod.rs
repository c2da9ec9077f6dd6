//! Toy causal transformer with mixture-of-experts feed-forward layers.

pub mod checkpoint;
mod config;
mod gating;
mod lora;
mod moe;
mod params;
mod transformer;

pub use config::{MoEModelConfig, NormKind};
pub use gating::{
    gate_affinity, grouped_gating, grouped_topk_gate, rank_descending, topk_gate, topk_select,
    validate_partition, GateOutput, Gating,
};
pub use lora::{adapted_params, attach_lora, Adapter, LoraState};
pub use moe::{expert_ffn, moe_ffn, moe_layer_forward, ExpertVars, MoeLayerVars, MoeOutput};
pub use params::{ExpertLayout, GroupId, GroupKind, LayerLayout, Layout, Param, ParamId};
pub use transformer::{Bound, ForwardOutput, MoEModel, Routing};
