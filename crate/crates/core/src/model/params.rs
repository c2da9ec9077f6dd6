use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Kind of a parameter group. Adapter kinds mirror the base kinds they adapt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Embedding,
    Attention,
    Norm,
    Gate,
    RoutedExpert,
    SharedExpert,
    Head,
    LoraAttention,
    LoraRoutedExpert,
    LoraSharedExpert,
}

impl GroupKind {
    pub fn is_lora(self) -> bool {
        matches!(
            self,
            GroupKind::LoraAttention | GroupKind::LoraRoutedExpert | GroupKind::LoraSharedExpert
        )
    }

    /// Everything that is neither an expert nor an adapter.
    pub fn is_non_expert(self) -> bool {
        matches!(
            self,
            GroupKind::Embedding
                | GroupKind::Attention
                | GroupKind::Norm
                | GroupKind::Gate
                | GroupKind::Head
        )
    }

    fn tag(self) -> &'static str {
        match self {
            GroupKind::Embedding => "embedding",
            GroupKind::Attention => "attention",
            GroupKind::Norm => "norm",
            GroupKind::Gate => "gate",
            GroupKind::RoutedExpert => "routed",
            GroupKind::SharedExpert => "shared",
            GroupKind::Head => "head",
            GroupKind::LoraAttention => "lora_attention",
            GroupKind::LoraRoutedExpert => "lora_routed",
            GroupKind::LoraSharedExpert => "lora_shared",
        }
    }
}

/// Stable identifier `⟨layer, kind, expert⟩` of a parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub layer: Option<usize>,
    pub kind: GroupKind,
    pub expert: Option<usize>,
}

impl GroupId {
    pub fn global(kind: GroupKind) -> Self {
        GroupId {
            layer: None,
            kind,
            expert: None,
        }
    }

    pub fn layer(layer: usize, kind: GroupKind) -> Self {
        GroupId {
            layer: Some(layer),
            kind,
            expert: None,
        }
    }

    pub fn expert(layer: usize, kind: GroupKind, expert: usize) -> Self {
        GroupId {
            layer: Some(layer),
            kind,
            expert: Some(expert),
        }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "L{l}/")?;
        }
        f.write_str(self.kind.tag())?;
        if let Some(e) = self.expert {
            write!(f, "/{e}")?;
        }
        Ok(())
    }
}

/// Index of a parameter in its model's store.
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: GroupId,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertLayout {
    pub w_in: ParamId,
    pub w_out: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub centroids: ParamId,
    pub routed: Vec<ExpertLayout>,
    pub shared: Vec<ExpertLayout>,
}

/// Where each base parameter lives in the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerLayout>,
    pub final_norm: ParamId,
    pub head: ParamId,
}
