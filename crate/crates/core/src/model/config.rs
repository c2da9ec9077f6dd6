use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Architecture of the toy MoE transformer.
///
/// `top_k` is the number of *routed* experts each token activates. In the
/// fine-grained formulation where `K` counts shared and routed experts
/// together, this is `K - n_shared_experts`. `n_routed_experts` and `top_k`
/// are stored after segmentation; `segmentation_factor` only records how
/// many fine-grained experts one coarse expert was split into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    #[serde(default = "one")]
    pub n_heads: usize,
    pub n_routed_experts: usize,
    pub n_shared_experts: usize,
    pub top_k: usize,
    pub expert_hidden_dim: usize,
    #[serde(default = "one")]
    pub segmentation_factor: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Normalization placement; only pre-norm RMS is implemented.
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    PreRms,
}

fn one() -> usize {
    1
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl MoEModelConfig {
    /// Desk-scale defaults: 8 routed experts, 2 active, 1 shared.
    /// The shared count is a choice for the demo, not a value fixed by the method.
    pub fn demo() -> Self {
        MoEModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 1,
            n_routed_experts: 8,
            n_shared_experts: 1,
            top_k: 2,
            expert_hidden_dim: 32,
            segmentation_factor: 1,
            max_seq_len: 32,
            seed: 0,
            norm: NormKind::PreRms,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_routed_experts", self.n_routed_experts),
            ("top_k", self.top_k),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("segmentation_factor", self.segmentation_factor),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{name} must be positive"));
        }
        if self.top_k > self.n_routed_experts {
            return Err(config_err!(
                "top_k {} exceeds n_routed_experts {}",
                self.top_k,
                self.n_routed_experts
            ));
        }
        if self.n_heads != 1 {
            return Err(config_err!("only single-head attention is supported"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(config_err!("norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn expert_param_count(&self) -> usize {
        2 * self.d_model * self.expert_hidden_dim
    }

    pub fn routed_params_per_layer(&self) -> usize {
        self.n_routed_experts * self.expert_param_count()
    }

    pub fn shared_params_per_layer(&self) -> usize {
        self.n_shared_experts * self.expert_param_count()
    }

    /// Embedding, attention, norms, gate centroids and head.
    pub fn non_expert_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d + self.n_routed_experts * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + d + d * self.vocab_size
    }

    /// Closed-form parameter count of the base model (no adapters).
    pub fn param_count(&self) -> usize {
        self.non_expert_param_count()
            + self.n_layers * (self.routed_params_per_layer() + self.shared_params_per_layer())
    }
}
