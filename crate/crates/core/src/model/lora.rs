//! Low-rank adapters: `W ↦ W + scaling · A · B` with `A: d_in × r`, `B: r × d_out`.
//!
//! Attention projections and every expert matrix are adapted; embeddings,
//! norms, gate centroids and the output head are not.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{GroupId, GroupKind, Param, ParamId};
use super::transformer::MoEModel;
use crate::autodiff::Tensor;
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraState {
    pub rank: usize,
    pub scaling: f64,
    pub adapters: Vec<Adapter>,
}

impl LoraState {
    pub fn adapter_param_count(&self, model: &MoEModel) -> usize {
        self.adapters
            .iter()
            .map(|a| model.param(a.a).value.len() + model.param(a.b).value.len())
            .sum()
    }
}

fn adapter_kind(kind: GroupKind) -> Option<GroupKind> {
    match kind {
        GroupKind::Attention => Some(GroupKind::LoraAttention),
        GroupKind::RoutedExpert => Some(GroupKind::LoraRoutedExpert),
        GroupKind::SharedExpert => Some(GroupKind::LoraSharedExpert),
        _ => None,
    }
}

/// Base parameters that receive an adapter, in store order.
pub fn adapted_params(model: &MoEModel) -> Vec<ParamId> {
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| adapter_kind(p.group.kind).is_some() && p.value.is_matrix())
        .map(|(i, _)| i)
        .collect()
}

/// Adds zero-initialized-B adapters so the model function is unchanged.
pub fn attach_lora(model: &mut MoEModel, rank: usize, scaling: f64, seed: u64) -> Result<()> {
    if model.lora.is_some() {
        return Err(config_err!("model already has LoRA adapters"));
    }
    if rank == 0 {
        return Err(config_err!("LoRA rank must be at least 1"));
    }
    if !scaling.is_finite() {
        return Err(config_err!("LoRA scaling must be finite"));
    }
    let targets = adapted_params(model);
    for &id in &targets {
        let s = model.param(id).value.shape();
        if rank > s[0].min(s[1]) {
            return Err(config_err!(
                "LoRA rank {rank} exceeds min dimension of {} {:?}",
                model.param(id).name,
                s
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = Vec::with_capacity(targets.len());
    for base in targets {
        let (name, group, d_in, d_out) = {
            let p = model.param(base);
            (p.name.clone(), p.group, p.value.rows(), p.value.cols())
        };
        let kind = adapter_kind(group.kind).expect("filtered above");
        let group = GroupId { kind, ..group };
        let a = Tensor::randn(&[d_in, rank], 0.01, &mut rng);
        let b = Tensor::zeros(&[rank, d_out]);
        let params = model.params_mut();
        params.push(Param {
            name: format!("{name}.lora_a"),
            group,
            value: a,
        });
        params.push(Param {
            name: format!("{name}.lora_b"),
            group,
            value: b,
        });
        let n = params.len();
        adapters.push(Adapter {
            base,
            a: n - 2,
            b: n - 1,
        });
    }
    model.lora = Some(LoraState {
        rank,
        scaling,
        adapters,
    });
    Ok(())
}
