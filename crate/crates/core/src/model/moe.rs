//! MoE feed-forward layer on the gradient tape.
//!
//! `h = Σ_shared FFN_s(u) + Σ_i g_i · FFN_i(u) + u` with `g_i` the raw
//! softmax affinity for the selected experts and zero elsewhere.

use super::gating::Gating;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{input_err, Result};

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w_in: Var,
    pub w_out: Var,
}

#[derive(Clone, Debug)]
pub struct MoeLayerVars {
    /// One centroid row per routed expert (`N × d_model`).
    pub centroids: Var,
    pub routed: Vec<ExpertVars>,
    pub shared: Vec<ExpertVars>,
}

#[derive(Debug)]
pub struct MoeOutput {
    pub output: Var,
    pub affinities: Tensor,
    pub gates: Tensor,
    pub selected: Vec<Vec<usize>>,
}

/// `silu(x · w_in) · w_out`.
pub fn expert_ffn(tape: &mut Tape, x: Var, e: ExpertVars) -> Result<Var> {
    let h = tape.matmul(x, e.w_in)?;
    let h = tape.silu(h)?;
    tape.matmul(h, e.w_out)
}

/// Shared plus gated routed expert outputs, without the residual.
///
/// `forced` pins the per-token expert choice (used to hold routing fixed
/// while finite-differencing).
pub fn moe_ffn(
    tape: &mut Tape,
    u: Var,
    layer: &MoeLayerVars,
    gating: &Gating,
    forced: Option<&[Vec<usize>]>,
) -> Result<MoeOutput> {
    let tokens = tape.value(u).rows();
    let n = layer.routed.len();

    let ct = tape.transpose(layer.centroids)?;
    let logits = tape.matmul(u, ct)?;
    let s = tape.softmax_rows(logits)?;
    let affinities = tape.value(s).clone();

    let selected: Vec<Vec<usize>> = match forced {
        Some(f) => {
            if f.len() != tokens {
                return Err(input_err!("forced routing covers {} of {tokens} tokens", f.len()));
            }
            f.to_vec()
        }
        None => (0..tokens).map(|t| gating.select(affinities.row(t))).collect(),
    };

    let mut mask = vec![0.0; tokens * n];
    let mut routed_tokens: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, sel) in selected.iter().enumerate() {
        for &e in sel {
            if e >= n {
                return Err(input_err!("expert {e} out of range"));
            }
            mask[t * n + e] = 1.0;
            routed_tokens[e].push(t);
        }
    }
    let g = tape.mul_const(s, mask)?;
    let gates = tape.value(g).clone();

    let mut acc: Option<Var> = None;
    let mut add = |tape: &mut Tape, v: Var| -> Result<()> {
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };

    for e in &layer.shared {
        let y = expert_ffn(tape, u, *e)?;
        add(tape, y)?;
    }
    for (i, rows) in routed_tokens.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let x = tape.gather_rows(u, rows)?;
        let y = expert_ffn(tape, x, layer.routed[i])?;
        let gcol = tape.gather_column(g, i, rows)?;
        let y = tape.mul_col(y, gcol)?;
        let y = tape.scatter_rows(y, rows, tokens)?;
        add(tape, y)?;
    }

    let output = match acc {
        Some(a) => a,
        None => {
            let d = tape.value(u).cols();
            tape.constant(Tensor::zeros(&[tokens, d]))
        }
    };
    Ok(MoeOutput {
        output,
        affinities,
        gates,
        selected,
    })
}

/// The full layer including the residual connection.
pub fn moe_layer_forward(
    tape: &mut Tape,
    u: Var,
    layer: &MoeLayerVars,
    gating: &Gating,
    forced: Option<&[Vec<usize>]>,
) -> Result<MoeOutput> {
    let mut out = moe_ffn(tape, u, layer, gating, forced)?;
    out.output = tape.add(out.output, u)?;
    Ok(out)
}
