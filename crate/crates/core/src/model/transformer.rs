use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MoEModelConfig;
use super::gating::{grouped_gating, Gating};
use super::lora::LoraState;
use super::moe::{moe_ffn, ExpertVars, MoeLayerVars};
use super::params::{ExpertLayout, GroupId, GroupKind, LayerLayout, Layout, Param, ParamId};
use crate::autodiff::{softmax_slice, Tape, Tensor, Var};
use crate::error::{input_err, Result};
use crate::routing::RoutingLog;

/// Toy causal transformer whose feed-forward blocks are MoE layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    config: MoEModelConfig,
    params: Vec<Param>,
    layout: Layout,
    pub(crate) lora: Option<LoraState>,
    grouped: Option<Vec<Gating>>,
}

/// Parameters registered on a tape. `weight` resolves adapters.
#[derive(Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    effective: Vec<Var>,
}

impl Bound {
    /// Wraps leaves already on a tape, one per parameter. Adapters are not resolved.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound {
            effective: vars.clone(),
            vars,
        }
    }

    pub fn weight(&self, id: ParamId) -> Var {
        self.effective[id]
    }
}

/// Per-layer, per-token expert choices.
pub type Routing = Vec<Vec<Vec<usize>>>;

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub routing: Routing,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, group: GroupId, shape: &[usize], std: f64) -> ParamId {
        let value = Tensor::randn(shape, std, self.rng);
        self.push(name, group, value)
    }

    fn ones(&mut self, name: String, group: GroupId, n: usize) -> ParamId {
        self.push(name, group, Tensor::vector(vec![1.0; n]))
    }

    fn push(&mut self, name: String, group: GroupId, value: Tensor) -> ParamId {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn expert(&mut self, prefix: String, group: GroupId, d: usize, h: usize) -> ExpertLayout {
        ExpertLayout {
            w_in: self.add(format!("{prefix}.w_in"), group, &[d, h], 1.0 / (d as f64).sqrt()),
            w_out: self.add(format!("{prefix}.w_out"), group, &[h, d], 0.5 / (h as f64).sqrt()),
        }
    }
}

impl MoEModel {
    /// Seeded random initialization.
    pub fn new(config: MoEModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let (d, v, h) = (config.d_model, config.vocab_size, config.expert_hidden_dim);
        let proj = 1.0 / (d as f64).sqrt();
        let emb = GroupId::global(GroupKind::Embedding);

        let tok_emb = b.add("tok_emb".into(), emb, &[v, d], 1.0);
        let pos_emb = b.add("pos_emb".into(), emb, &[config.max_seq_len, d], 0.1);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let norm = GroupId::layer(l, GroupKind::Norm);
            let attn = GroupId::layer(l, GroupKind::Attention);
            let attn_norm = b.ones(format!("L{l}.attn_norm"), norm, d);
            let wq = b.add(format!("L{l}.wq"), attn, &[d, d], proj);
            let wk = b.add(format!("L{l}.wk"), attn, &[d, d], proj);
            let wv = b.add(format!("L{l}.wv"), attn, &[d, d], proj);
            let wo = b.add(format!("L{l}.wo"), attn, &[d, d], proj);
            let ffn_norm = b.ones(format!("L{l}.ffn_norm"), norm, d);
            let centroids = b.add(
                format!("L{l}.gate"),
                GroupId::layer(l, GroupKind::Gate),
                &[config.n_routed_experts, d],
                proj,
            );
            let routed = (0..config.n_routed_experts)
                .map(|e| {
                    let g = GroupId::expert(l, GroupKind::RoutedExpert, e);
                    b.expert(format!("L{l}.routed{e}"), g, d, h)
                })
                .collect();
            let shared = (0..config.n_shared_experts)
                .map(|e| {
                    let g = GroupId::expert(l, GroupKind::SharedExpert, e);
                    b.expert(format!("L{l}.shared{e}"), g, d, h)
                })
                .collect();
            layers.push(LayerLayout {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                centroids,
                routed,
                shared,
            });
        }
        let final_norm = b.ones("final_norm".into(), GroupId::global(GroupKind::Norm), d);
        let head = b.add("head".into(), GroupId::global(GroupKind::Head), &[d, v], proj);
        let params = b.params;

        Ok(MoEModel {
            config,
            params,
            layout: Layout {
                tok_emb,
                pos_emb,
                layers,
                final_norm,
                head,
            },
            lora: None,
            grouped: None,
        })
    }

    pub fn config(&self) -> &MoEModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<Param> {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    /// Mutable access for optimizer updates and test fixtures.
    pub fn param_value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn has_lora(&self) -> bool {
        self.lora.is_some()
    }

    pub fn lora(&self) -> Option<&LoraState> {
        self.lora.as_ref()
    }

    /// Parameter ids per group, in group order.
    pub fn groups(&self) -> BTreeMap<GroupId, Vec<ParamId>> {
        let mut m: BTreeMap<GroupId, Vec<ParamId>> = BTreeMap::new();
        for (i, p) in self.params.iter().enumerate() {
            m.entry(p.group).or_default().push(i);
        }
        m
    }

    pub fn group_size(&self, g: &GroupId) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == *g)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn gating(&self, layer: usize) -> Gating {
        match &self.grouped {
            Some(g) => g[layer].clone(),
            None => Gating::TopK(self.config.top_k),
        }
    }

    pub fn grouped_routing(&self) -> Option<&[Gating]> {
        self.grouped.as_deref()
    }

    /// Switches every layer to grouped routing with its own partition.
    pub fn set_grouped_routing(
        &mut self,
        partitions: &[Vec<Vec<usize>>],
        active_fraction: (usize, usize),
    ) -> Result<()> {
        if partitions.len() != self.config.n_layers {
            return Err(input_err!(
                "{} partitions for {} layers",
                partitions.len(),
                self.config.n_layers
            ));
        }
        let n = self.config.n_routed_experts;
        let g = partitions
            .iter()
            .map(|p| grouped_gating(p, n, active_fraction))
            .collect::<Result<Vec<_>>>()?;
        self.grouped = Some(g);
        Ok(())
    }

    pub(crate) fn set_gating(&mut self, gating: Option<Vec<Gating>>) {
        self.grouped = gating;
    }

    pub fn clear_grouped_routing(&mut self) {
        self.grouped = None;
    }

    /// Experts each token activates under the current gating.
    pub fn active_experts(&self) -> usize {
        self.gating(0).active_count()
    }

    /// Registers all parameters on `tape`; `trainable` decides which leaves need gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId, &Param) -> bool) -> Result<Bound> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone(), trainable(i, p)))
            .collect();
        let mut effective = vars.clone();
        if let Some(lora) = &self.lora {
            for a in &lora.adapters {
                let ab = tape.matmul(vars[a.a], vars[a.b])?;
                let ab = tape.scale(ab, lora.scaling)?;
                effective[a.base] = tape.add(vars[a.base], ab)?;
            }
        }
        Ok(Bound { vars, effective })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(input_err!("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(input_err!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(input_err!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    pub fn layer_vars(&self, bound: &Bound, l: usize) -> MoeLayerVars {
        let ll = &self.layout.layers[l];
        let ev = |e: &ExpertLayout| ExpertVars {
            w_in: bound.weight(e.w_in),
            w_out: bound.weight(e.w_out),
        };
        MoeLayerVars {
            centroids: bound.weight(ll.centroids),
            routed: ll.routed.iter().map(ev).collect(),
            shared: ll.shared.iter().map(ev).collect(),
        }
    }

    /// Next-token logits for one sequence on an existing tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        mut sink: Option<&mut RoutingLog>,
        forced: Option<&Routing>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let e = tape.gather_rows(bound.weight(self.layout.tok_emb), tokens)?;
        let p = tape.gather_rows(bound.weight(self.layout.pos_emb), &positions)?;
        let mut x = tape.add(e, p)?;
        let attn_scale = 1.0 / (cfg.d_model as f64).sqrt();
        let mut routing = Vec::with_capacity(cfg.n_layers);

        for (l, ll) in self.layout.layers.iter().enumerate() {
            let h = tape.rms_norm_rows(x, cfg.norm_eps)?;
            let h = tape.mul_row(h, bound.weight(ll.attn_norm))?;
            let q = tape.matmul(h, bound.weight(ll.wq))?;
            let k = tape.matmul(h, bound.weight(ll.wk))?;
            let v = tape.matmul(h, bound.weight(ll.wv))?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, attn_scale)?;
            let a = tape.causal_softmax_rows(scores)?;
            let o = tape.matmul(a, v)?;
            let o = tape.matmul(o, bound.weight(ll.wo))?;
            x = tape.add(x, o)?;

            let u = tape.rms_norm_rows(x, cfg.norm_eps)?;
            let u = tape.mul_row(u, bound.weight(ll.ffn_norm))?;
            let vars = self.layer_vars(bound, l);
            let gating = self.gating(l);
            let moe = moe_ffn(tape, u, &vars, &gating, forced.map(|f| f[l].as_slice()))?;
            x = tape.add(x, moe.output)?;

            if let Some(log) = sink.as_deref_mut() {
                let keep_aff = log.retains_affinities();
                for (ti, sel) in moe.selected.iter().enumerate() {
                    let gates: Vec<f64> = sel.iter().map(|&e| moe.gates.get(ti, e)).collect();
                    let aff = keep_aff.then(|| moe.affinities.row(ti));
                    log.push_token(l, sel, &gates, aff)?;
                }
            }
            routing.push(moe.selected);
        }

        let h = tape.rms_norm_rows(x, cfg.norm_eps)?;
        let h = tape.mul_row(h, bound.weight(self.layout.final_norm))?;
        let logits = tape.matmul(h, bound.weight(self.layout.head))?;
        if let Some(log) = sink {
            log.end_sample(t)?;
        }
        Ok(ForwardOutput { logits, routing })
    }

    /// Next-token logits (`tokens × vocab_size`). Appends routing to `sink` if given.
    pub fn forward(&self, tokens: &[usize], sink: Option<&mut RoutingLog>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_, _| false)?;
        let out = self.forward_on_tape(&mut tape, &bound, tokens, sink, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Mean next-token cross-entropy of one sequence (predicting `seq[1..]`).
    pub fn sequence_loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &[usize],
    ) -> Result<Var> {
        if seq.len() < 2 {
            return Err(input_err!("need at least two tokens to form a next-token target"));
        }
        let out = self.forward_on_tape(tape, bound, &seq[..seq.len() - 1], None, None)?;
        tape.cross_entropy(out.logits, &seq[1..])
    }

    /// Token-weighted mean cross-entropy over sequences.
    pub fn mean_loss(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in seqs {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, |_, _| false)?;
            let l = self.sequence_loss_on_tape(&mut tape, &bound, s)?;
            let n = s.len() - 1;
            total += tape.value(l).item() * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(input_err!("no sequences to evaluate"));
        }
        Ok(total / count as f64)
    }

    /// Next-token distributions for every position of `tokens`.
    pub fn next_token_probs(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward(tokens, None)?;
        Ok((0..logits.rows()).map(|i| softmax_slice(logits.row(i))).collect())
    }
}
