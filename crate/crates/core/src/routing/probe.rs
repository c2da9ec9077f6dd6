//! Specialization diagnostics over routing logs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::RoutingLog;
use crate::corpus::Corpus;
use crate::error::{input_err, Error, Result};
use crate::model::{rank_descending, MoEModel};

/// Runs the model over every document (split into `max_seq_len` windows,
/// one sample each) and records routing for all layers.
pub fn collect_routing(model: &MoEModel, corpus: &Corpus, retain_affinities: bool) -> Result<RoutingLog> {
    let cfg = model.config();
    if corpus.vocab_size > cfg.vocab_size {
        return Err(input_err!(
            "corpus `{}` vocab_size {} exceeds model vocab_size {}",
            corpus.task_label,
            corpus.vocab_size,
            cfg.vocab_size
        ));
    }
    let mut log = RoutingLog::new(
        corpus.task_label.clone(),
        cfg.n_layers,
        cfg.n_routed_experts,
        model.active_experts(),
        retain_affinities,
    );
    for doc in corpus.documents() {
        for chunk in doc.chunks(cfg.max_seq_len) {
            let tokens: Vec<usize> = chunk.iter().map(|&t| t as usize).collect();
            model.forward(&tokens, Some(&mut log))?;
        }
    }
    Ok(log)
}

/// Routing over pre-cut windows, one sample per window.
pub fn collect_routing_windows(
    model: &MoEModel,
    label: &str,
    windows: &[Vec<usize>],
) -> Result<RoutingLog> {
    let cfg = model.config();
    let mut log = RoutingLog::new(label, cfg.n_layers, cfg.n_routed_experts, model.active_experts(), false);
    for w in windows {
        model.forward(w, Some(&mut log))?;
    }
    Ok(log)
}

/// Sum of gate values per expert in one layer.
pub fn gate_mass(log: &RoutingLog, layer: usize) -> Vec<f64> {
    let mut mass = vec![0.0; log.n_experts];
    let rec = log.layer(layer);
    for (&e, &g) in rec.experts.iter().zip(&rec.gates) {
        mass[e] += g;
    }
    mass
}

/// Number of tokens selecting each expert in one layer.
pub fn selection_counts(log: &RoutingLog, layer: usize) -> Vec<usize> {
    let mut counts = vec![0; log.n_experts];
    for &e in &log.layer(layer).experts {
        counts[e] += 1;
    }
    counts
}

/// Experts sorted by descending share of the layer's total gate mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDistribution {
    pub layer: usize,
    pub shares: Vec<(usize, f64)>,
}

impl GateDistribution {
    pub fn cumulative(&self) -> Vec<f64> {
        self.shares
            .iter()
            .scan(0.0, |acc, (_, s)| {
                *acc += s;
                Some(*acc)
            })
            .collect()
    }

    /// Share carried by the `n` largest experts.
    pub fn top_share(&self, n: usize) -> f64 {
        self.shares.iter().take(n).map(|(_, s)| s).sum()
    }
}

/// Per-expert gate mass divided by the layer total, normalized over the whole log.
pub fn normalized_gate_distribution(log: &RoutingLog, layer: usize) -> Result<GateDistribution> {
    if layer >= log.n_layers {
        return Err(input_err!("layer {layer} out of range"));
    }
    let mass = gate_mass(log, layer);
    let total: f64 = mass.iter().sum();
    if log.token_count() == 0 || !(total > 0.0) {
        return Err(input_err!("empty gate distribution for layer {layer}"));
    }
    let shares = rank_descending(&mass)
        .into_iter()
        .map(|e| (e, mass[e] / total))
        .collect();
    Ok(GateDistribution { layer, shares })
}

/// Statistic used to rank experts within a log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingPolicy {
    #[default]
    GateMass,
    TokenCount,
}

/// Up to `k` highest-ranked experts with nonzero usage, ties to the lower id.
pub fn top_experts(log: &RoutingLog, layer: usize, k: usize, policy: RankingPolicy) -> Vec<usize> {
    let score: Vec<f64> = match policy {
        RankingPolicy::GateMass => gate_mass(log, layer),
        RankingPolicy::TokenCount => selection_counts(log, layer).into_iter().map(|c| c as f64).collect(),
    };
    rank_descending(&score)
        .into_iter()
        .filter(|&e| score[e] > 0.0)
        .take(k)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub per_layer: Vec<usize>,
    pub mean: f64,
}

/// Size of the intersection of the two logs' top-`k` expert sets, per layer.
pub fn shared_topk_overlap(
    a: &RoutingLog,
    b: &RoutingLog,
    top_k: usize,
    policy: RankingPolicy,
) -> Result<Overlap> {
    if a.n_layers != b.n_layers || a.n_experts != b.n_experts {
        return Err(input_err!(
            "logs differ in shape: {}×{} vs {}×{}",
            a.n_layers,
            a.n_experts,
            b.n_layers,
            b.n_experts
        ));
    }
    let per_layer: Vec<usize> = (0..a.n_layers)
        .map(|l| {
            let ta = top_experts(a, l, top_k, policy);
            let tb = top_experts(b, l, top_k, policy);
            ta.iter().filter(|e| tb.contains(e)).count()
        })
        .collect();
    let mean = per_layer.iter().sum::<usize>() as f64 / a.n_layers.max(1) as f64;
    Ok(Overlap { per_layer, mean })
}

/// Symmetric `n × n` cosine-similarity matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(input_err!("similarity matrix needs {} values", n * n));
        }
        Ok(SimilarityMatrix { n, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n).map(<[f64]>::to_vec).collect()
    }
}

/// Co-occurrence counts within each token's selected set, including an
/// expert's pairing with itself, then cosine similarity between rows.
/// Experts that are never selected get similarity 0 with everyone.
pub fn cooccurrence_similarity(log: &RoutingLog, layer: usize) -> Result<SimilarityMatrix> {
    if layer >= log.n_layers {
        return Err(input_err!("layer {layer} out of range"));
    }
    let n = log.n_experts;
    let mut counts = vec![0.0; n * n];
    for t in 0..log.token_count() {
        let (sel, _) = log.token(layer, t);
        for &i in sel {
            for &j in sel {
                counts[i * n + j] += 1.0;
            }
        }
    }
    let norms: Vec<f64> = counts
        .chunks(n)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let s = if i == j {
                1.0
            } else {
                let dot: f64 = (0..n).map(|k| counts[i * n + k] * counts[j * n + k]).sum();
                (dot / (norms[i] * norms[j])).clamp(0.0, 1.0)
            };
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    SimilarityMatrix::new(n, values)
}

/// Mean pairwise similarity inside one group.
pub fn intra_group_similarity(sim: &SimilarityMatrix, group: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in group.iter().enumerate() {
        for &j in &group[a + 1..] {
            total += sim.get(i, j);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Sum over groups of their mean intra-group similarity.
pub fn partition_score(sim: &SimilarityMatrix, partition: &[Vec<usize>]) -> f64 {
    partition.iter().map(|g| intra_group_similarity(sim, g)).sum()
}

/// Visits all `k`-subsets of `items` in lexicographic order of positions.
fn for_each_combination(items: &[usize], k: usize, mut f: impl FnMut(&[usize])) {
    let n = items.len();
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut buf = vec![0; k];
    loop {
        for (b, &i) in buf.iter_mut().zip(&idx) {
            *b = items[i];
        }
        f(&buf);
        let Some(pos) = (0..k).rev().find(|&p| idx[p] != p + n - k) else {
            return;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

/// Repeatedly picks the remaining group of `group_size` experts with the
/// highest mean pairwise similarity; ties go to the lexicographically
/// smallest index tuple.
pub fn greedy_group(sim: &SimilarityMatrix, group_size: usize) -> Result<Vec<Vec<usize>>> {
    if group_size < 2 || sim.n % group_size != 0 {
        return Err(Error::Config(format!(
            "cannot split {} experts into groups of {group_size}",
            sim.n
        )));
    }
    let mut remaining: Vec<usize> = (0..sim.n).collect();
    let mut groups = Vec::with_capacity(sim.n / group_size);
    while !remaining.is_empty() {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for_each_combination(&remaining, group_size, |g| {
            let s = intra_group_similarity(sim, g);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, g.to_vec()));
            }
        });
        let (_, g) = best.expect("at least one group remains");
        remaining.retain(|e| !g.contains(e));
        groups.push(g);
    }
    Ok(groups)
}

/// How the two subsamples of an overlap measurement are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Disjoint,
    /// Both sides see the same subsample.
    Identical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapPoint {
    pub sample_tokens: usize,
    pub mean_overlap: f64,
    pub per_layer: Vec<usize>,
}

/// Shared top-`k` overlap between two subsamples of `corpus`, for each token budget in `sizes`.
pub fn overlap_vs_samplesize(
    model: &MoEModel,
    corpus: &Corpus,
    sizes: &[usize],
    top_k: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<Vec<OverlapPoint>> {
    if sizes.contains(&0) {
        return Err(input_err!("sample sizes must be at least one token"));
    }
    let Some(&max) = sizes.iter().max() else {
        return Ok(Vec::new());
    };
    let win = model.config().max_seq_len;
    let per_side = max.div_ceil(win);
    let sides = if mode == SampleMode::Disjoint { 2 } else { 1 };
    let mut windows = corpus.windows(win);
    if windows.len() < sides * per_side {
        return Err(input_err!(
            "corpus `{}` has {} tokens in full windows; need {} for two samples of {max}",
            corpus.task_label,
            windows.len() * win,
            sides * per_side * win
        ));
    }
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    windows.truncate(sides * per_side);
    let log = collect_routing_windows(model, &corpus.task_label, &windows)?;

    let side = |offset: usize, tokens: usize| -> RoutingLog {
        let full = tokens / win;
        let rest = tokens % win;
        let mut idx: Vec<usize> = (offset..offset + full).collect();
        let mut sub = log.select_samples(&idx);
        if rest > 0 {
            idx = vec![offset + full];
            let last = log.select_samples(&idx).truncate_tokens(rest);
            sub.merge(&last).expect("same shape");
        }
        sub
    };

    sizes
        .iter()
        .map(|&s| {
            let a = side(0, s);
            let b = match mode {
                SampleMode::Disjoint => side(per_side, s),
                SampleMode::Identical => a.clone(),
            };
            let o = shared_topk_overlap(&a, &b, top_k, RankingPolicy::GateMass)?;
            Ok(OverlapPoint {
                sample_tokens: s,
                mean_overlap: o.mean,
                per_layer: o.per_layer,
            })
        })
        .collect()
}
