//! Token-to-expert affinities and top-K gate selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, softmax_slice, transpose_raw, Tensor};
use crate::error::{config_err, Error, Result};

/// Affinities, sparse gates and the selected experts for a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub affinities: Tensor,
    pub gates: Tensor,
    /// Per token, ascending expert ids with nonzero gate.
    pub selected: Vec<Vec<usize>>,
}

/// How routed experts are chosen per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    TopK(usize),
    /// Experts in a group share the mean affinity of the group; whole groups
    /// are activated until `n_active` experts are on.
    Grouped {
        groups: Vec<Vec<usize>>,
        n_active: usize,
    },
}

impl Gating {
    pub fn active_count(&self) -> usize {
        match self {
            Gating::TopK(k) => *k,
            Gating::Grouped { n_active, .. } => *n_active,
        }
    }

    pub fn select(&self, affinity_row: &[f64]) -> Vec<usize> {
        match self {
            Gating::TopK(k) => topk_select(affinity_row, *k),
            Gating::Grouped { groups, n_active } => grouped_select(affinity_row, groups, *n_active),
        }
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        match self {
            Gating::TopK(k) => {
                if *k == 0 || *k > n_experts {
                    return Err(config_err!("top-k {k} not in 1..={n_experts}"));
                }
                Ok(())
            }
            Gating::Grouped { groups, n_active } => {
                validate_partition(groups, n_experts)?;
                let size = groups[0].len();
                if *n_active == 0 || n_active % size != 0 || *n_active > n_experts {
                    return Err(config_err!(
                        "{n_active} active experts is not a positive multiple of group size {size}"
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Checks that `groups` is a partition of `0..n` into equal-size cells.
pub fn validate_partition(groups: &[Vec<usize>], n: usize) -> Result<()> {
    let size = groups.first().map_or(0, Vec::len);
    if size == 0 || groups.iter().any(|g| g.len() != size) {
        return Err(config_err!("groups must be non-empty and of equal size"));
    }
    let mut seen = vec![false; n];
    for &e in groups.iter().flatten() {
        if e >= n || std::mem::replace(&mut seen[e], true) {
            return Err(config_err!("groups do not partition 0..{n} (expert {e})"));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(config_err!("groups do not cover all {n} experts"));
    }
    Ok(())
}

/// Indices sorted by descending value, ties by lower index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// The `k` largest entries (ties to the lower index), returned ascending.
pub fn topk_select(row: &[f64], k: usize) -> Vec<usize> {
    let mut sel: Vec<usize> = rank_descending(row).into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

fn grouped_select(row: &[f64], groups: &[Vec<usize>], n_active: usize) -> Vec<usize> {
    let scores: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|&e| row[e]).sum::<f64>() / g.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let min_member = |g: usize| groups[g].iter().copied().min().unwrap_or(usize::MAX);
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(min_member(a).cmp(&min_member(b)))
    });
    let n_groups = n_active / groups[0].len();
    let mut sel: Vec<usize> = order[..n_groups]
        .iter()
        .flat_map(|&g| groups[g].iter().copied())
        .collect();
    sel.sort_unstable();
    sel
}

/// Softmax over `hidden · centroidsᵀ` per token.
pub fn gate_affinity(hidden: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    let (t, d) = hidden.require_matrix("gate_affinity")?;
    let (n, d2) = centroids.require_matrix("gate_affinity")?;
    if d != d2 {
        return Err(Error::Shape {
            op: "gate_affinity",
            lhs: hidden.shape().to_vec(),
            rhs: centroids.shape().to_vec(),
        });
    }
    let logits = matmul_raw(hidden.data(), &transpose_raw(centroids.data(), n, d), t, d, n);
    let data = logits.chunks(n).flat_map(softmax_slice).collect();
    Tensor::matrix(t, n, data)
}

fn gate_from_selection(s: &Tensor, selected: Vec<Vec<usize>>) -> Result<GateOutput> {
    let n = s.cols();
    let mut gates = vec![0.0; s.len()];
    for (t, sel) in selected.iter().enumerate() {
        for &e in sel {
            gates[t * n + e] = s.get(t, e);
        }
    }
    Ok(GateOutput {
        affinities: s.clone(),
        gates: Tensor::matrix(s.rows(), n, gates)?,
        selected,
    })
}

/// Keeps the `k` largest affinities per token as gates, unrenormalized.
pub fn topk_gate(s: &Tensor, k: usize) -> Result<GateOutput> {
    let (t, n) = s.require_matrix("topk_gate")?;
    Gating::TopK(k).validate(n)?;
    let selected = (0..t).map(|i| topk_select(s.row(i), k)).collect();
    gate_from_selection(s, selected)
}

/// Grouped routing: `active_fraction = (num, den)` of the `N` experts are active per token.
pub fn grouped_topk_gate(
    s: &Tensor,
    groups: &[Vec<usize>],
    active_fraction: (usize, usize),
) -> Result<GateOutput> {
    let (t, n) = s.require_matrix("grouped_topk_gate")?;
    let gating = grouped_gating(groups, n, active_fraction)?;
    let selected = (0..t).map(|i| gating.select(s.row(i))).collect();
    gate_from_selection(s, selected)
}

/// Builds a validated [`Gating::Grouped`] for `n` experts.
pub fn grouped_gating(
    groups: &[Vec<usize>],
    n: usize,
    (num, den): (usize, usize),
) -> Result<Gating> {
    if den == 0 || num == 0 || (n * num) % den != 0 {
        return Err(config_err!("active fraction {num}/{den} of {n} experts is not integral"));
    }
    let gating = Gating::Grouped {
        groups: groups.to_vec(),
        n_active: n * num / den,
    };
    gating.validate(n)?;
    Ok(gating)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_examples() {
        let s = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.25; 4]]).unwrap();
        let g = topk_gate(&s, 2).unwrap();
        assert_eq!(g.gates.row(0), &[0.0, 0.0, 0.3, 0.4]);
        assert_eq!(g.selected, vec![vec![2, 3], vec![0, 1]]);
        assert!(matches!(topk_gate(&s, 5), Err(Error::Config(_))));
    }

    #[test]
    fn affinity_examples() {
        let h = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let a = gate_affinity(&h, &Tensor::zeros(&[4, 3])).unwrap();
        assert_eq!(a.row(0), &[0.25; 4]);
        let c = Tensor::from_rows(&[vec![100.0, 0.0, 0.0], vec![-100.0, 0.0, 0.0]]).unwrap();
        let a = gate_affinity(&h, &c).unwrap();
        assert!((a.get(0, 0) - 1.0).abs() < 1e-12 && a.get(0, 1) < 1e-12);
    }

    #[test]
    fn grouped_prefers_concentrated_group() {
        let groups = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        let row = vec![0.02, 0.02, 0.4, 0.4, 0.04, 0.04, 0.04, 0.04];
        let s = Tensor::matrix(1, 8, row).unwrap();
        let g = grouped_topk_gate(&s, &groups, (1, 4)).unwrap();
        assert_eq!(g.selected[0], vec![2, 3]);
        assert_eq!(g.gates.get(0, 2), 0.4);
    }

    #[test]
    fn grouped_errors() {
        let s = Tensor::matrix(1, 4, vec![0.25; 4]).unwrap();
        // not a partition
        assert!(grouped_topk_gate(&s, &[vec![0, 1], vec![1, 2]], (1, 2)).is_err());
        // 1/4 of 4 = 1 expert, not divisible by group size 2
        assert!(grouped_topk_gate(&s, &[vec![0, 1], vec![2, 3]], (1, 4)).is_err());
        // 1/3 of 4 is not integral
        assert!(grouped_topk_gate(&s, &[vec![0], vec![1], vec![2], vec![3]], (1, 3)).is_err());
    }

    #[test]
    fn grouped_matches_brute_force_group_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let groups: Vec<Vec<usize>> = (0..4).map(|g| vec![2 * g, 2 * g + 1]).collect();
        for _ in 0..1000 {
            let row: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let s = Tensor::matrix(1, 8, row.clone()).unwrap();
            let got = grouped_topk_gate(&s, &groups, (1, 4)).unwrap().selected[0].clone();
            // brute force: the best group by mean, then the next one.
            let mut best: Vec<(f64, usize)> = groups
                .iter()
                .enumerate()
                .map(|(i, g)| ((row[g[0]] + row[g[1]]) / 2.0, i))
                .collect();
            best.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = best[..1].iter().flat_map(|&(_, i)| groups[i].clone()).collect();
            want.sort();
            assert_eq!(got, want);
        }
    }
}
