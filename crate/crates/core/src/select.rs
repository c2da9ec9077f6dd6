//! Expert relevance scores, threshold selection and training masks.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::model::{rank_descending, GroupId, GroupKind, MoEModel};
use crate::routing::RoutingLog;

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    AverageGate,
    TokenSelectionRatio,
}

/// Number of samples and their lengths behind a relevance estimate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub n_samples: usize,
    pub lengths: Vec<usize>,
}

/// Per-layer relevance of every routed expert to a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRelevance {
    pub score_kind: ScoreKind,
    pub scores: Vec<Vec<f64>>,
    pub samples: SampleManifest,
}

/// Mean over samples of the per-sample mean of `value(token)` per expert.
fn two_level_mean(log: &RoutingLog, value: impl Fn(f64) -> f64) -> Result<Vec<Vec<f64>>> {
    if log.token_count() == 0 {
        return Err(input_err!("routing log `{}` is empty", log.task_label));
    }
    let ranges = log.sample_ranges();
    let n_samples = ranges.iter().filter(|(a, b)| b > a).count() as f64;
    Ok((0..log.n_layers)
        .map(|l| {
            let mut score = vec![0.0; log.n_experts];
            for &(a, b) in &ranges {
                if b == a {
                    continue;
                }
                let mut per = vec![0.0; log.n_experts];
                for t in a..b {
                    let (experts, gates) = log.token(l, t);
                    for (&e, &g) in experts.iter().zip(gates) {
                        per[e] += value(g);
                    }
                }
                let len = (b - a) as f64;
                for (s, p) in score.iter_mut().zip(per) {
                    *s += p / len;
                }
            }
            score.iter_mut().for_each(|s| *s /= n_samples);
            score
        })
        .collect())
}

fn manifest(log: &RoutingLog) -> SampleManifest {
    SampleManifest {
        n_samples: log.sample_lengths.len(),
        lengths: log.sample_lengths.clone(),
    }
}

/// Gate value averaged over each sample's tokens, then over samples.
pub fn average_gate_score(log: &RoutingLog) -> Result<ExpertRelevance> {
    Ok(ExpertRelevance {
        score_kind: ScoreKind::AverageGate,
        scores: two_level_mean(log, |g| g)?,
        samples: manifest(log),
    })
}

/// Fraction of token slots choosing each expert (selection indicator / K),
/// averaged per sample and then across samples.
pub fn token_selection_ratio(log: &RoutingLog, k: usize) -> Result<ExpertRelevance> {
    if k != log.top_k {
        return Err(input_err!("K = {k} but the log records {} experts per token", log.top_k));
    }
    let inv_k = 1.0 / k as f64;
    Ok(ExpertRelevance {
        score_kind: ScoreKind::TokenSelectionRatio,
        scores: two_level_mean(log, |_| inv_k)?,
        samples: manifest(log),
    })
}

impl ExpertRelevance {
    pub fn compute(kind: ScoreKind, log: &RoutingLog) -> Result<Self> {
        match kind {
            ScoreKind::AverageGate => average_gate_score(log),
            ScoreKind::TokenSelectionRatio => token_selection_ratio(log, log.top_k),
        }
    }
}

/// Selected experts per layer for a threshold `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelection {
    pub p: f64,
    pub score_kind: ScoreKind,
    pub n_experts: usize,
    /// Ascending expert ids per layer.
    pub layers: Vec<Vec<usize>>,
    pub achieved_mass: Vec<f64>,
}

/// Shortest prefix of the descending order (ties to the lower index) whose
/// cumulative score reaches `p`. If the whole layer falls short, every
/// expert with a positive score.
pub fn select_layer(scores: &[f64], p: f64) -> (Vec<usize>, f64) {
    let mut chosen = Vec::new();
    let mut mass = 0.0;
    for e in rank_descending(scores) {
        if mass >= p || scores[e] <= 0.0 {
            break;
        }
        chosen.push(e);
        mass += scores[e];
    }
    chosen.sort_unstable();
    (chosen, mass)
}

pub fn select_experts(rel: &ExpertRelevance, p: f64) -> Result<ExpertSelection> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(config_err!("threshold p = {p} must lie in (0, 1]"));
    }
    let (layers, achieved_mass) = rel.scores.iter().map(|s| select_layer(s, p)).unzip();
    Ok(ExpertSelection {
        p,
        score_kind: rel.score_kind,
        n_experts: rel.scores.first().map_or(0, Vec::len),
        layers,
        achieved_mass,
    })
}

impl ExpertSelection {
    /// Selected-expert count per layer.
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Same per-layer sizes with the experts replaced by random ones. Draws
    /// from the unselected experts when there are enough of them, so the
    /// control shares no expert with the real selection.
    pub fn random_like(&self, rng: &mut impl rand::Rng) -> ExpertSelection {
        use rand::seq::index::sample;
        let layers = self
            .layers
            .iter()
            .map(|sel| {
                let rest: Vec<usize> = (0..self.n_experts).filter(|e| !sel.contains(e)).collect();
                let mut v: Vec<usize> = if rest.len() >= sel.len() {
                    sample(rng, rest.len(), sel.len()).into_iter().map(|i| rest[i]).collect()
                } else {
                    sample(rng, self.n_experts, sel.len()).into_vec()
                };
                v.sort_unstable();
                v
            })
            .collect();
        ExpertSelection {
            layers,
            achieved_mass: vec![0.0; self.layers.len()],
            ..self.clone()
        }
    }
}

/// Per-layer selected-expert counts of one task, plus summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertsTrainedReport {
    pub task_label: String,
    pub n_experts: usize,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub mean_count: f64,
}

pub fn experts_trained_report(task_label: &str, sel: &ExpertSelection) -> ExpertsTrainedReport {
    let counts = sel.counts();
    let n = sel.n_experts.max(1) as f64;
    ExpertsTrainedReport {
        task_label: task_label.to_string(),
        n_experts: sel.n_experts,
        fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        mean_count: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
        counts,
    }
}

/// Which routed experts receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutedPolicy {
    All,
    Selected,
    None,
}

/// Parameter groups allowed to change during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMask {
    pub routed_policy: RoutedPolicy,
    pub shared_experts_trainable: bool,
    pub non_expert_trainable: bool,
    /// Low-rank adapter groups trainable (base weights follow the flags above).
    pub adapters_trainable: bool,
    pub groups: BTreeSet<GroupId>,
    pub trainable_param_count: usize,
}

impl TrainMask {
    pub fn contains(&self, g: &GroupId) -> bool {
        self.groups.contains(g)
    }

    /// Mask with only the adapter groups trainable.
    pub fn lora(model: &MoEModel) -> Result<Self> {
        if !model.has_lora() {
            return Err(config_err!("model has no low-rank adapters attached"));
        }
        resolve(model, None, RoutedPolicy::None, false, false, true)
    }
}

/// Resolves policy flags into concrete groups of `model`.
pub fn build_train_mask(
    model: &MoEModel,
    sel: Option<&ExpertSelection>,
    routed_policy: RoutedPolicy,
    shared: bool,
    non_expert: bool,
) -> Result<TrainMask> {
    resolve(model, sel, routed_policy, shared, non_expert, false)
}

fn resolve(
    model: &MoEModel,
    sel: Option<&ExpertSelection>,
    routed_policy: RoutedPolicy,
    shared: bool,
    non_expert: bool,
    adapters: bool,
) -> Result<TrainMask> {
    let cfg = model.config();
    let sel = match (routed_policy, sel) {
        (RoutedPolicy::Selected, None) => {
            return Err(config_err!("routed policy `selected` needs an expert selection"))
        }
        (RoutedPolicy::Selected, Some(s)) => {
            if s.layers.len() != cfg.n_layers || s.n_experts != cfg.n_routed_experts {
                return Err(config_err!(
                    "selection covers {} layers × {} experts, model has {} × {}",
                    s.layers.len(),
                    s.n_experts,
                    cfg.n_layers,
                    cfg.n_routed_experts
                ));
            }
            Some(s)
        }
        _ => None,
    };
    let mut groups = BTreeSet::new();
    let mut count = 0;
    for (g, _) in model.groups() {
        let take = match g.kind {
            GroupKind::RoutedExpert => match routed_policy {
                RoutedPolicy::All => true,
                RoutedPolicy::None => false,
                RoutedPolicy::Selected => {
                    let (l, e) = (g.layer.expect("expert group"), g.expert.expect("expert group"));
                    sel.is_some_and(|s| s.layers[l].contains(&e))
                }
            },
            GroupKind::SharedExpert => shared,
            k if k.is_lora() => adapters,
            _ => non_expert,
        };
        if take {
            count += model.group_size(&g);
            groups.insert(g);
        }
    }
    Ok(TrainMask {
        routed_policy,
        shared_experts_trainable: shared,
        non_expert_trainable: non_expert,
        adapters_trainable: adapters,
        groups,
        trainable_param_count: count,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionFile {
    schema_version: u32,
    p: f64,
    score_kind: ScoreKind,
    n_experts: usize,
    layers: std::collections::BTreeMap<usize, Vec<usize>>,
    achieved_mass: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable_param_count: Option<usize>,
}

impl ExpertSelection {
    /// Writes `{schema_version, p, score_kind, n_experts, layers: {l: [ids]}, ...}`.
    pub fn to_json(&self, trainable_param_count: Option<usize>) -> Result<String> {
        let f = SelectionFile {
            schema_version: SELECTION_SCHEMA_VERSION,
            p: self.p,
            score_kind: self.score_kind,
            n_experts: self.n_experts,
            layers: self.layers.iter().cloned().enumerate().collect(),
            achieved_mass: self.achieved_mass.iter().map(|m| if m.is_finite() { *m } else { 0.0 }).collect(),
            trainable_param_count,
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SelectionFile = serde_json::from_str(s)?;
        if f.schema_version != SELECTION_SCHEMA_VERSION {
            return Err(input_err!("unsupported selection schema_version {}", f.schema_version));
        }
        let n_layers = f.layers.len();
        if f.layers.keys().copied().ne(0..n_layers) {
            return Err(input_err!("selection layers must be numbered 0..{n_layers}"));
        }
        if f.layers.values().flatten().any(|&e| e >= f.n_experts) {
            return Err(input_err!("selection names an expert id >= {}", f.n_experts));
        }
        Ok(ExpertSelection {
            p: f.p,
            score_kind: f.score_kind,
            n_experts: f.n_experts,
            layers: f.layers.into_values().collect(),
            achieved_mass: f.achieved_mass,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, trainable_param_count: Option<usize>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(trainable_param_count)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::fixtures::log_from;

    #[test]
    fn single_token_average_gate() {
        let log = log_from(3, 1, &[vec![(vec![0], vec![0.9])]]);
        assert_eq!(average_gate_score(&log).unwrap().scores, vec![vec![0.9, 0.0, 0.0]]);
    }

    #[test]
    fn samples_weighted_equally() {
        // sample 1: one token, gate 0.2; sample 2: three tokens averaging 0.4
        let log = log_from(
            2,
            1,
            &[
                vec![(vec![1], vec![0.2])],
                vec![(vec![1], vec![0.3]), (vec![1], vec![0.5]), (vec![1], vec![0.4])],
            ],
        );
        let g = average_gate_score(&log).unwrap();
        assert!((g.scores[0][1] - 0.3).abs() < 1e-12);
        assert_eq!(g.samples.lengths, vec![1, 3]);
    }

    #[test]
    fn token_ratio_examples() {
        let log = log_from(3, 2, &[vec![(vec![0, 1], vec![0.4, 0.3]); 5]]);
        assert_eq!(token_selection_ratio(&log, 2).unwrap().scores, vec![vec![0.5, 0.5, 0.0]]);
        assert!(token_selection_ratio(&log, 3).is_err());

        // lengths 2 and 4, N=3, K=1
        let log = log_from(
            3,
            1,
            &[
                vec![(vec![0], vec![0.5]), (vec![1], vec![0.5])],
                vec![(vec![2], vec![0.5]); 4],
            ],
        );
        let r = token_selection_ratio(&log, 1).unwrap().scores;
        let want = [0.25, 0.25, 0.5];
        for (a, b) in r[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_log_is_error() {
        let log = RoutingLog::new("t", 1, 3, 1, false);
        assert!(average_gate_score(&log).is_err());
    }

    #[test]
    fn threshold_examples() {
        let s = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(select_layer(&s, 0.2).0, vec![0]);
        assert_eq!(select_layer(&s, 0.5).0, vec![0]);
        assert_eq!(select_layer(&s, 0.9).0, vec![0, 1, 2]);
        let (all, mass) = select_layer(&[0.5, 0.0, 0.25, 0.25], 1.0);
        assert_eq!(all, vec![0, 2, 3]);
        assert_eq!(mass, 1.0);
        // layer total below p: every positive expert
        let (sel, mass) = select_layer(&[0.1, 0.0, 0.2], 0.9);
        assert_eq!(sel, vec![0, 2]);
        assert!((mass - 0.3).abs() < 1e-15);
    }

    #[test]
    fn p_out_of_range() {
        let rel = ExpertRelevance {
            score_kind: ScoreKind::AverageGate,
            scores: vec![vec![0.5, 0.5]],
            samples: SampleManifest {
                n_samples: 1,
                lengths: vec![1],
            },
        };
        assert!(select_experts(&rel, 0.0).is_err());
        assert!(select_experts(&rel, 1.5).is_err());
        assert!(select_experts(&rel, f64::NAN).is_err());
    }

    #[test]
    fn report_counts() {
        let sel = ExpertSelection {
            p: 0.1,
            score_kind: ScoreKind::TokenSelectionRatio,
            n_experts: 8,
            layers: vec![vec![0, 1], vec![0, 1, 2, 3, 4], vec![5, 6, 7]],
            achieved_mass: vec![0.2; 3],
        };
        assert_eq!(experts_trained_report("t", &sel).counts, vec![2, 5, 3]);
        let back = ExpertSelection::from_json(&sel.to_json(Some(10)).unwrap()).unwrap();
        assert_eq!(back, sel);
    }
}
