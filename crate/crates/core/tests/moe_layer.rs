use esft_core::model::{
    gate_affinity, moe_ffn, moe_layer_forward, topk_gate, ExpertVars, GateOutput, Gating, GroupKind,
    MoEModel, MoEModelConfig, MoeLayerVars,
};
use esft_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Weights {
    centroids: Tensor,
    routed: Vec<(Tensor, Tensor)>,
    shared: Vec<(Tensor, Tensor)>,
}

fn random_weights(rng: &mut ChaCha8Rng, d: usize, h: usize, n: usize, ks: usize) -> Weights {
    let ffn = |rng: &mut ChaCha8Rng| {
        (
            Tensor::randn(&[d, h], 0.5, rng),
            Tensor::randn(&[h, d], 0.5, rng),
        )
    };
    Weights {
        centroids: Tensor::randn(&[n, d], 1.0, rng),
        routed: (0..n).map(|_| ffn(rng)).collect(),
        shared: (0..ks).map(|_| ffn(rng)).collect(),
    }
}

fn put(tape: &mut Tape, w: &Weights) -> MoeLayerVars {
    let ev = |tape: &mut Tape, (a, b): &(Tensor, Tensor)| ExpertVars {
        w_in: tape.constant(a.clone()),
        w_out: tape.constant(b.clone()),
    };
    MoeLayerVars {
        centroids: tape.constant(w.centroids.clone()),
        routed: w.routed.iter().map(|e| ev(tape, e)).collect(),
        shared: w.shared.iter().map(|e| ev(tape, e)).collect(),
    }
}

fn layer(w: &Weights, u: &Tensor, gating: &Gating) -> Tensor {
    let mut tape = Tape::new();
    let vars = put(&mut tape, w);
    let uv = tape.constant(u.clone());
    let out = moe_layer_forward(&mut tape, uv, &vars, gating, None).unwrap();
    tape.value(out.output).clone()
}

// Per-token reference, written independently from the tape code.
fn naive_ffn(x: &[f64], (w_in, w_out): &(Tensor, Tensor)) -> Vec<f64> {
    let (d, h) = (w_in.rows(), w_in.cols());
    let hidden: Vec<f64> = (0..h)
        .map(|j| {
            let z: f64 = (0..d).map(|i| x[i] * w_in.get(i, j)).sum();
            z / (1.0 + (-z).exp())
        })
        .collect();
    (0..d)
        .map(|k| (0..h).map(|j| hidden[j] * w_out.get(j, k)).sum())
        .collect()
}

fn naive_layer(w: &Weights, u: &Tensor, k: usize) -> Vec<Vec<f64>> {
    let n = w.routed.len();
    (0..u.rows())
        .map(|t| {
            let x = u.row(t);
            let logits: Vec<f64> = (0..n)
                .map(|i| x.iter().zip(w.centroids.row(i)).map(|(a, b)| a * b).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let s: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            let mut out = x.to_vec();
            for e in &w.shared {
                out.iter_mut().zip(naive_ffn(x, e)).for_each(|(o, y)| *o += y);
            }
            for &i in &order[..k] {
                out.iter_mut()
                    .zip(naive_ffn(x, &w.routed[i]))
                    .for_each(|(o, y)| *o += s[i] * y);
            }
            out
        })
        .collect()
}

#[test]
fn zero_experts_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = random_weights(&mut rng, 6, 5, 4, 1);
    for (a, b) in w.routed.iter_mut().chain(w.shared.iter_mut()) {
        *a = Tensor::zeros(a.shape());
        *b = Tensor::zeros(b.shape());
    }
    let u = Tensor::randn(&[7, 6], 1.0, &mut rng);
    assert_eq!(layer(&w, &u, &Gating::TopK(2)), u);
}

#[test]
fn single_expert_gets_unit_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_weights(&mut rng, 4, 3, 1, 0);
    let u = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let out = layer(&w, &u, &Gating::TopK(1));
    for t in 0..3 {
        let y = naive_ffn(u.row(t), &w.routed[0]);
        for j in 0..4 {
            assert!((out.get(t, j) - (u.get(t, j) + y[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_expert_layer_matches_per_token_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let w = random_weights(&mut rng, 5, 6, 4, 1);
        let u = Tensor::randn(&[9, 5], 1.0, &mut rng);
        let out = layer(&w, &u, &Gating::TopK(2));
        let want = naive_layer(&w, &u, 2);
        for t in 0..9 {
            for j in 0..5 {
                assert!((out.get(t, j) - want[t][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn without_shared_experts_reduces_to_classic_moe() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random_weights(&mut rng, 5, 4, 6, 0);
    let u = Tensor::randn(&[8, 5], 1.0, &mut rng);
    let out = layer(&w, &u, &Gating::TopK(3));
    let want = naive_layer(&w, &u, 3);
    for t in 0..8 {
        for j in 0..5 {
            assert!((out.get(t, j) - want[t][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_contribution_ignores_centroids() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut w = random_weights(&mut rng, 4, 4, 4, 2);
    for (a, b) in w.routed.iter_mut() {
        *a = Tensor::zeros(a.shape());
        *b = Tensor::zeros(b.shape());
    }
    let u = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let before = layer(&w, &u, &Gating::TopK(2));
    w.centroids = Tensor::randn(&[4, 4], 3.0, &mut rng);
    assert_eq!(layer(&w, &u, &Gating::TopK(2)), before);
}

#[test]
fn gates_are_raw_affinities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_weights(&mut rng, 4, 4, 8, 0);
    let u = Tensor::randn(&[20, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let vars = put(&mut tape, &w);
    let uv = tape.constant(u.clone());
    let out = moe_ffn(&mut tape, uv, &vars, &Gating::TopK(2), None).unwrap();
    for t in 0..20 {
        let row_sum: f64 = out.affinities.row(t).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        let nonzero = out.gates.row(t).iter().filter(|g| **g != 0.0).count();
        assert_eq!(nonzero, 2);
        for e in 0..8 {
            let g = out.gates.get(t, e);
            assert!(g == 0.0 || g == out.affinities.get(t, e));
        }
    }
}

#[test]
fn affinity_matches_extended_precision() {
    let h = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.5, 0.25, -0.6]]).unwrap();
    let c = Tensor::from_rows(&[
        vec![0.9, 0.1, -0.4],
        vec![-0.3, 0.8, 0.2],
        vec![0.05, -0.7, 1.1],
        vec![0.6, 0.6, 0.6],
    ])
    .unwrap();
    // 40-digit mpmath reference.
    let want = [
        [
            0.1211841545481845810096312,
            0.05555154491982905833557074,
            0.7008622249826388801659849,
            0.1224020755493474804888132,
        ],
        [
            0.6146559086904682070512483,
            0.08444180620651107849065286,
            0.05717190538716011629502568,
            0.2437303797158605981630731,
        ],
    ];
    let a = gate_affinity(&h, &c).unwrap();
    for t in 0..2 {
        for e in 0..4 {
            assert!((a.get(t, e) - want[t][e]).abs() < 1e-12);
        }
    }
}

fn sort_oracle(row: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = row.iter().cloned().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut top: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    top.sort();
    top
}

#[test]
fn topk_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let r: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let z: f64 = r.iter().sum();
            r.into_iter().map(|v| v / z).collect()
        })
        .collect();
    let s = Tensor::from_rows(&rows).unwrap();
    let GateOutput { gates, selected, .. } = topk_gate(&s, 3).unwrap();
    for (t, row) in rows.iter().enumerate() {
        assert_eq!(selected[t], sort_oracle(row, 3));
        let nz: Vec<usize> = (0..8).filter(|&e| gates.get(t, e) != 0.0).collect();
        assert_eq!(nz, selected[t]);
    }
}

#[test]
fn singleton_groups_equal_plain_topk_in_model() {
    let mut cfg = MoEModelConfig::demo();
    cfg.seed = 12;
    let model = MoEModel::new(cfg.clone()).unwrap();
    let mut grouped = model.clone();
    let singletons: Vec<Vec<usize>> = (0..cfg.n_routed_experts).map(|e| vec![e]).collect();
    grouped
        .set_grouped_routing(&vec![singletons; cfg.n_layers], (cfg.top_k, cfg.n_routed_experts))
        .unwrap();
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    assert_eq!(
        model.forward(&tokens, None).unwrap(),
        grouped.forward(&tokens, None).unwrap()
    );
}

#[test]
fn model_forward_shapes_and_errors() {
    let cfg = MoEModelConfig::demo();
    let model = MoEModel::new(cfg.clone()).unwrap();
    let logits = model.forward(&[5], None).unwrap();
    assert_eq!(logits.shape(), &[1, cfg.vocab_size]);
    assert!(model.forward(&[cfg.vocab_size], None).is_err());
    assert!(model.forward(&vec![0; cfg.max_seq_len + 1], None).is_err());
}

#[test]
fn causal_masking() {
    let model = MoEModel::new(MoEModelConfig::demo()).unwrap();
    let a = model.forward(&[7, 1, 2, 3, 4], None).unwrap();
    let b = model.forward(&[7, 40, 30, 20, 10], None).unwrap();
    assert_eq!(a.row(0), b.row(0));
    let c = model.forward(&[7, 1, 2, 50, 60], None).unwrap();
    assert_eq!(a.row(2), c.row(2));
}

#[test]
fn parameter_count_is_closed_form_and_groups_partition() {
    for (n, ks) in [(8, 1), (16, 0), (4, 2)] {
        let cfg = MoEModelConfig {
            n_routed_experts: n,
            n_shared_experts: ks,
            ..MoEModelConfig::demo()
        };
        let model = MoEModel::new(cfg.clone()).unwrap();
        assert_eq!(model.param_count(), cfg.param_count());
        let by_group: usize = model.groups().keys().map(|g| model.group_size(g)).sum();
        assert_eq!(by_group, cfg.param_count());
        let routed: usize = model
            .groups()
            .keys()
            .filter(|g| g.kind == GroupKind::RoutedExpert)
            .map(|g| model.group_size(g))
            .sum();
        assert_eq!(routed, cfg.n_layers * cfg.routed_params_per_layer());
    }
}

#[test]
fn determinism() {
    let a = MoEModel::new(MoEModelConfig::demo()).unwrap();
    let b = MoEModel::new(MoEModelConfig::demo()).unwrap();
    assert_eq!(a, b);
    let t = [1, 2, 3];
    let (la, lb) = (a.forward(&t, None).unwrap(), b.forward(&t, None).unwrap());
    let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
}

#[test]
fn golden_loss_on_fixture() {
    // Regression anchor recorded from the first verified build.
    let mut cfg = MoEModelConfig::demo();
    cfg.seed = 2024;
    let model = MoEModel::new(cfg).unwrap();
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|s| (0..16).map(|i| (s * 7 + i * 5) % 64).collect())
        .collect();
    let loss = model.mean_loss(&seqs).unwrap();
    assert!((loss - 4.356_517_888_767_837).abs() < 1e-9, "loss {loss:.17}");
}
