use esft_core::autodiff::{grad_check, grad_check_report, Tape, Tensor, Var};
use esft_core::model::{moe_layer_forward, ExpertVars, Gating, MoEModel, MoEModelConfig, MoeLayerVars};
use esft_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts an arbitrary-shape output with fixed random weights to get a scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let w = tape.constant(r);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let rep = grad_check_report(|t, v| f(t, v).and_then(|y| project(t, y, 99)), inputs, EPS).unwrap();
    assert!(
        rep.max_rel_err < 1e-6,
        "{name}: {} at input {} coord {} (analytic {}, numeric {})",
        rep.max_rel_err,
        rep.worst_input,
        rep.worst_coord,
        rep.analytic,
        rep.numeric
    );
}

#[test]
fn primitive_gradients() {
    let mut r = rng(1);
    let m34 = || Tensor::randn(&[3, 4], 1.0, &mut rng(2));
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let sq = Tensor::randn(&[4, 4], 1.0, &mut r);
    let col = Tensor::randn(&[3, 1], 1.0, &mut r);
    let row = Tensor::randn(&[4], 1.0, &mut r);

    check("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    check("transpose", &[a.clone()], |t, v| t.transpose(v[0]));
    check("add", &[a.clone(), m34()], |t, v| t.add(v[0], v[1]));
    check("mul", &[a.clone(), m34()], |t, v| t.mul(v[0], v[1]));
    check("scale", &[a.clone()], |t, v| t.scale(v[0], -1.7));
    check("mul_const", &[a.clone()], |t, v| {
        t.mul_const(v[0], (0..12).map(|i| (i % 3) as f64).collect())
    });
    check("mul_col", &[a.clone(), col], |t, v| t.mul_col(v[0], v[1]));
    check("mul_row", &[a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
    check("add_row", &[a.clone(), row], |t, v| t.add_row(v[0], v[1]));
    check("softmax_rows", &[a.clone()], |t, v| t.softmax_rows(v[0]));
    check("causal_softmax_rows", &[sq], |t, v| t.causal_softmax_rows(v[0]));
    check("rms_norm_rows", &[a.clone()], |t, v| t.rms_norm_rows(v[0], 1e-6));
    check("silu", &[a.clone()], |t, v| t.silu(v[0]));
    check("gather_rows", &[a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2]));
    check("scatter_rows", &[a.clone()], |t, v| t.scatter_rows(v[0], &[4, 0, 2], 5));
    check("gather_column", &[a.clone()], |t, v| t.gather_column(v[0], 1, &[0, 2]));
    check("sum", &[a.clone()], |t, v| t.sum(v[0]));
    check("mean", &[a.clone()], |t, v| t.mean(v[0]));
}

#[test]
fn softmax_cross_entropy_head() {
    let mut r = rng(3);
    let h = Tensor::randn(&[5, 6], 1.0, &mut r);
    let w = Tensor::randn(&[6, 10], 0.5, &mut r);
    let err = grad_check(
        |t, v| {
            let logits = t.matmul(v[0], v[1])?;
            t.cross_entropy(logits, &[1, 9, 4, 4, 0])
        },
        &[h, w],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn moe_block_with_frozen_routing() {
    let (d, hdim, n, k) = (4, 5, 4, 2);
    let mut r = rng(4);
    let mut inputs = vec![
        Tensor::randn(&[6, d], 1.0, &mut r),
        Tensor::randn(&[n, d], 1.0, &mut r),
    ];
    for _ in 0..n + 1 {
        inputs.push(Tensor::randn(&[d, hdim], 0.5, &mut r));
        inputs.push(Tensor::randn(&[hdim, d], 0.5, &mut r));
    }
    let gating = Gating::TopK(k);

    let layer_vars = |v: &[Var]| MoeLayerVars {
        centroids: v[1],
        routed: (0..n)
            .map(|i| ExpertVars {
                w_in: v[2 + 2 * i],
                w_out: v[3 + 2 * i],
            })
            .collect(),
        shared: vec![ExpertVars {
            w_in: v[2 + 2 * n],
            w_out: v[3 + 2 * n],
        }],
    };

    // Routing decided once at the unperturbed point.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let frozen = moe_layer_forward(&mut tape, vars[0], &layer_vars(&vars), &gating, None)
        .unwrap()
        .selected;

    let err = grad_check(
        |t, v| {
            let out = moe_layer_forward(t, v[0], &layer_vars(v), &gating, Some(&frozen))?;
            project(t, out.output, 5)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn whole_model_with_frozen_routing() {
    let cfg = MoEModelConfig {
        vocab_size: 12,
        d_model: 6,
        n_routed_experts: 4,
        expert_hidden_dim: 5,
        max_seq_len: 8,
        ..MoEModelConfig::demo()
    };
    let model = MoEModel::new(cfg).unwrap();
    let seq = [3, 7, 1, 1, 10, 4];
    let input = &seq[..5];

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_, _| false).unwrap();
    let routing = model.forward_on_tape(&mut tape, &bound, input, None, None).unwrap().routing;

    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let rep = grad_check_report(
        |t, v| {
            let bound = esft_core::model::Bound::from_vars(v.to_vec());
            let out = model.forward_on_tape(t, &bound, input, None, Some(&routing))?;
            t.cross_entropy(out.logits, &seq[1..])
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(6);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.get(i, p) * b.get(p, j);
            }
            assert!((tape.value(c).get(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_matches_extended_precision() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    // 40-digit mpmath reference.
    let want = [
        0.0900305731703804579980221,
        0.2447284710547976524729596,
        0.6652409557748218895290183,
    ];
    for (got, want) in tape.value(y).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-12);
    }
    let s: f64 = tape.value(y).data().iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn gradients_are_bit_reproducible() {
    let run = || {
        let model = MoEModel::new(MoEModelConfig::demo()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_, _| true).unwrap();
        let loss = model
            .sequence_loss_on_tape(&mut tape, &bound, &[1, 2, 3, 4, 5, 6])
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        bound
            .vars
            .iter()
            .flat_map(|v| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_default())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
