use esft_core::model::{attach_lora, GroupKind, MoEModel, MoEModelConfig};
use esft_core::select::{build_train_mask, ExpertSelection, RoutedPolicy, ScoreKind, TrainMask};
use esft_core::train::{evaluate_forgetting, train, EvalSets, Method, TrainConfig, TrainData};
use esft_core::workbench::{Generator, TaskSpec};
use esft_core::Error;

fn small() -> MoEModelConfig {
    MoEModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_routed_experts: 8,
        expert_hidden_dim: 8,
        max_seq_len: 12,
        seed: 5,
        ..MoEModelConfig::demo()
    }
}

fn sequences(seed: u64) -> Vec<Vec<usize>> {
    let spec = TaskSpec {
        name: "copy".into(),
        generator: Generator::Copy { lo: 0, hi: 16, pattern_len: 3 },
        doc_length: (26, 26),
        documents: 20,
        seed,
    };
    spec.generate(16).unwrap().windows(13)
}

fn config(method: Method, steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        seq_len: 13,
        max_steps: steps,
        eval_every: steps,
        ..TrainConfig::new(method)
    }
}

fn eval(seqs: &[Vec<usize>]) -> EvalSets {
    EvalSets {
        task: seqs[..4].to_vec(),
        general: seqs[4..8].to_vec(),
        ..EvalSets::default()
    }
}

fn bits(model: &MoEModel, id: usize) -> Vec<u64> {
    model.param(id).value.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn empty_mask_changes_nothing() {
    let seqs = sequences(1);
    let mut model = MoEModel::new(small()).unwrap();
    let before = model.clone();
    let mask = build_train_mask(&model, None, RoutedPolicy::None, false, false).unwrap();
    let r = train(&mut model, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &eval(&seqs), &config(Method::Fft, 10)).unwrap();
    assert_eq!(model, before);
    assert_eq!(r.records[0].task_loss, r.last().task_loss);
    assert_eq!(r.last().kl_from_start, Some(0.0));
}

#[test]
fn full_training_lowers_task_loss() {
    let seqs = sequences(2);
    let mut model = MoEModel::new(small()).unwrap();
    let mask = build_train_mask(&model, None, RoutedPolicy::All, true, true).unwrap();
    let mut cfg = config(Method::Fft, 50);
    cfg.eval_every = 10;
    let r = train(&mut model, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &eval(&seqs), &cfg).unwrap();
    assert_eq!(r.records.len(), 6);
    assert!(r.last().task_loss.unwrap() < r.records[0].task_loss.unwrap());
    assert!(r.records.iter().all(|x| x.kl_from_start.unwrap() >= 0.0));
}

#[test]
fn expert_mask_freezes_everything_else() {
    let seqs = sequences(3);
    let mut model = MoEModel::new(small()).unwrap();
    let before = model.clone();
    // Experts that actually receive tokens, so their gradients are nonzero.
    let inputs: Vec<Vec<usize>> = seqs.iter().map(|s| s[..12].to_vec()).collect();
    let log = esft_core::routing::collect_routing_windows(&model, "t", &inputs).unwrap();
    let layers: Vec<Vec<usize>> = (0..2)
        .map(|l| {
            let mut top = esft_core::routing::top_experts(&log, l, 2, Default::default());
            top.sort();
            top
        })
        .collect();
    let sel = ExpertSelection {
        p: 0.2,
        score_kind: ScoreKind::TokenSelectionRatio,
        n_experts: 8,
        achieved_mass: vec![0.0; 2],
        layers: layers.clone(),
    };
    let mask = build_train_mask(&model, Some(&sel), RoutedPolicy::Selected, false, false).unwrap();
    let r = train(&mut model, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &eval(&seqs), &config(Method::EsftToken, 20)).unwrap();

    let groups = model.groups();
    let trainable: Vec<usize> = mask.groups.iter().flat_map(|g| groups[g].clone()).collect();
    assert_eq!(r.optimizer_state, trainable);
    for (g, ids) in groups {
        let changed = ids.iter().any(|&id| bits(&model, id) != bits(&before, id));
        if mask.contains(&g) {
            assert!(changed, "{g} should have changed");
            assert_eq!(g.kind, GroupKind::RoutedExpert);
            assert!(layers[g.layer.unwrap()].contains(&g.expert.unwrap()));
        } else {
            assert!(!changed, "{g} should be frozen");
        }
    }
}

#[test]
fn reruns_are_identical() {
    let seqs = sequences(4);
    let run = || {
        let mut model = MoEModel::new(small()).unwrap();
        let mask = build_train_mask(&model, None, RoutedPolicy::All, true, true).unwrap();
        let r = train(&mut model, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &eval(&seqs), &config(Method::Fft, 8)).unwrap();
        (model, r.records)
    };
    assert_eq!(run(), run());
}

#[test]
fn lora_trains_only_adapters() {
    let seqs = sequences(5);
    let base = MoEModel::new(small()).unwrap();
    let mut model = base.clone();
    attach_lora(&mut model, 2, 2.0, 0).unwrap();
    let tokens = &seqs[0][..12];
    assert_eq!(model.forward(tokens, None).unwrap(), base.forward(tokens, None).unwrap());
    let mask = TrainMask::lora(&model).unwrap();
    let before = model.clone();
    train(&mut model, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &eval(&seqs), &config(Method::Lora, 5)).unwrap();
    for (g, ids) in model.groups() {
        let changed = ids.iter().any(|&id| bits(&model, id) != bits(&before, id));
        if !g.kind.is_lora() {
            assert!(!changed, "{g}");
        }
    }
    assert_ne!(model.forward(tokens, None).unwrap(), base.forward(tokens, None).unwrap());
}

#[test]
fn divergence_aborts_with_step() {
    let seqs = sequences(6);
    let mut model = MoEModel::new(small()).unwrap();
    let mask = build_train_mask(&model, None, RoutedPolicy::All, true, true).unwrap();
    let mut cfg = config(Method::Fft, 20);
    cfg.learning_rate = 1e300;
    let err = train(&mut model, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &EvalSets::default(), &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn forgetting_contract() {
    let seqs = sequences(7);
    let a = MoEModel::new(small()).unwrap();
    let f = evaluate_forgetting(&a, &a, &seqs).unwrap();
    assert_eq!(f.mean_kl, 0.0);
    assert_eq!(f.delta_loss, 0.0);
    let b = MoEModel::new(MoEModelConfig { seed: 6, ..small() }).unwrap();
    assert!(evaluate_forgetting(&a, &b, &seqs).is_err());
    let mut c = a.clone();
    let mask = build_train_mask(&c, None, RoutedPolicy::All, true, true).unwrap();
    train(&mut c, &mask, &TrainData::task_only(seqs.clone()).unwrap(), &EvalSets::default(), &config(Method::Fft, 3)).unwrap();
    assert!(evaluate_forgetting(&a, &c, &seqs).unwrap().mean_kl > 0.0);
}

#[test]
fn rejects_bad_inputs() {
    let seqs = sequences(8);
    let mut model = MoEModel::new(small()).unwrap();
    let mask = build_train_mask(&model, None, RoutedPolicy::All, true, true).unwrap();
    let long = vec![vec![1; 30]];
    assert!(train(&mut model, &mask, &TrainData::task_only(long).unwrap(), &EvalSets::default(), &config(Method::Fft, 1)).is_err());
    let mut cfg = config(Method::EsftGate, 1);
    cfg.p = Some(0.0);
    assert!(train(&mut model, &mask, &TrainData::task_only(seqs).unwrap(), &EvalSets::default(), &cfg).is_err());
    let other = MoEModel::new(MoEModelConfig { n_layers: 3, ..small() }).unwrap();
    let foreign = build_train_mask(&other, None, RoutedPolicy::All, true, true).unwrap();
    let seqs = sequences(8);
    assert!(train(&mut model, &foreign, &TrainData::task_only(seqs).unwrap(), &EvalSets::default(), &config(Method::Fft, 1)).is_err());
}
