//! Masked fine-tuning loops, data sampling and forgetting evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::Corpus;
use crate::error::{config_err, input_err, Error, Result};
use crate::model::{attach_lora, MoEModel, ParamId};
use crate::routing::collect_routing;
use crate::select::{build_train_mask, select_experts, ExpertRelevance, ExpertSelection, RoutedPolicy, ScoreKind, TrainMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fft,
    Lora,
    EsftToken,
    EsftGate,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fft, Method::Lora, Method::EsftToken, Method::EsftGate];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::Lora => "lora",
            Method::EsftToken => "esft_token",
            Method::EsftGate => "esft_gate",
        }
    }

    pub fn score_kind(self) -> Option<ScoreKind> {
        match self {
            Method::EsftToken => Some(ScoreKind::TokenSelectionRatio),
            Method::EsftGate => Some(ScoreKind::AverageGate),
            _ => None,
        }
    }

    /// Threshold used when none is configured.
    pub fn default_p(self) -> f64 {
        match self {
            Method::EsftToken => 0.2,
            _ => 0.1,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown method `{s}` (expected fft, lora, esft_token or esft_gate)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Tokens per training sequence, including the final target.
    pub seq_len: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Expert-selection threshold; the method's default when absent.
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_lora_scaling")]
    pub lora_scaling: f64,
    #[serde(default)]
    pub mix_alignment: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_lora_rank() -> usize {
    8
}

fn default_lora_scaling() -> f64 {
    2.0
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            learning_rate: 1e-3,
            batch_size: 8,
            seq_len: 33,
            max_steps: 200,
            eval_every: 50,
            p: None,
            lora_rank: default_lora_rank(),
            lora_scaling: default_lora_scaling(),
            mix_alignment: false,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.p.unwrap_or(self.method.default_p())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(config_err!("batch_size, max_steps and eval_every must be positive"));
        }
        if self.seq_len < 2 {
            return Err(config_err!("seq_len must be at least 2"));
        }
        if self.method.score_kind().is_some() {
            let p = self.threshold();
            if !(p > 0.0 && p <= 1.0) {
                return Err(config_err!("threshold p = {p} must lie in (0, 1]"));
            }
        }
        if self.method == Method::Lora && !(self.lora_rank >= 1 && self.lora_scaling.is_finite()) {
            return Err(config_err!("LoRA needs rank >= 1 and a finite scaling"));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer settings. Constant learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are allocated only for the parameters it is given.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig, params: impl IntoIterator<Item = (ParamId, usize)>) -> Self {
        let state = params
            .into_iter()
            .map(|(id, n)| {
                (
                    id,
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Adam { cfg, lr, t: 0, state }
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Applies one update. Parameters without state are left untouched.
    pub fn step(&mut self, model: &mut MoEModel, grads: &BTreeMap<ParamId, Tensor>) {
        self.t += 1;
        let AdamConfig { beta1: b1, beta2: b2, eps } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (&id, mom) in self.state.iter_mut() {
            let value = model.param_value_mut(id).data_mut();
            let g = grads.get(&id).map(Tensor::data);
            for i in 0..value.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * gi * gi;
                let mh = mom.m[i] / c1;
                let vh = mom.v[i] / c2;
                value[i] -= self.lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Fixed-length training sequences: shuffled documents concatenated and cut
/// into exactly `n_samples` windows of `seq_len` tokens.
pub fn sample_selection_subset(corpus: &Corpus, n_samples: usize, seq_len: usize, seed: u64) -> Result<Corpus> {
    if n_samples == 0 || seq_len == 0 {
        return Err(config_err!("n_samples and seq_len must be positive"));
    }
    let need = n_samples * seq_len;
    let have = corpus.token_count();
    if have < need {
        return Err(input_err!(
            "corpus `{}` has {have} tokens, {need} needed for {n_samples}×{seq_len} (short by {})",
            corpus.task_label,
            need - have
        ));
    }
    let mut docs: Vec<&Vec<u32>> = corpus.documents().iter().collect();
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let all: Vec<u32> = docs.into_iter().flatten().copied().take(need).collect();
    let samples = all.chunks_exact(seq_len).map(<[u32]>::to_vec).collect();
    Corpus::new(corpus.task_label.clone(), corpus.vocab_size, samples)
}

/// Source of one training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Task,
    Alignment,
}

/// Deterministic interleaving: each window of `task + alignment` steps
/// holds `task` task batches followed by `alignment` alignment batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub ratio: (usize, usize),
}

impl MixSchedule {
    pub fn source(&self, step: usize) -> Source {
        let (t, a) = self.ratio;
        if step % (t + a) < t {
            Source::Task
        } else {
            Source::Alignment
        }
    }

    pub fn sources(&self, steps: usize) -> Vec<Source> {
        (0..steps).map(|s| self.source(s)).collect()
    }
}

pub fn mix_datasets(task: &[Vec<usize>], alignment: &[Vec<usize>], ratio: (usize, usize)) -> Result<MixSchedule> {
    if ratio.0 + ratio.1 == 0 {
        return Err(config_err!("mixing ratio cannot be 0:0"));
    }
    if ratio.0 > 0 && task.is_empty() {
        return Err(input_err!("task data is empty but the ratio asks for task batches"));
    }
    if ratio.1 > 0 && alignment.is_empty() {
        return Err(input_err!("alignment data is empty but the ratio asks for alignment batches"));
    }
    Ok(MixSchedule { ratio })
}

/// Training sequences per source and the schedule choosing between them.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub task: Vec<Vec<usize>>,
    pub alignment: Vec<Vec<usize>>,
    pub schedule: MixSchedule,
}

impl TrainData {
    pub fn new(task: Vec<Vec<usize>>, alignment: Vec<Vec<usize>>, ratio: (usize, usize)) -> Result<Self> {
        let schedule = mix_datasets(&task, &alignment, ratio)?;
        Ok(TrainData {
            task,
            alignment,
            schedule,
        })
    }

    pub fn task_only(task: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(task, Vec::new(), (1, 0))
    }

    fn pool(&self, s: Source) -> &[Vec<usize>] {
        match s {
            Source::Task => &self.task,
            Source::Alignment => &self.alignment,
        }
    }
}

/// Held-out sequences used at every evaluation step.
#[derive(Clone, Debug, Default)]
pub struct EvalSets {
    pub task: Vec<Vec<usize>>,
    pub alignment: Vec<Vec<usize>>,
    /// General probe for the loss and the divergence from the starting model.
    pub general: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous record; absent at step 0.
    pub train_loss: Option<f64>,
    pub task_loss: Option<f64>,
    pub alignment_loss: Option<f64>,
    pub general_loss: Option<f64>,
    pub kl_from_start: Option<f64>,
}

/// Evaluation records of one run. Wall-clock timings are kept beside the
/// records so that reruns compare equal on `records`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub trainable_param_count: usize,
    pub records: Vec<EvalRecord>,
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
    /// Parameters that ended the run with optimizer state.
    #[serde(skip)]
    pub optimizer_state: Vec<ParamId>,
}

impl TrainReport {
    pub fn last(&self) -> &EvalRecord {
        self.records.last().expect("at least one eval record")
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("train report", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Mean KL of next-token distributions per probe token, plus loss before/after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub mean_kl: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub delta_loss: f64,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

fn input_probs(model: &MoEModel, probe: &[Vec<usize>]) -> Result<Vec<Vec<Vec<f64>>>> {
    probe
        .iter()
        .map(|s| model.next_token_probs(&s[..s.len() - 1]))
        .collect()
}

fn mean_kl(reference: &[Vec<Vec<f64>>], model: &MoEModel, probe: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, p) in probe.iter().zip(reference) {
        let q = model.next_token_probs(&s[..s.len() - 1])?;
        for (a, b) in p.iter().zip(&q) {
            total += kl(a, b);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

fn check_probe(probe: &[Vec<usize>]) -> Result<()> {
    if probe.is_empty() || probe.iter().any(|s| s.len() < 2) {
        return Err(input_err!("probe needs sequences of at least two tokens"));
    }
    Ok(())
}

/// Divergence of `after` from `before` on the probe sequences.
pub fn evaluate_forgetting(before: &MoEModel, after: &MoEModel, probe: &[Vec<usize>]) -> Result<Forgetting> {
    if before.config() != after.config() {
        return Err(input_err!("models have different configurations"));
    }
    check_probe(probe)?;
    let reference = input_probs(before, probe)?;
    let mean_kl = mean_kl(&reference, after, probe)?;
    let loss_before = before.mean_loss(probe)?;
    let loss_after = after.mean_loss(probe)?;
    Ok(Forgetting {
        mean_kl,
        loss_before,
        loss_after,
        delta_loss: loss_after - loss_before,
    })
}

fn optional_loss(model: &MoEModel, seqs: &[Vec<usize>]) -> Result<Option<f64>> {
    if seqs.is_empty() {
        Ok(None)
    } else {
        model.mean_loss(seqs).map(Some)
    }
}

/// Trains the groups in `mask` and leaves every other parameter untouched.
///
/// Gradients flow through frozen parameters; only the update is masked.
pub fn train(
    model: &mut MoEModel,
    mask: &TrainMask,
    data: &TrainData,
    eval: &EvalSets,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    for s in data.task.iter().chain(&data.alignment) {
        if s.len() < 2 {
            return Err(input_err!("training sequences need at least two tokens"));
        }
        model.check_tokens(&s[..s.len() - 1])?;
    }
    let groups = model.groups();
    for g in &mask.groups {
        if !groups.contains_key(g) {
            return Err(config_err!("mask names group {g}, which this model does not have"));
        }
    }
    let trainable: Vec<ParamId> = mask.groups.iter().flat_map(|g| groups[g].iter().copied()).collect();
    let mut adam = Adam::new(
        cfg.learning_rate,
        cfg.adam,
        trainable.iter().map(|&id| (id, model.param(id).value.len())),
    );

    let reference = if eval.general.is_empty() {
        None
    } else {
        check_probe(&eval.general)?;
        Some(input_probs(model, &eval.general)?)
    };
    let evaluate = |model: &MoEModel, step: usize, train_loss: Option<f64>| -> Result<EvalRecord> {
        Ok(EvalRecord {
            step,
            train_loss,
            task_loss: optional_loss(model, &eval.task)?,
            alignment_loss: optional_loss(model, &eval.alignment)?,
            general_loss: optional_loss(model, &eval.general)?,
            kl_from_start: match &reference {
                Some(r) => Some(mean_kl(r, model, &eval.general)?),
                None => None,
            },
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = vec![evaluate(model, 0, None)?];
    let mut step_seconds = Vec::with_capacity(cfg.max_steps);
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let mut is_trainable = vec![false; model.params().len()];
    trainable.iter().for_each(|&id| is_trainable[id] = true);

    for step in 0..cfg.max_steps {
        let start = Instant::now();
        let pool = data.pool(data.schedule.source(step));
        let batch: Vec<&Vec<usize>> = (0..cfg.batch_size).map(|_| &pool[rng.random_range(0..pool.len())]).collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |id, _| is_trainable[id])?;
        let step_err = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            e => e,
        };
        let mut total = None;
        for seq in &batch {
            let l = model.sequence_loss_on_tape(&mut tape, &bound, seq).map_err(step_err)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).map_err(step_err)?,
            });
        }
        let loss = tape.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64).map_err(step_err)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = tape.backward(loss).map_err(step_err)?;
        let grads: BTreeMap<ParamId, Tensor> = trainable
            .iter()
            .filter_map(|&id| grads.take(bound.vars[id]).map(|g| (id, g)))
            .collect();
        adam.step(model, &grads);
        if model.params().iter().any(|p| !p.value.all_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        step_seconds.push(start.elapsed().as_secs_f64());

        window_loss += loss_value;
        window_steps += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.max_steps {
            records.push(evaluate(model, done, Some(window_loss / window_steps as f64))?);
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    Ok(TrainReport {
        method: cfg.method,
        trainable_param_count: mask.trainable_param_count,
        records,
        step_seconds,
        optimizer_state: (0..model.params().len()).filter(|&id| adam.has_state(id)).collect(),
    })
}

/// Everything a method needs before training starts.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: MoEModel,
    pub mask: TrainMask,
    pub relevance: Option<ExpertRelevance>,
    pub selection: Option<ExpertSelection>,
}

/// Copy of `vanilla` prepared for `cfg.method`, with its mask. ESFT methods
/// need `selection`; LoRA attaches fresh adapters.
pub fn setup_method(
    vanilla: &MoEModel,
    cfg: &TrainConfig,
    selection: Option<&ExpertSelection>,
) -> Result<(MoEModel, TrainMask)> {
    cfg.validate()?;
    let mut model = vanilla.clone();
    let mask = match cfg.method {
        Method::Fft => build_train_mask(&model, None, RoutedPolicy::All, true, true)?,
        Method::Lora => {
            attach_lora(&mut model, cfg.lora_rank, cfg.lora_scaling, cfg.seed)?;
            TrainMask::lora(&model)?
        }
        Method::EsftToken | Method::EsftGate => {
            let sel = selection.ok_or_else(|| config_err!("{} needs an expert selection", cfg.method.name()))?;
            build_train_mask(&model, Some(sel), RoutedPolicy::Selected, false, false)?
        }
    };
    Ok((model, mask))
}

/// Like [`setup_method`], scoring experts on routing over `selection_samples` for ESFT methods.
pub fn prepare_method(vanilla: &MoEModel, selection_samples: &Corpus, cfg: &TrainConfig) -> Result<Prepared> {
    let (relevance, selection) = match cfg.method.score_kind() {
        Some(kind) => {
            let log = collect_routing(vanilla, selection_samples, false)?;
            let relevance = ExpertRelevance::compute(kind, &log)?;
            let selection = select_experts(&relevance, cfg.threshold())?;
            (Some(relevance), Some(selection))
        }
        None => (None, None),
    };
    let (model, mask) = setup_method(vanilla, cfg, selection.as_ref())?;
    Ok(Prepared {
        model,
        mask,
        relevance,
        selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let t = vec![vec![1, 2]];
        let s = mix_datasets(&t, &[], (1, 0)).unwrap();
        assert!(s.sources(5).iter().all(|&x| x == Source::Task));
        let s = mix_datasets(&t, &t, (1, 1)).unwrap();
        use Source::*;
        assert_eq!(s.sources(4), vec![Task, Alignment, Task, Alignment]);
        let s = mix_datasets(&t, &t, (2, 1)).unwrap();
        assert_eq!(s.sources(6), vec![Task, Task, Alignment, Task, Task, Alignment]);
        assert!(mix_datasets(&t, &[], (1, 1)).is_err());
        assert!(mix_datasets(&t, &t, (0, 0)).is_err());
    }

    #[test]
    fn subset_sizes() {
        let c = Corpus::new("t", 10, vec![vec![1; 5], vec![2; 7]]).unwrap();
        let s = sample_selection_subset(&c, 3, 4, 0).unwrap();
        assert_eq!(s.documents().len(), 3);
        assert_eq!(s.token_count(), 12);
        assert_eq!(s, sample_selection_subset(&c, 3, 4, 0).unwrap());
        let err = sample_selection_subset(&c, 4, 4, 0).unwrap_err().to_string();
        assert!(err.contains("short by 4"), "{err}");
    }

    #[test]
    fn paper_scale_subset_accepted() {
        let c = Corpus::new("t", 4, vec![vec![3; 1 << 17]]).unwrap();
        let s = sample_selection_subset(&c, 32, 4096, 1).unwrap();
        assert_eq!(s.documents().len(), 32);
        assert!(s.documents().iter().all(|d| d.len() == 4096));
    }

    #[test]
    fn kl_is_zero_on_identical_rows() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl(&p, &p), 0.0);
        assert!(kl(&p, &[0.3, 0.3, 0.4]) > 0.0);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("sft".parse::<Method>().is_err());
    }
}
