use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::export::{self, SweepPoint};
use super::tasks::TaskSpec;
use crate::corpus::Corpus;
use crate::error::{config_err, input_err, Error, Result};
use crate::model::{checkpoint, MoEModel, MoEModelConfig};
use crate::routing::{
    collect_routing, cooccurrence_similarity, greedy_group, normalized_gate_distribution, overlap_vs_samplesize,
    shared_topk_overlap, GateDistribution, OverlapPoint, RankingPolicy, RoutingLog, SampleMode,
};
use crate::select::{
    build_train_mask, experts_trained_report, select_experts, ExpertRelevance, ExpertSelection, RoutedPolicy,
    ScoreKind, TrainMask,
};
use crate::train::{
    evaluate_forgetting, sample_selection_subset, setup_method, train, AdamConfig, EvalSets, Method, TrainConfig,
    TrainData,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Model configuration given inline or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(MoEModelConfig),
}

impl ModelSource {
    pub fn resolve(&self) -> Result<MoEModelConfig> {
        match self {
            ModelSource::Inline(c) => Ok(c.clone()),
            ModelSource::Path(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let c: MoEModelConfig = serde_json::from_str(&s)?;
                c.validate()?;
                Ok(c)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Number of fixed-length samples used to score experts.
    pub n_samples: usize,
    /// Tokens per sample; at most the model's max_seq_len.
    pub sample_len: usize,
    pub p_token: f64,
    pub p_gate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_scaling")]
    pub lora_scaling: f64,
    /// Interleave general data with the task data at `alignment_ratio`.
    #[serde(default)]
    pub mix_alignment: bool,
    #[serde(default = "default_ratio")]
    pub alignment_ratio: (usize, usize),
    /// Held-out sequences per task used at every evaluation.
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
    /// Also train each ESFT method on random experts of the same per-layer
    /// counts, as a control for the selection.
    #[serde(default)]
    pub random_control: bool,
}

fn default_rank() -> usize {
    8
}
fn default_scaling() -> f64 {
    2.0
}
fn default_ratio() -> (usize, usize) {
    (1, 1)
}
fn default_eval_sequences() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub overlap_top_k: usize,
    /// Token budgets for the overlap-vs-sample-size curve; empty skips it.
    #[serde(default)]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_overlap_seeds")]
    pub overlap_seeds: usize,
    /// Expert group size for the similarity grouping; absent skips it.
    #[serde(default)]
    pub group_size: Option<usize>,
}

fn default_overlap_seeds() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ps: Vec<f64>,
    /// Also fine-tune at every threshold (first seed only).
    #[serde(default)]
    pub train: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub pretrain: bool,
    pub probe: bool,
    pub select: bool,
    pub train: bool,
    pub export: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            pretrain: true,
            probe: true,
            select: true,
            train: true,
            export: true,
        }
    }
}

impl Stages {
    pub fn only(stage: &str) -> Result<Self> {
        let mut s = Stages {
            pretrain: false,
            probe: false,
            select: false,
            train: false,
            export: false,
        };
        match stage {
            "pretrain" => s.pretrain = true,
            "probe" => s.probe = true,
            "select" => s.select = true,
            "train" => s.train = true,
            "export" => s.export = true,
            _ => return Err(config_err!("unknown stage `{stage}`")),
        }
        Ok(s)
    }
}

/// Full description of one experiment. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub model: ModelSource,
    /// Tasks mixed for pretraining; their held-out halves form the general probe.
    pub general_tasks: Vec<TaskSpec>,
    /// Tasks fine-tuned after pretraining.
    pub target_tasks: Vec<TaskSpec>,
    /// Start from this vanilla model instead of `<output_dir>/model/vanilla.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub selection: SelectionConfig,
    pub methods: Vec<Method>,
    pub train: FineTuneConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stages: Stages,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
}

impl ExperimentManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: ExperimentManifest = serde_json::from_str(s)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(config_err!("unsupported manifest schema_version {}", m.schema_version));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<MoEModelConfig> {
        let cfg = self.model.resolve()?;
        cfg.validate()?;
        if self.general_tasks.is_empty() {
            return Err(config_err!("manifest needs at least one general task"));
        }
        let mut names = std::collections::BTreeSet::new();
        for t in self.general_tasks.iter().chain(&self.target_tasks) {
            t.validate(cfg.vocab_size)?;
            if !names.insert(t.name.as_str()) {
                return Err(config_err!("task name `{}` used twice", t.name));
            }
            if t.name.is_empty() || t.name.contains(['/', '\\']) || t.name.starts_with('.') {
                return Err(config_err!("task name `{}` is not a valid directory name", t.name));
            }
        }
        if self.selection.sample_len == 0 || self.selection.sample_len > cfg.max_seq_len {
            return Err(config_err!("selection.sample_len must be in 1..={}", cfg.max_seq_len));
        }
        for p in [self.selection.p_token, self.selection.p_gate].into_iter().chain(self.sweep.ps.iter().copied()) {
            if !(p > 0.0 && p <= 1.0) {
                return Err(config_err!("threshold p = {p} must lie in (0, 1]"));
            }
        }
        if self.seeds.is_empty() && self.stages.train {
            return Err(config_err!("the train stage needs at least one seed"));
        }
        if self.probe.overlap_top_k == 0 {
            return Err(config_err!("probe.overlap_top_k must be positive"));
        }
        if let Some(path) = &self.checkpoint {
            if !path.exists() {
                return Err(config_err!("checkpoint {} does not exist", path.display()));
            }
        }
        self.fine_tune_config(Method::Fft, 0, Self::seq_len(&cfg)).validate()?;
        Ok(cfg)
    }

    /// Training sequences hold `max_seq_len` inputs plus one target.
    fn seq_len(cfg: &MoEModelConfig) -> usize {
        cfg.max_seq_len + 1
    }

    pub fn fine_tune_config(&self, method: Method, seed: u64, seq_len: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seq_len,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            p: match method {
                Method::EsftToken => Some(self.selection.p_token),
                Method::EsftGate => Some(self.selection.p_gate),
                _ => None,
            },
            lora_rank: t.lora_rank,
            lora_scaling: t.lora_scaling,
            mix_alignment: t.mix_alignment,
            seed,
            adam: AdamConfig::default(),
        }
    }
}

/// Output locations under the experiment directory.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn vanilla(&self) -> PathBuf {
        self.root.join("model").join("vanilla.ckpt")
    }
    pub fn probe(&self) -> PathBuf {
        self.root.join("probe")
    }
    pub fn select(&self, task: &str) -> PathBuf {
        self.root.join("select").join(task)
    }
    pub fn train(&self, task: &str) -> PathBuf {
        self.root.join("train").join(task)
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
}

pub(crate) fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &str) -> Result<T> {
    let s = std::fs::read_to_string(path)
        .map_err(|_| input_err!("missing {}; run the `{stage}` stage first", path.display()))?;
    Ok(serde_json::from_str(&s)?)
}

/// Generated corpora split into training and held-out halves.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub corpus: Corpus,
    pub train: Corpus,
    pub held_out: Corpus,
}

fn task_data(specs: &[TaskSpec], vocab: usize) -> Result<Vec<TaskData>> {
    specs
        .iter()
        .map(|s| {
            let corpus = s.generate(vocab)?;
            if corpus.documents().len() < 2 {
                return Err(config_err!("task `{}` needs at least two documents to split", s.name));
            }
            let (train, held_out) = corpus.split_half()?;
            Ok(TaskData {
                corpus,
                train,
                held_out,
            })
        })
        .collect()
}

fn eval_windows(c: &Corpus, len: usize, n: usize) -> Vec<Vec<usize>> {
    c.windows(len).into_iter().take(n).collect()
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub schema_version: u32,
    pub top_k: usize,
    pub tasks: Vec<String>,
    /// `distributions[task][layer]`.
    pub distributions: Vec<Vec<GateDistribution>>,
    /// Mean top-k overlap between full-corpus logs, `overlap[a][b]`.
    pub overlap: Vec<Vec<f64>>,
    /// Overlap between the two halves of each task.
    pub split_half_overlap: Vec<f64>,
    /// Overlap vs sample size per target task, averaged over seeds.
    pub overlap_curves: BTreeMap<String, Vec<OverlapPoint>>,
    /// Per-layer greedy expert grouping from the first general task's co-occurrence.
    pub grouping: Option<Vec<Vec<Vec<usize>>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectSummary {
    pub schema_version: u32,
    pub task: String,
    pub n_experts: usize,
    pub routed_params_per_layer: usize,
    pub selections: Vec<SelectionRecord>,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub score_kind: ScoreKind,
    pub p: f64,
    pub counts: Vec<usize>,
    pub trainable_param_count: usize,
}

/// One fine-tuning run in the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    /// Trained on a random replacement of the selected experts.
    #[serde(default)]
    pub random_selection: bool,
    pub trainable_param_count: usize,
    pub vanilla_task_loss: f64,
    pub task_loss: f64,
    pub general_loss_before: f64,
    pub general_loss_after: f64,
    pub forgetting_kl: f64,
}

fn relevance_file(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::TokenSelectionRatio => "relevance_token.json",
        ScoreKind::AverageGate => "relevance_gate.json",
    }
}

fn selection_file(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::TokenSelectionRatio => "selection_token.json",
        ScoreKind::AverageGate => "selection_gate.json",
    }
}

fn save_log(log: &RoutingLog, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    log.write_jsonl(std::io::BufWriter::new(f))
}

/// Runs the enabled stages in order. Each stage reads its inputs from the
/// output directory, so stages can be rerun separately.
pub fn run_experiment(m: &ExperimentManifest) -> Result<OutputLayout> {
    let cfg = stage("validate", m.validate())?;
    let out = OutputLayout::new(&m.output_dir);
    stage("validate", mkdir(&out.root))?;
    stage("validate", write_json(&out.root.join("manifest.json"), m))?;
    let general = stage("generate", task_data(&m.general_tasks, cfg.vocab_size))?;
    let targets = stage("generate", task_data(&m.target_tasks, cfg.vocab_size))?;

    if m.stages.pretrain {
        stage("pretrain", run_pretrain(m, &cfg, &general, &targets, &out))?;
    }
    let needs_model = m.stages.probe || m.stages.select || m.stages.train;
    let vanilla = if needs_model {
        Some(stage("load", load_vanilla(m, &out, &cfg))?)
    } else {
        None
    };
    if m.stages.probe {
        stage("probe", run_probe(m, vanilla.as_ref().expect("loaded"), &general, &targets, &out))?;
    }
    if m.stages.select {
        stage("select", run_select(m, vanilla.as_ref().expect("loaded"), &targets, &out))?;
    }
    if m.stages.train {
        stage("train", run_train(m, vanilla.as_ref().expect("loaded"), &general, &targets, &out))?;
    }
    if m.stages.export {
        stage("export", export::export_all(m, &out))?;
    }
    Ok(out)
}

fn load_vanilla(m: &ExperimentManifest, out: &OutputLayout, cfg: &MoEModelConfig) -> Result<MoEModel> {
    let path = m.checkpoint.clone().unwrap_or_else(|| out.vanilla());
    if !path.exists() {
        return Err(input_err!(
            "no vanilla model at {}; run the `pretrain` stage or set `checkpoint`",
            path.display()
        ));
    }
    let model = checkpoint::load(&path)?;
    if model.config() != cfg {
        return Err(config_err!("checkpoint {} was built with a different model config", path.display()));
    }
    Ok(model)
}

/// Multitask pretraining of the vanilla model on the general tasks.
pub fn pretrain(
    cfg: &MoEModelConfig,
    general_train: &[Corpus],
    general_eval: &[Vec<usize>],
    p: &PretrainConfig,
) -> Result<(MoEModel, crate::train::TrainReport)> {
    let mut model = MoEModel::new(cfg.clone())?;
    let seq_len = ExperimentManifest::seq_len(cfg);
    let pool: Vec<Vec<usize>> = general_train.iter().flat_map(|c| c.windows(seq_len)).collect();
    if pool.is_empty() {
        return Err(input_err!("general tasks hold no full {seq_len}-token window"));
    }
    let mask = build_train_mask(&model, None, RoutedPolicy::All, true, true)?;
    let tc = TrainConfig {
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        seq_len,
        max_steps: p.steps,
        eval_every: p.eval_every,
        seed: p.seed,
        ..TrainConfig::new(Method::Fft)
    };
    let eval = EvalSets {
        task: general_eval.to_vec(),
        ..EvalSets::default()
    };
    let report = train(&mut model, &mask, &TrainData::task_only(pool)?, &eval, &tc)?;
    Ok((model, report))
}

fn general_probe(m: &ExperimentManifest, cfg: &MoEModelConfig, general: &[TaskData]) -> Vec<Vec<usize>> {
    let len = ExperimentManifest::seq_len(cfg);
    general
        .iter()
        .flat_map(|t| eval_windows(&t.held_out, len, m.train.eval_sequences))
        .collect()
}

fn run_pretrain(
    m: &ExperimentManifest,
    cfg: &MoEModelConfig,
    general: &[TaskData],
    targets: &[TaskData],
    out: &OutputLayout,
) -> Result<()> {
    mkdir(&out.data())?;
    for t in general.iter().chain(targets) {
        t.corpus.save(out.data().join(format!("{}.jsonl", t.corpus.task_label)))?;
    }
    let train_sets: Vec<Corpus> = general.iter().map(|t| t.train.clone()).collect();
    let (model, report) = pretrain(cfg, &train_sets, &general_probe(m, cfg, general), &m.pretrain)?;
    mkdir(out.vanilla().parent().expect("has parent"))?;
    checkpoint::save(&model, out.vanilla())?;
    report.save(out.root.join("model").join("pretrain_report.jsonl"))?;
    Ok(())
}

fn run_probe(
    m: &ExperimentManifest,
    model: &MoEModel,
    general: &[TaskData],
    targets: &[TaskData],
    out: &OutputLayout,
) -> Result<()> {
    let dir = out.probe();
    mkdir(&dir.join("routing"))?;
    let all: Vec<&TaskData> = general.iter().chain(targets).collect();
    let k = m.probe.overlap_top_k;
    let mut logs = Vec::new();
    let mut distributions = Vec::new();
    let mut split_half = Vec::new();
    for t in &all {
        let log = collect_routing(model, &t.corpus, false)?;
        save_log(&log, &dir.join("routing").join(format!("{}.jsonl", t.corpus.task_label)))?;
        distributions.push(
            (0..log.n_layers)
                .map(|l| normalized_gate_distribution(&log, l))
                .collect::<Result<Vec<_>>>()?,
        );
        let a = collect_routing(model, &t.train, false)?;
        let b = collect_routing(model, &t.held_out, false)?;
        split_half.push(shared_topk_overlap(&a, &b, k, RankingPolicy::GateMass)?.mean);
        logs.push(log);
    }
    let overlap = logs
        .iter()
        .map(|a| {
            logs.iter()
                .map(|b| shared_topk_overlap(a, b, k, RankingPolicy::GateMass).map(|o| o.mean))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut overlap_curves = BTreeMap::new();
    if !m.probe.sample_sizes.is_empty() {
        for t in targets {
            let mut mean: Option<Vec<OverlapPoint>> = None;
            let seeds = m.probe.overlap_seeds.max(1);
            for s in 0..seeds as u64 {
                let pts = overlap_vs_samplesize(model, &t.corpus, &m.probe.sample_sizes, k, s, SampleMode::Disjoint)?;
                match mean.as_mut() {
                    None => mean = Some(pts),
                    Some(acc) => acc.iter_mut().zip(&pts).for_each(|(a, p)| a.mean_overlap += p.mean_overlap),
                }
            }
            let mut pts = mean.expect("at least one seed");
            pts.iter_mut().for_each(|p| p.mean_overlap /= seeds as f64);
            overlap_curves.insert(t.corpus.task_label.clone(), pts);
        }
    }

    let grouping = match m.probe.group_size {
        None => None,
        Some(g) => Some(
            (0..logs[0].n_layers)
                .map(|l| greedy_group(&cooccurrence_similarity(&logs[0], l)?, g))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let summary = ProbeSummary {
        schema_version: export::EXPORT_SCHEMA_VERSION,
        top_k: k,
        tasks: all.iter().map(|t| t.corpus.task_label.clone()).collect(),
        distributions,
        overlap,
        split_half_overlap: split_half,
        overlap_curves,
        grouping,
    };
    write_json(&dir.join("summary.json"), &summary)
}

/// Expert selection and the threshold sweep for one target task.
pub fn select_for_task(
    m: &ExperimentManifest,
    model: &MoEModel,
    task: &TaskData,
) -> Result<(Vec<(ExpertRelevance, ExpertSelection, TrainMask)>, SelectSummary)> {
    let cfg = model.config();
    let samples = sample_selection_subset(&task.train, m.selection.n_samples, m.selection.sample_len, 0)?;
    let log = collect_routing(model, &samples, false)?;
    let mut chosen = Vec::new();
    let mut records = Vec::new();
    let mut sweep = Vec::new();
    for (kind, p) in [
        (ScoreKind::TokenSelectionRatio, m.selection.p_token),
        (ScoreKind::AverageGate, m.selection.p_gate),
    ] {
        let rel = ExpertRelevance::compute(kind, &log)?;
        let sel = select_experts(&rel, p)?;
        let mask = build_train_mask(model, Some(&sel), RoutedPolicy::Selected, false, false)?;
        records.push(SelectionRecord {
            score_kind: kind,
            p,
            counts: sel.counts(),
            trainable_param_count: mask.trainable_param_count,
        });
        for &sp in &m.sweep.ps {
            let s = select_experts(&rel, sp)?;
            let mk = build_train_mask(model, Some(&s), RoutedPolicy::Selected, false, false)?;
            sweep.push(SweepPoint {
                score_kind: kind,
                p: sp,
                mean_experts: experts_trained_report(&task.corpus.task_label, &s).mean_count,
                trainable_param_count: mk.trainable_param_count,
                task_loss: None,
                forgetting_kl: None,
            });
        }
        chosen.push((rel, sel, mask));
    }
    let summary = SelectSummary {
        schema_version: export::EXPORT_SCHEMA_VERSION,
        task: task.corpus.task_label.clone(),
        n_experts: cfg.n_routed_experts,
        routed_params_per_layer: cfg.routed_params_per_layer(),
        selections: records,
        sweep,
    };
    Ok((chosen, summary))
}

fn run_select(m: &ExperimentManifest, model: &MoEModel, targets: &[TaskData], out: &OutputLayout) -> Result<()> {
    for t in targets {
        let dir = out.select(&t.corpus.task_label);
        mkdir(&dir)?;
        let (chosen, summary) = select_for_task(m, model, t)?;
        for (rel, sel, mask) in &chosen {
            write_json(&dir.join(relevance_file(rel.score_kind)), rel)?;
            sel.save(dir.join(selection_file(rel.score_kind)), Some(mask.trainable_param_count))?;
        }
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(())
}

/// Fine-tunes one method and evaluates it against the vanilla model.
#[allow(clippy::too_many_arguments)]
fn fine_tune(
    m: &ExperimentManifest,
    vanilla: &MoEModel,
    method: Method,
    seed: u64,
    selection: Option<&ExpertSelection>,
    data: &TrainData,
    eval: &EvalSets,
) -> Result<(MoEModel, TrainMask, crate::train::TrainReport)> {
    let tc = m.fine_tune_config(method, seed, ExperimentManifest::seq_len(vanilla.config()));
    let (mut model, mask) = setup_method(vanilla, &tc, selection)?;
    let report = train(&mut model, &mask, data, eval, &tc)?;
    Ok((model, mask, report))
}

fn run_train(
    m: &ExperimentManifest,
    vanilla: &MoEModel,
    general: &[TaskData],
    targets: &[TaskData],
    out: &OutputLayout,
) -> Result<()> {
    let cfg = vanilla.config();
    let len = ExperimentManifest::seq_len(cfg);
    let probe = general_probe(m, cfg, general);
    let alignment_pool: Vec<Vec<usize>> = general.iter().flat_map(|t| t.train.windows(len)).collect();
    let mut summary = Vec::new();
    for t in targets {
        let label = t.corpus.task_label.clone();
        let task_pool = t.train.windows(len);
        let data = if m.train.mix_alignment {
            TrainData::new(task_pool, alignment_pool.clone(), m.train.alignment_ratio)?
        } else {
            TrainData::task_only(task_pool)?
        };
        let eval = EvalSets {
            task: eval_windows(&t.held_out, len, m.train.eval_sequences),
            alignment: Vec::new(),
            general: probe.clone(),
        };
        if eval.task.is_empty() {
            return Err(input_err!("task `{label}` has no held-out {len}-token window"));
        }
        let vanilla_task_loss = vanilla.mean_loss(&eval.task)?;
        let select_dir = out.select(&label);
        let load_sel = |kind: ScoreKind| -> Result<ExpertSelection> {
            let path = select_dir.join(selection_file(kind));
            if !path.exists() {
                return Err(input_err!("missing {}; run the `select` stage first", path.display()));
            }
            ExpertSelection::load(path)
        };
        for &method in &m.methods {
            let sel = method.score_kind().map(load_sel).transpose()?;
            for &seed in &m.seeds {
                let (model, mask, report) = fine_tune(m, vanilla, method, seed, sel.as_ref(), &data, &eval)?;
                let dir = out.train(&label).join(method.name()).join(format!("seed{seed}"));
                mkdir(&dir)?;
                report.save(dir.join("report.jsonl"))?;
                write_json(&dir.join("timing.json"), &report.step_seconds)?;
                write_json(&dir.join("mask.json"), &mask)?;
                let f = evaluate_forgetting(vanilla, &model, &probe)?;
                summary.push(RunSummary {
                    task: label.clone(),
                    method,
                    seed,
                    random_selection: false,
                    trainable_param_count: mask.trainable_param_count,
                    vanilla_task_loss,
                    task_loss: report.last().task_loss.expect("task eval set is non-empty"),
                    general_loss_before: f.loss_before,
                    general_loss_after: f.loss_after,
                    forgetting_kl: f.mean_kl,
                });
                let Some(sel) = sel.as_ref().filter(|_| m.train.random_control) else {
                    continue;
                };
                let random = sel.random_like(&mut ChaCha8Rng::seed_from_u64(seed));
                let (model, mask, report) = fine_tune(m, vanilla, method, seed, Some(&random), &data, &eval)?;
                let dir = out.train(&label).join(format!("{}_random", method.name())).join(format!("seed{seed}"));
                mkdir(&dir)?;
                report.save(dir.join("report.jsonl"))?;
                write_json(&dir.join("timing.json"), &report.step_seconds)?;
                write_json(&dir.join("mask.json"), &mask)?;
                let f = evaluate_forgetting(vanilla, &model, &probe)?;
                summary.push(RunSummary {
                    task: label.clone(),
                    method,
                    seed,
                    random_selection: true,
                    trainable_param_count: mask.trainable_param_count,
                    vanilla_task_loss,
                    task_loss: report.last().task_loss.expect("task eval set is non-empty"),
                    general_loss_before: f.loss_before,
                    general_loss_after: f.loss_after,
                    forgetting_kl: f.mean_kl,
                });
            }
        }
        if m.sweep.train {
            let seed = m.seeds.first().copied().unwrap_or(0);
            let rels: Vec<ExpertRelevance> = [ScoreKind::TokenSelectionRatio, ScoreKind::AverageGate]
                .into_iter()
                .map(|k| read_json(&select_dir.join(relevance_file(k)), "select"))
                .collect::<Result<_>>()?;
            let mut points = Vec::new();
            for rel in &rels {
                let method = match rel.score_kind {
                    ScoreKind::TokenSelectionRatio => Method::EsftToken,
                    ScoreKind::AverageGate => Method::EsftGate,
                };
                for &p in &m.sweep.ps {
                    let sel = select_experts(rel, p)?;
                    let (model, mask, report) = fine_tune(m, vanilla, method, seed, Some(&sel), &data, &eval)?;
                    let f = evaluate_forgetting(vanilla, &model, &probe)?;
                    points.push(SweepPoint {
                        score_kind: rel.score_kind,
                        p,
                        mean_experts: experts_trained_report(&label, &sel).mean_count,
                        trainable_param_count: mask.trainable_param_count,
                        task_loss: report.last().task_loss,
                        forgetting_kl: Some(f.mean_kl),
                    });
                }
            }
            write_json(&out.train(&label).join("sweep.json"), &points)?;
        }
    }
    // A sweep-only run leaves an earlier method comparison in place.
    if m.methods.is_empty() {
        return Ok(());
    }
    write_json(&out.root.join("train").join("summary.json"), &summary)
}
