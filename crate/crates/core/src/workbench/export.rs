//! Plot-ready data files. Every CSV row and JSON document carries `schema_version`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{read_json, write_json, ExperimentManifest, OutputLayout, ProbeSummary, RunSummary, SelectSummary};
use crate::error::{config_err, input_err, Error, Result};
use crate::select::ScoreKind;

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    GateDistribution,
    OverlapHeatmap,
    ExpertsPerLayer,
    TradeoffCurve,
}

impl FigureKind {
    pub const ALL: [FigureKind; 4] = [
        FigureKind::GateDistribution,
        FigureKind::OverlapHeatmap,
        FigureKind::ExpertsPerLayer,
        FigureKind::TradeoffCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureKind::GateDistribution => "gate_distribution",
            FigureKind::OverlapHeatmap => "overlap_heatmap",
            FigureKind::ExpertsPerLayer => "experts_per_layer",
            FigureKind::TradeoffCurve => "tradeoff_curve",
        }
    }

    /// Stage whose outputs this figure reads.
    pub fn prerequisite(self) -> &'static str {
        match self {
            FigureKind::GateDistribution | FigureKind::OverlapHeatmap => "probe",
            FigureKind::ExpertsPerLayer | FigureKind::TradeoffCurve => "select",
        }
    }
}

impl std::str::FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FigureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err!("unknown figure kind `{s}`"))
    }
}

/// One threshold of the p-sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub score_kind: ScoreKind,
    pub p: f64,
    pub mean_experts: f64,
    pub trainable_param_count: usize,
    pub task_loss: Option<f64>,
    pub forgetting_kl: Option<f64>,
}

#[derive(Serialize)]
struct GateRow<'a> {
    schema_version: u32,
    task: &'a str,
    layer: usize,
    rank: usize,
    expert_id: usize,
    share: f64,
    cumulative: f64,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    schema_version: u32,
    task: &'a str,
    sample_tokens: usize,
    mean_overlap: f64,
}

#[derive(Serialize)]
struct ExpertsRow<'a> {
    schema_version: u32,
    task: &'a str,
    score_kind: ScoreKind,
    p: f64,
    layer: usize,
    n_selected: usize,
    n_experts: usize,
    fraction: f64,
    selected_params: usize,
    routed_params: usize,
}

#[derive(Serialize)]
struct TradeoffRow<'a> {
    schema_version: u32,
    task: &'a str,
    score_kind: ScoreKind,
    p: f64,
    mean_experts: f64,
    trainable_param_count: usize,
    task_loss: Option<f64>,
    forgetting_kl: Option<f64>,
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    schema_version: u32,
    task: &'a str,
    method: &'static str,
    seed: u64,
    random_selection: bool,
    trainable_param_count: usize,
    vanilla_task_loss: f64,
    task_loss: f64,
    general_loss_before: f64,
    general_loss_after: f64,
    forgetting_kl: f64,
}

#[derive(Serialize)]
struct Heatmap<'a> {
    schema_version: u32,
    top_k: usize,
    tasks: &'a [String],
    overlap: &'a [Vec<f64>],
    split_half_overlap: &'a [f64],
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => input_err!("{}: {other:?}", path.display()),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn probe_summary(out: &OutputLayout) -> Result<ProbeSummary> {
    read_json(&out.probe().join("summary.json"), "probe")
}

fn select_summaries(m: &ExperimentManifest, out: &OutputLayout) -> Result<Vec<SelectSummary>> {
    if m.target_tasks.is_empty() {
        return Err(config_err!("no target tasks, so there is nothing selected to export"));
    }
    m.target_tasks
        .iter()
        .map(|t| read_json(&out.select(&t.name).join("summary.json"), "select"))
        .collect()
}

/// Writes the files of one figure kind and returns their paths.
pub fn export_figure(kind: FigureKind, m: &ExperimentManifest, out: &OutputLayout) -> Result<Vec<PathBuf>> {
    let dir = out.figures();
    super::experiment::mkdir(&dir)?;
    let v = EXPORT_SCHEMA_VERSION;
    match kind {
        FigureKind::GateDistribution => {
            let p = probe_summary(out)?;
            let mut rows = Vec::new();
            for (task, dists) in p.tasks.iter().zip(&p.distributions) {
                for d in dists {
                    for (rank, ((expert_id, share), cumulative)) in d.shares.iter().zip(d.cumulative()).enumerate() {
                        rows.push(GateRow {
                            schema_version: v,
                            task,
                            layer: d.layer,
                            rank,
                            expert_id: *expert_id,
                            share: *share,
                            cumulative,
                        });
                    }
                }
            }
            let path = dir.join("gate_distribution.csv");
            write_csv(&path, rows)?;
            Ok(vec![path])
        }
        FigureKind::OverlapHeatmap => {
            let p = probe_summary(out)?;
            let path = dir.join("overlap_heatmap.json");
            write_json(
                &path,
                &Heatmap {
                    schema_version: v,
                    top_k: p.top_k,
                    tasks: &p.tasks,
                    overlap: &p.overlap,
                    split_half_overlap: &p.split_half_overlap,
                },
            )?;
            let mut paths = vec![path];
            if !p.overlap_curves.is_empty() {
                let rows = p.overlap_curves.iter().flat_map(|(task, pts)| {
                    pts.iter().map(move |pt| CurveRow {
                        schema_version: v,
                        task,
                        sample_tokens: pt.sample_tokens,
                        mean_overlap: pt.mean_overlap,
                    })
                });
                let path = dir.join("overlap_vs_samplesize.csv");
                write_csv(&path, rows)?;
                paths.push(path);
            }
            if let Some(g) = &p.grouping {
                let path = dir.join("grouping.json");
                write_json(&path, &serde_json::json!({ "schema_version": v, "layers": g }))?;
                paths.push(path);
            }
            Ok(paths)
        }
        FigureKind::ExpertsPerLayer => {
            let mut rows = Vec::new();
            let sums = select_summaries(m, out)?;
            for s in &sums {
                let per_expert = s.routed_params_per_layer / s.n_experts.max(1);
                for r in &s.selections {
                    for (layer, &n) in r.counts.iter().enumerate() {
                        rows.push(ExpertsRow {
                            schema_version: v,
                            task: &s.task,
                            score_kind: r.score_kind,
                            p: r.p,
                            layer,
                            n_selected: n,
                            n_experts: s.n_experts,
                            fraction: n as f64 / s.n_experts as f64,
                            selected_params: n * per_expert,
                            routed_params: s.routed_params_per_layer,
                        });
                    }
                }
            }
            let path = dir.join("experts_per_layer.csv");
            write_csv(&path, rows)?;
            Ok(vec![path])
        }
        FigureKind::TradeoffCurve => {
            let sums = select_summaries(m, out)?;
            let mut rows = Vec::new();
            for s in &sums {
                let trained_path = out.train(&s.task).join("sweep.json");
                let key = |pts: &[SweepPoint]| pts.iter().map(|p| (p.score_kind, p.p)).collect::<Vec<_>>();
                // Trained points are used only while they match the current selection sweep.
                let mut points = s.sweep.clone();
                if trained_path.exists() {
                    let trained: Vec<SweepPoint> = read_json(&trained_path, "train")?;
                    if key(&trained) == key(&s.sweep) {
                        points = trained;
                    }
                }
                for pt in points {
                    rows.push((s.task.clone(), pt));
                }
            }
            rows.sort_by(|a, b| {
                (&a.0, a.1.score_kind as u8, a.1.p)
                    .partial_cmp(&(&b.0, b.1.score_kind as u8, b.1.p))
                    .expect("finite thresholds")
            });
            let path = dir.join("tradeoff_curve.csv");
            write_csv(
                &path,
                rows.iter().map(|(task, pt)| TradeoffRow {
                    schema_version: v,
                    task,
                    score_kind: pt.score_kind,
                    p: pt.p,
                    mean_experts: pt.mean_experts,
                    trainable_param_count: pt.trainable_param_count,
                    task_loss: pt.task_loss,
                    forgetting_kl: pt.forgetting_kl,
                }),
            )?;
            Ok(vec![path])
        }
    }
}

/// Method comparison table from the train stage.
pub fn export_comparison(out: &OutputLayout) -> Result<PathBuf> {
    let runs: Vec<RunSummary> = read_json(&out.root.join("train").join("summary.json"), "train")?;
    let path = out.figures().join("comparison.csv");
    super::experiment::mkdir(&out.figures())?;
    write_csv(
        &path,
        runs.iter().map(|r| ComparisonRow {
            schema_version: EXPORT_SCHEMA_VERSION,
            task: &r.task,
            method: r.method.name(),
            seed: r.seed,
            random_selection: r.random_selection,
            trainable_param_count: r.trainable_param_count,
            vanilla_task_loss: r.vanilla_task_loss,
            task_loss: r.task_loss,
            general_loss_before: r.general_loss_before,
            general_loss_after: r.general_loss_after,
            forgetting_kl: r.forgetting_kl,
        }),
    )?;
    Ok(path)
}

/// Exports every figure whose prerequisite outputs exist. Fails only when
/// nothing can be exported.
pub fn export_all(m: &ExperimentManifest, out: &OutputLayout) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut missing = Vec::new();
    for kind in FigureKind::ALL {
        match export_figure(kind, m, out) {
            Ok(p) => written.extend(p),
            Err(e) => missing.push(format!("{}: {e}", kind.name())),
        }
    }
    match export_comparison(out) {
        Ok(p) => written.push(p),
        Err(e) => missing.push(format!("comparison: {e}")),
    }
    if written.is_empty() {
        return Err(input_err!("nothing to export ({})", missing.join("; ")));
    }
    Ok(written)
}
